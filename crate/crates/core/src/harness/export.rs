//! Run and sweep artefacts on disk.

use std::path::Path;

use super::{RunResult, Summary, SweepTable};
use crate::error::{CasError, Result};
use crate::metrics::{age_curve_csv, records_csv};

/// File names written by [`write_run`].
pub const RUN_FILES: [&str; 3] = ["records.csv", "age_curve.csv", "summary.json"];

pub fn write_run(result: &RunResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RUN_FILES[0]), records_csv(&result.records))?;
    std::fs::write(dir.join(RUN_FILES[1]), age_curve_csv(&result.age_curve))?;
    std::fs::write(dir.join(RUN_FILES[2]), serde_json::to_string_pretty(&result.summary)?)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| CasError::Schema(e.to_string()))
}

/// `sweep.json` with every row, plus `sweep.csv` with one line per value.
pub fn write_sweep(table: &SweepTable, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(table)?)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    let mut csv = format!("{},half_life,max_Fbar,mean_share,cov_share,weight_share\n", table.axis);
    for row in &table.rows {
        let s = &row.summary;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.value,
            s.half_life.map(|h| h.to_string()).unwrap_or_default(),
            opt(s.max_fbar),
            opt(s.mean_share),
            opt(s.cov_share),
            opt(s.weight_share),
        ));
    }
    std::fs::write(dir.join("sweep.csv"), csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curricula::StreamConfig;
    use crate::harness::{run_experiment, RunConfig};

    #[test]
    fn summary_round_trips_through_disk() {
        let r = run_experiment(&RunConfig::new(StreamConfig::circular().with_days(30), 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(&r, dir.path()).unwrap();
        assert_eq!(read_summary(&dir.path().join("summary.json")).unwrap(), r.summary);
        let csv = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 30 * 31 / 2);
    }
}
