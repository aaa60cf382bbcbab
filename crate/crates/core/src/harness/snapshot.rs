//! Versioned JSON persistence of the memory. Retained targets are not stored;
//! they are regenerated from the run config on restore.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CasError, Result};
use crate::gm::GaussianMixture;
use crate::protocol::{readout_time, MemoryState, ProtocolGrid};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub version: u32,
    #[serde(rename = "L")]
    pub segments: usize,
    pub day: usize,
    pub prior: GaussianMixture,
    pub nodes: Vec<GaussianMixture>,
    pub readout: BTreeMap<usize, f64>,
}

impl Snapshot {
    pub fn of(state: &MemoryState) -> Self {
        Snapshot {
            version: SNAPSHOT_VERSION,
            segments: state.segments(),
            day: state.day(),
            prior: state.prior().clone(),
            nodes: state.grid().nodes().to_vec(),
            readout: state.readout().clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and checks the schema: version, node count, readout keys and
    /// values against the closed form (relative 1e-9, which covers the
    /// rounding of repeated rescaling).
    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CasError::Schema(format!("not JSON: {e}")))?;
        match probe.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SNAPSHOT_VERSION) => {}
            Some(v) => return Err(CasError::Schema(format!("unsupported snapshot version {v}"))),
            None => return Err(CasError::Schema("missing snapshot version".into())),
        }
        let snap: Snapshot = serde_json::from_value(probe).map_err(|e| CasError::Schema(e.to_string()))?;
        snap.check()?;
        Ok(snap)
    }

    fn check(&self) -> Result<()> {
        if self.segments == 0 || self.nodes.len() != self.segments + 1 {
            return Err(CasError::Schema(format!(
                "L = {} needs {} nodes, found {}",
                self.segments,
                self.segments + 1,
                self.nodes.len()
            )));
        }
        if self.day == 0 || self.readout.keys().copied().ne(1..=self.day) {
            return Err(CasError::Schema(format!("readout must hold exactly days 1..={}", self.day)));
        }
        for (&m, &t) in &self.readout {
            let want = readout_time(self.segments, self.day - m);
            if !((t - want).abs() <= 1e-9 * want) {
                return Err(CasError::Schema(format!("readout of day {m} is {t}, expected {want}")));
            }
        }
        self.prior.validate().map_err(|e| CasError::Schema(format!("prior: {e}")))?;
        for (j, n) in self.nodes.iter().enumerate() {
            n.validate().map_err(|e| CasError::Schema(format!("node {j}: {e}")))?;
        }
        Ok(())
    }

    /// Reals stored: nodes, prior and readout entries.
    pub fn real_count(&self) -> usize {
        self.nodes.iter().map(GaussianMixture::n_reals).sum::<usize>()
            + self.prior.n_reals()
            + self.readout.len()
    }
}

pub(super) fn into_state(snap: &Snapshot, originals: Vec<GaussianMixture>) -> Result<MemoryState> {
    let grid = ProtocolGrid::from_nodes(snap.nodes.clone())?;
    MemoryState::from_parts(snap.prior.clone(), grid, snap.day, snap.readout.clone(), originals)
}

pub fn snapshot(state: &MemoryState, path: &Path) -> Result<()> {
    std::fs::write(path, Snapshot::of(state).to_json()?)?;
    Ok(())
}

pub fn restore(path: &Path) -> Result<Snapshot> {
    Snapshot::from_json(&std::fs::read_to_string(path)?)
}

pub fn snapshot_real_count(state: &MemoryState) -> usize {
    Snapshot::of(state).real_count()
}
