//! Exact square assignment with a deterministic tie rule.

/// Minimum-cost perfect assignment for a square cost matrix via the
/// shortest-augmenting-path method with row/column potentials. Returns
/// `col_of[row]`.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    col_of
}

fn total(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Optimal assignment; among optimal assignments (up to a relative slack of
/// 1e-12) the lexicographically smallest `col_of` is returned, so exact ties
/// resolve to the lowest index.
pub fn solve(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let best = total(cost, &hungarian(cost));
    let slack = 1e-12 * (1.0 + best.abs());
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut taken = vec![false; n];
    for i in 0..n {
        let fixed_cost: f64 = fixed.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        let rows: Vec<usize> = (i + 1..n).collect();
        let choice = (0..n)
            .filter(|&j| !taken[j])
            .find(|&j| {
                let cols: Vec<usize> = (0..n).filter(|&c| !taken[c] && c != j).collect();
                let sub: Vec<Vec<f64>> =
                    rows.iter().map(|&r| cols.iter().map(|&c| cost[r][c]).collect()).collect();
                let rest = total(&sub, &hungarian(&sub));
                fixed_cost + cost[i][j] + rest <= best + slack
            })
            .expect("an optimal completion always exists");
        taken[choice] = true;
        fixed.push(choice);
    }
    fixed
}
