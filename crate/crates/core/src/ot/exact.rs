//! Exact unregularized OT for tiny instances by enumerating basic feasible
//! solutions of the transportation polytope.
//!
//! Every vertex of `U(1/m, 1/n)` is supported on a spanning tree of the
//! complete bipartite graph `K_{m,n}` (`m + n − 1` edges). For each spanning
//! tree the flows are forced: peel leaves, each leaf edge carrying its
//! node's remaining mass. Trees with all flows nonnegative are vertices; the
//! cheapest one is an optimum of the linear program.

use ndarray::Array2;

use super::cost::CostMatrix;
use crate::error::{Error, Result};

pub const MAX_EXACT_DIM: usize = 4;

const FLOW_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ExactOt {
    pub plan: Array2<f64>,
    pub value: f64,
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra] = rb;
        true
    }
}

/// Forced flows on a spanning tree; `None` if some flow is negative.
fn tree_flows(m: usize, n: usize, edges: &[(usize, usize)]) -> Option<Array2<f64>> {
    // Nodes 0..m are rows, m..m+n columns.
    let mut mass: Vec<f64> = (0..m)
        .map(|_| 1.0 / m as f64)
        .chain((0..n).map(|_| 1.0 / n as f64))
        .collect();
    let mut alive = vec![true; edges.len()];
    let mut degree = vec![0usize; m + n];
    for &(i, j) in edges {
        degree[i] += 1;
        degree[m + j] += 1;
    }
    let mut plan = Array2::zeros((m, n));
    for _ in 0..edges.len() {
        let leaf = (0..m + n).find(|&v| degree[v] == 1)?;
        let e = (0..edges.len())
            .find(|&e| alive[e] && (edges[e].0 == leaf || m + edges[e].1 == leaf))?;
        let (i, j) = edges[e];
        let other = if leaf == i { m + j } else { i };
        let flow = mass[leaf];
        if flow < -FLOW_TOL {
            return None;
        }
        plan[[i, j]] = flow.max(0.0);
        mass[leaf] = 0.0;
        mass[other] -= flow;
        alive[e] = false;
        degree[leaf] -= 1;
        degree[other] -= 1;
    }
    if mass.iter().any(|r| r.abs() > FLOW_TOL) {
        return None;
    }
    Some(plan)
}

type Cell = (usize, usize);

fn visit_combinations(
    pool: &[(usize, usize)],
    k: usize,
    start: usize,
    chosen: &mut Vec<(usize, usize)>,
    visit: &mut dyn FnMut(&[Cell]),
) {
    if chosen.len() == k {
        visit(chosen);
        return;
    }
    let needed = k - chosen.len();
    for idx in start..=pool.len() - needed {
        chosen.push(pool[idx]);
        visit_combinations(pool, k, idx + 1, chosen, visit);
        chosen.pop();
    }
}

/// Exact `min_{T ∈ U(1/m, 1/n)} ⟨T, C⟩` for `m, n ≤ 4`.
pub fn exact_ot_small(cost: &CostMatrix) -> Result<ExactOt> {
    let (m, n) = (cost.rows(), cost.cols());
    if m > MAX_EXACT_DIM || n > MAX_EXACT_DIM {
        return Err(Error::UnsupportedSize(format!(
            "exact OT supports up to {MAX_EXACT_DIM}x{MAX_EXACT_DIM}, got {m}x{n}"
        )));
    }
    let c = cost.view();
    let pool: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let mut best: Option<ExactOt> = None;
    let mut visit = |edges: &[(usize, usize)]| {
        let mut ds = DisjointSet((0..m + n).collect());
        if !edges.iter().all(|&(i, j)| ds.union(i, m + j)) {
            return;
        }
        if let Some(plan) = tree_flows(m, n, edges) {
            let value: f64 = (&plan * &c).sum();
            if best.as_ref().is_none_or(|b| value < b.value) {
                best = Some(ExactOt { plan, value });
            }
        }
    };
    visit_combinations(&pool, m + n - 1, 0, &mut Vec::new(), &mut visit);
    Ok(best.expect("the north-west corner tree is always feasible"))
}
