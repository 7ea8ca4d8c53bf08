//! Minimal-cost injective assignment of ground-truth objects to queries.
//!
//! The solver is the shortest-augmenting-path formulation with row/column
//! potentials (O(M²·Q)), followed by a refinement pass that makes the
//! returned assignment the lexicographically smallest — by query index,
//! scanned in ground-truth order — among all minimal-cost assignments, so
//! training runs are reproducible even on tied costs.

use crate::error::{Error, Result};

/// Dense `M × Q` cost table, ground truth on rows, queries on columns.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    m: usize,
    q: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(m: usize, q: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * q {
            return Err(Error::Dimension(format!(
                "cost matrix {m}x{q} wants {} entries, got {}",
                m * q,
                data.len()
            )));
        }
        Ok(CostMatrix { m, q, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let q = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(m * q);
        for r in rows {
            if r.len() != q {
                return Err(Error::Dimension("ragged cost matrix".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(CostMatrix { m, q, data })
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.q
    }

    pub fn at(&self, g: usize, query: usize) -> f64 {
        self.data[g * self.q + query]
    }
}

/// Query-to-ground-truth pairing with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    /// `(query_index, gt_index)`, sorted by gt index; injective on both sides.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of selected cost entries, accumulated in gt order.
    pub total_cost: f64,
    /// Queries left without ground truth, ascending.
    pub unmatched_queries: Vec<usize>,
}

impl MatchAssignment {
    /// Matched query for a ground-truth index, if any.
    pub fn query_of(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|(_, g)| *g == gt).map(|(q, _)| *q)
    }

    pub fn gt_of(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|(q, _)| *q == query).map(|(_, g)| *g)
    }
}

/// Globally minimal-cost injective assignment; ties resolved toward the
/// lowest query index per ground truth, in ground-truth order.
pub fn hungarian_match(cost: &CostMatrix) -> Result<MatchAssignment> {
    let (m, q) = (cost.m, cost.q);
    if m > q {
        return Err(Error::Contract(format!(
            "{m} ground-truth objects cannot be injected into {q} queries"
        )));
    }
    if let Some(bad) = cost.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite cost entry {bad}")));
    }
    if m == 0 {
        return Ok(MatchAssignment {
            pairs: Vec::new(),
            total_cost: 0.0,
            unmatched_queries: (0..q).collect(),
        });
    }

    let mut used = vec![false; q];
    let mut chosen = vec![usize::MAX; m];
    for g in 0..m {
        let base = solve_rows(cost, g, &used);
        let fallback = base.choice_for_first_row;
        let sub_opt = base.total;
        let mut pick = fallback;
        // Any unused query below the solver's own choice that still allows
        // an equally cheap completion wins the tie.
        for cand in 0..fallback {
            if used[cand] {
                continue;
            }
            let head = cost.at(g, cand);
            let rest = if g + 1 < m {
                used[cand] = true;
                let r = solve_rows(cost, g + 1, &used).total;
                used[cand] = false;
                r
            } else {
                0.0
            };
            if head + rest <= sub_opt + tie_eps(sub_opt) {
                pick = cand;
                break;
            }
        }
        chosen[g] = pick;
        used[pick] = true;
    }

    let pairs: Vec<(usize, usize)> = chosen.iter().enumerate().map(|(g, &qi)| (qi, g)).collect();
    let mut total = 0.0;
    for (g, &qi) in chosen.iter().enumerate() {
        total += cost.at(g, qi);
    }
    let unmatched = (0..q).filter(|qi| !chosen.contains(qi)).collect();
    Ok(MatchAssignment { pairs, total_cost: total, unmatched_queries: unmatched })
}

fn tie_eps(total: f64) -> f64 {
    1e-12 * (1.0 + total.abs())
}

struct SubSolution {
    total: f64,
    choice_for_first_row: usize,
}

/// Optimal assignment of rows `from_g..M` onto the unused columns.
/// `total` is accumulated in row order so equal assignments produce
/// bit-identical sums.
fn solve_rows(cost: &CostMatrix, from_g: usize, used: &[bool]) -> SubSolution {
    let cols: Vec<usize> = (0..cost.q).filter(|&c| !used[c]).collect();
    let rows: Vec<usize> = (from_g..cost.m).collect();
    let assign = solve_potentials(cost, &rows, &cols);
    let mut total = 0.0;
    for (ri, &r) in rows.iter().enumerate() {
        total += cost.at(r, cols[assign[ri]]);
    }
    SubSolution { total, choice_for_first_row: cols[assign[0]] }
}

/// Shortest-augmenting-path assignment over the given row/column subsets.
/// Returns, per row position, the chosen column position.
fn solve_potentials(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let m = rows.len();
    let q = cols.len();
    debug_assert!(m >= 1 && m <= q);
    let inf = f64::INFINITY;
    // 1-based arrays; column 0 is the virtual start of each augmentation.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; q + 1];
    let mut row_of = vec![0usize; q + 1];
    let mut way = vec![0usize; q + 1];
    for i in 1..=m {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; q + 1];
        let mut visited = vec![false; q + 1];
        loop {
            visited[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=q {
                if visited[j] {
                    continue;
                }
                let cur = cost.at(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=q {
                if visited[j] {
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
    let mut assign = vec![usize::MAX; m];
    for j in 1..=q {
        if row_of[j] != 0 {
            assign[row_of[j] - 1] = j - 1;
        }
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injections, totals in gt order.
    pub(crate) fn brute_force(cost: &CostMatrix) -> (Vec<usize>, f64) {
        fn rec(
            cost: &CostMatrix,
            g: usize,
            used: &mut Vec<bool>,
            cur: &mut Vec<usize>,
            best: &mut (Vec<usize>, f64),
        ) {
            if g == cost.rows() {
                let total: f64 = cur.iter().enumerate().map(|(g, &qi)| cost.at(g, qi)).sum();
                if total < best.1 {
                    *best = (cur.clone(), total);
                }
                return;
            }
            for qi in 0..cost.cols() {
                if !used[qi] {
                    used[qi] = true;
                    cur.push(qi);
                    rec(cost, g + 1, used, cur, best);
                    cur.pop();
                    used[qi] = false;
                }
            }
        }
        let mut best = (Vec::new(), f64::INFINITY);
        rec(cost, 0, &mut vec![false; cost.cols()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn two_by_two_spec_case() {
        let cost = CostMatrix::from_rows(&[vec![1.0, 9.0], vec![9.0, 1.0]]).unwrap();
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
        assert!(a.unmatched_queries.is_empty());
    }

    #[test]
    fn single_row_takes_argmin_column() {
        let cost = CostMatrix::from_rows(&[vec![4.0, 2.0, 7.0, 3.0]]).unwrap();
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.unmatched_queries, vec![0, 2, 3]);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..120 {
            let m = rng.random_range(1..=5);
            let q = rng.random_range(m..=7);
            let data: Vec<f64> = (0..m * q).map(|_| rng.random_range(0.0..10.0)).collect();
            let cost = CostMatrix::new(m, q, data).unwrap();
            let got = hungarian_match(&cost).unwrap();
            let (want_assign, want_total) = brute_force(&cost);
            assert_eq!(got.total_cost, want_total, "m={m} q={q}");
            let got_assign: Vec<usize> = got.pairs.iter().map(|(qi, _)| *qi).collect();
            assert_eq!(got_assign, want_assign);
        }
    }

    #[test]
    fn ties_resolve_to_lowest_query_lexicographically() {
        // Every assignment costs 2; the refinement must pick (g0,q0),(g1,q1).
        let cost = CostMatrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);

        // Ties only in the second row.
        let cost = CostMatrix::from_rows(&[vec![0.0, 5.0, 5.0], vec![5.0, 2.0, 2.0]]).unwrap();
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn more_ground_truth_than_queries_is_a_contract_error() {
        let cost = CostMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(hungarian_match(&cost), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_costs_rejected() {
        let cost = CostMatrix::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(hungarian_match(&cost), Err(Error::Domain(_))));
    }

    #[test]
    fn empty_ground_truth_leaves_all_queries_unmatched() {
        let cost = CostMatrix::new(0, 3, vec![]).unwrap();
        let a = hungarian_match(&cost).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_queries, vec![0, 1, 2]);
        assert_eq!(a.total_cost, 0.0);
    }
}
