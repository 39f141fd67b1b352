//! Minimum-cost bipartite assignment between ground-truth objects and queries.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::metrics::{giou_aabb, Aabb};
use crate::model::referring_scores;

/// Weights of the matching cost terms: alignment, center L1, GIoU.
pub const COST_ALIGN: f64 = 2.0;
pub const COST_CENTER: f64 = 5.0;
pub const COST_GIOU: f64 = 2.0;

/// Optimal assignment of every row to a distinct column of a rectangular
/// `rows x cols` cost matrix (`rows <= cols`). Returns the column per row.
/// Shortest augmenting path with potentials, O(rows^2 * cols).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if n > m {
        return Err(Error::TooManyTargets { gts: n, queries: m });
    }
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
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
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// Ground-truth object referenced by a text sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetObject {
    pub aabb: Aabb,
    /// Columns of the text tokens naming this object.
    pub span: Range<usize>,
    pub object_id: u32,
}

/// `(query, gt)` pairs; unmatched queries stand for "no object".
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
}

impl Matching {
    pub fn gt_of(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }

    pub fn query_of(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }
}

/// Matching cost of every (gt, query) pair for one sample.
/// `boxes`: `k` rows of center+size; `align`: `k` rows of logits over `T'`.
pub fn cost_matrix(boxes: &[Vec<f64>], align: &[Vec<f64>], targets: &[TargetObject]) -> Result<Vec<Vec<f64>>> {
    let preds: Vec<Aabb> = boxes.iter().map(|b| Aabb::from_slice(b)).collect();
    targets
        .iter()
        .map(|g| {
            let s = referring_scores(align, g.span.clone())?;
            preds
                .iter()
                .enumerate()
                .map(|(q, p)| {
                    let l1: f64 = (0..3).map(|a| (p.center[a] - g.aabb.center[a]).abs()).sum();
                    let giou = giou_aabb(p, &g.aabb)?;
                    Ok(COST_ALIGN * (1.0 - s[q]) + COST_CENTER * l1 + COST_GIOU * (1.0 - giou))
                })
                .collect()
        })
        .collect()
}

pub fn hungarian_match(boxes: &[Vec<f64>], align: &[Vec<f64>], targets: &[TargetObject]) -> Result<Matching> {
    if targets.len() > boxes.len() {
        return Err(Error::TooManyTargets {
            gts: targets.len(),
            queries: boxes.len(),
        });
    }
    let cost = cost_matrix(boxes, align, targets)?;
    let cols = hungarian(&cost)?;
    Ok(Matching {
        pairs: cols.into_iter().enumerate().map(|(g, q)| (q, g)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost[0].len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + rec(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost[0].len()])
    }

    fn total(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
        cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
    }

    #[test]
    fn single_pair() {
        assert_eq!(hungarian(&[vec![3.0]]).unwrap(), vec![0]);
    }

    #[test]
    fn three_by_three_fixture() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let cols = hungarian(&cost).unwrap();
        assert_eq!(total(&cost, &cols), brute_force(&cost));
        assert_eq!(total(&cost, &cols), 5.0);
    }

    #[test]
    fn more_targets_than_queries_fails() {
        let cost = vec![vec![1.0], vec![2.0]];
        assert!(matches!(hungarian(&cost), Err(Error::TooManyTargets { .. })));
    }

    #[test]
    fn duplicate_queries_same_cost() {
        let boxes = vec![vec![0.0, 0.0, 0.5, 1.0, 1.0, 1.0]; 3];
        let align = vec![vec![0.0, 1.0, 0.0]; 3];
        let t = vec![TargetObject {
            aabb: Aabb::new([0.2, 0.0, 0.5], [1.0, 1.0, 1.0]),
            span: 1..2,
            object_id: 0,
        }];
        let cost = cost_matrix(&boxes, &align, &t).unwrap();
        assert!(cost[0].iter().all(|c| (c - cost[0][0]).abs() < 1e-12));
        assert_eq!(hungarian_match(&boxes, &align, &t).unwrap().pairs.len(), 1);
    }

    proptest! {
        #[test]
        fn optimal_like_brute_force(rows in 1usize..=5, extra in 0usize..=2, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cols = rows + extra;
            let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
            let a = hungarian(&cost).unwrap();
            let mut seen = a.clone();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), rows);
            prop_assert!((total(&cost, &a) - brute_force(&cost)).abs() < 1e-9);
        }
    }
}
