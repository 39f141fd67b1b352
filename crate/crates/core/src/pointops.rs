//! Parameter-free point-set operators: farthest point sampling, ball query
//! and grouped max-pooling, composed into the visual-token query that turns a
//! variable-size backbone output into a fixed number of tokens.

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling. Output starts at `start`; every later
/// pick maximizes the distance to the already selected set, ties to the
/// lowest index.
pub fn fps(points: &[Point], n: usize, start: usize) -> Result<Vec<usize>> {
    let m = points.len();
    if n > m {
        return Err(Error::TooManySamples {
            requested: n,
            available: m,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if start >= m {
        return Err(Error::config(format!("fps start {start} out of range for {m} points")));
    }
    let mut selected = Vec::with_capacity(n);
    let mut min_d = vec![f64::INFINITY; m];
    let mut chosen = vec![false; m];
    let mut current = start;
    for _ in 0..n {
        selected.push(current);
        chosen[current] = true;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Fixed-width neighbor lists, row-major `n x k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGroup {
    pub indices: Vec<usize>,
    pub valid: Vec<bool>,
    pub k: usize,
}

impl NeighborGroup {
    pub fn len(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn valid_row(&self, i: usize) -> &[bool] {
        &self.valid[i * self.k..(i + 1) * self.k]
    }
}

/// Up to `k` points within `radius` of each center, ascending index order.
/// Short rows repeat their first member (slot marked invalid); an empty ball
/// is filled with the globally nearest point, all slots invalid.
pub fn ball_query(centers: &[Point], points: &[Point], k: usize, radius: f64) -> NeighborGroup {
    assert!(k >= 1 && radius > 0.0 && !points.is_empty());
    let r2 = radius * radius;
    let mut indices = Vec::with_capacity(centers.len() * k);
    let mut valid = Vec::with_capacity(centers.len() * k);
    for c in centers {
        let start = indices.len();
        for (i, p) in points.iter().enumerate() {
            if dist2(p, c) <= r2 {
                indices.push(i);
                valid.push(true);
                if indices.len() - start == k {
                    break;
                }
            }
        }
        let found = indices.len() - start;
        let fill = if found > 0 {
            indices[start]
        } else {
            let mut best = (f64::INFINITY, 0);
            for (i, p) in points.iter().enumerate() {
                let d = dist2(p, c);
                if d < best.0 {
                    best = (d, i);
                }
            }
            best.1
        };
        for _ in found..k {
            indices.push(fill);
            valid.push(false);
        }
    }
    NeighborGroup { indices, valid, k }
}

/// Row-major `m x d` feature matrix pooled to `n x d` by per-channel max over each group.
pub fn grouped_max_pool(features: &[f64], d: usize, group: &NeighborGroup) -> Vec<f64> {
    let n = group.len();
    let mut out = vec![f64::NEG_INFINITY; n * d];
    for i in 0..n {
        let dst = &mut out[i * d..(i + 1) * d];
        for &j in group.row(i) {
            let src = &features[j * d..(j + 1) * d];
            for (o, &f) in dst.iter_mut().zip(src) {
                if f > *o {
                    *o = f;
                }
            }
        }
    }
    out
}

/// Index plan of the visual-token query, reusable across feature tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenQueryPlan {
    /// Indices into the raw cloud chosen by FPS.
    pub candidates: Vec<usize>,
    pub coords: Vec<Point>,
    /// Groups into the backbone output tokens.
    pub group: NeighborGroup,
}

pub fn plan_token_query(
    cloud: &[Point],
    token_xyz: &[Point],
    n: usize,
    k_q: usize,
    radius: f64,
    start: usize,
) -> Result<TokenQueryPlan> {
    let candidates = fps(cloud, n, start)?;
    let coords: Vec<Point> = candidates.iter().map(|&i| cloud[i]).collect();
    let group = ball_query(&coords, token_xyz, k_q, radius);
    Ok(TokenQueryPlan {
        candidates,
        coords,
        group,
    })
}

/// `C = FPS(P)`, `V0 = MaxPool(BallQuery(V', C, k_q, r))`.
pub fn visual_token_query(
    cloud: &[Point],
    token_xyz: &[Point],
    token_feat: &[f64],
    d: usize,
    n: usize,
    k_q: usize,
    radius: f64,
) -> Result<(Vec<Point>, Vec<f64>)> {
    if token_feat.len() != token_xyz.len() * d {
        return Err(Error::DimensionMismatch(format!(
            "{} token features for {} tokens of width {d}",
            token_feat.len(),
            token_xyz.len()
        )));
    }
    let plan = plan_token_query(cloud, token_xyz, n, k_q, radius, 0)?;
    let v0 = grouped_max_pool(token_feat, d, &plan.group);
    Ok((plan.coords, v0))
}
