use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box stored as center + full extent, both in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Aabb {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Self {
        Self { center, size }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            center: [v[0], v[1], v[2]],
            size: [v[3], v[4], v[5]],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [cx, cy, cz] = self.center;
        let [sx, sy, sz] = self.size;
        [cx, cy, cz, sx, sy, sz]
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] - 0.5 * self.size[i])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] + 0.5 * self.size[i])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|i| p[i] >= lo[i] - tol && p[i] <= hi[i] + tol)
    }

    pub fn contains_box(&self, other: &Aabb, tol: f64) -> bool {
        self.contains(other.min(), tol) && self.contains(other.max(), tol)
    }

    fn validate(&self) -> Result<()> {
        if self.size.iter().all(|&s| s > 0.0) {
            Ok(())
        } else {
            Err(Error::NonPositiveSize(self.size))
        }
    }

    pub fn intersection_volume(&self, other: &Aabb) -> f64 {
        let (a0, a1, b0, b1) = (self.min(), self.max(), other.min(), other.max());
        (0..3)
            .map(|i| (a1[i].min(b1[i]) - a0[i].max(b0[i])).max(0.0))
            .product()
    }

    /// Volume of the smallest axis-aligned box enclosing both.
    pub fn hull_volume(&self, other: &Aabb) -> f64 {
        let (a0, a1, b0, b1) = (self.min(), self.max(), other.min(), other.max());
        (0..3)
            .map(|i| a1[i].max(b1[i]) - a0[i].min(b0[i]))
            .product()
    }
}

pub fn iou_aabb(a: &Aabb, b: &Aabb) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection_volume(b);
    let union = a.volume() + b.volume() - inter;
    Ok(inter / union)
}

/// Generalized IoU: `iou - (hull - union) / hull`, in (-1, 1].
pub fn giou_aabb(a: &Aabb, b: &Aabb) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection_volume(b);
    let union = a.volume() + b.volume() - inter;
    let hull = a.hull_volume(b);
    Ok(inter / union - (hull - union) / hull)
}
