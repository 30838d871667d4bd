//! Box-constrained search spaces over the affine parameters, with a
//! normalized `[-1, 1]^d` view used by all search algorithms.

use rand::Rng;

use crate::error::{Error, Result};
use crate::warp::{TransformParams, IDENTITY_PARAMS, PARAM_NAMES};

/// Point in the normalized coordinates of a [`ConstraintSpace`], one value
/// per free parameter in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPoint(Vec<f64>);

impl NormalizedPoint {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dims: usize) -> Self {
        Self(vec![0.0; dims])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn set(&mut self, axis: usize, value: f64) {
        self.0[axis] = value;
    }

    /// Clamps every coordinate into `[-1, 1]`.
    pub fn project(&self) -> Self {
        Self(self.0.iter().map(|x| x.clamp(-1.0, 1.0)).collect())
    }

    /// Squashes every coordinate into `(-1, 1)` through `tanh`.
    pub fn tanh_squash(&self) -> Self {
        Self(self.0.iter().map(|x| x.tanh()).collect())
    }
}

/// Axis-aligned box over a subset of the six affine parameters.
///
/// Frozen parameters are pinned to their identity values; free parameters
/// map affinely between their `[lo, hi]` interval and `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpace {
    bounds: [[f64; 2]; 6],
    free: [bool; 6],
}

/// Default per-parameter intervals: translations in pixels, angles given in
/// degrees here and stored as radians, scales as plain factors.
pub const DEFAULT_TRANSLATION: [f64; 2] = [-3.0, 3.0];
pub const DEFAULT_ROTATION_DEG: [f64; 2] = [-30.0, 30.0];
pub const DEFAULT_SHEAR_DEG: [f64; 2] = [-20.0, 20.0];
pub const DEFAULT_SCALE: [f64; 2] = [0.6, 1.4];

fn default_bounds() -> [[f64; 2]; 6] {
    [
        DEFAULT_TRANSLATION,
        DEFAULT_TRANSLATION,
        [DEFAULT_ROTATION_DEG[0].to_radians(), DEFAULT_ROTATION_DEG[1].to_radians()],
        [DEFAULT_SHEAR_DEG[0].to_radians(), DEFAULT_SHEAR_DEG[1].to_radians()],
        DEFAULT_SCALE,
        DEFAULT_SCALE,
    ]
}

impl ConstraintSpace {
    /// Builds a space from explicit bounds and a free mask. Bounds of frozen
    /// parameters are ignored. Every free interval must be non-degenerate
    /// and contain the parameter's identity value.
    pub fn new(bounds: [[f64; 2]; 6], free: [bool; 6]) -> Result<Self> {
        if !free.iter().any(|f| *f) {
            return Err(Error::Config("constraint space has no free parameters".into()));
        }
        for i in 0..6 {
            if !free[i] {
                continue;
            }
            let [lo, hi] = bounds[i];
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "parameter {}: bounds [{lo}, {hi}] are not an interval",
                    PARAM_NAMES[i]
                )));
            }
            let id = IDENTITY_PARAMS[i];
            if !(lo <= id && id <= hi) {
                return Err(Error::Config(format!(
                    "parameter {}: identity value {id} outside [{lo}, {hi}]",
                    PARAM_NAMES[i]
                )));
            }
        }
        Ok(Self { bounds, free })
    }

    /// Translations only (d = 2).
    pub fn translations_only() -> Self {
        Self::new(default_bounds(), [true, true, false, false, false, false])
            .expect("default bounds are valid")
    }

    /// Translations and rotation (d = 3).
    pub fn translations_rotation() -> Self {
        Self::new(default_bounds(), [true, true, true, false, false, false])
            .expect("default bounds are valid")
    }

    /// All six parameters (d = 6).
    pub fn full_affine() -> Self {
        Self::new(default_bounds(), [true; 6]).expect("default bounds are valid")
    }

    /// Number of free parameters.
    pub fn dims(&self) -> usize {
        self.free.iter().filter(|f| **f).count()
    }

    pub fn free_mask(&self) -> &[bool; 6] {
        &self.free
    }

    pub fn bounds(&self) -> &[[f64; 2]; 6] {
        &self.bounds
    }

    /// Indices (into the canonical parameter order) of the free parameters.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..6).filter(|&i| self.free[i]).collect()
    }

    /// Maps a parameter vector into `[-1, 1]^d`. Frozen parameters are
    /// dropped (they are expected to sit at identity).
    pub fn normalize(&self, t: &TransformParams) -> NormalizedPoint {
        let arr = t.to_array();
        let vals = self
            .free_indices()
            .into_iter()
            .map(|i| {
                let [lo, hi] = self.bounds[i];
                2.0 * (arr[i] - lo) / (hi - lo) - 1.0
            })
            .collect();
        NormalizedPoint(vals)
    }

    /// Maps a normalized point back to a parameter vector, frozen
    /// parameters restored to identity.
    pub fn denormalize(&self, x: &NormalizedPoint) -> TransformParams {
        assert_eq!(x.dims(), self.dims(), "point dimension mismatch");
        let mut arr = IDENTITY_PARAMS;
        for (value, i) in x.values().iter().zip(self.free_indices()) {
            let [lo, hi] = self.bounds[i];
            arr[i] = lo + (value + 1.0) * (hi - lo) / 2.0;
        }
        TransformParams::from_array(arr)
    }

    /// Membership oracle for the normalized box.
    pub fn contains(&self, x: &NormalizedPoint) -> bool {
        x.dims() == self.dims() && x.values().iter().all(|v| (-1.0..=1.0).contains(v))
    }

    /// Uniform sample from the normalized box.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> NormalizedPoint {
        let vals = (0..self.dims()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        NormalizedPoint(vals)
    }
}
