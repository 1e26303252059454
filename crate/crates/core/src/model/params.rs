//! The flat optimization state `x = {θ, β, R_o, t_o}`.
//!
//! Layout: `K` per-joint 6D rotations, then 10 normalized shape
//! coefficients, then the object 6D rotation, then the object translation
//! in meters. Total length `6K + 19`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::rotation::IDENTITY_6D;
use crate::error::{Error, Result};

pub const BETA_DIM: usize = 10;

/// Raw shape coefficients are clamped to `±BETA_RAW_BOUND` and mapped
/// affinely onto `[-1, 1]`.
pub const BETA_RAW_BOUND: f64 = 3.0;

pub fn normalize_beta(raw: f64) -> f64 {
    raw.clamp(-BETA_RAW_BOUND, BETA_RAW_BOUND) / BETA_RAW_BOUND
}

pub fn denormalize_beta(normalized: f64) -> f64 {
    normalized * BETA_RAW_BOUND
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub joints: usize,
}

impl ParamLayout {
    pub const fn new(joints: usize) -> Self {
        Self { joints }
    }

    pub const fn dim(&self) -> usize {
        6 * self.joints + BETA_DIM + 6 + 3
    }

    pub fn theta(&self) -> Range<usize> {
        0..6 * self.joints
    }

    pub fn joint(&self, j: usize) -> Range<usize> {
        6 * j..6 * j + 6
    }

    pub fn beta(&self) -> Range<usize> {
        let s = 6 * self.joints;
        s..s + BETA_DIM
    }

    pub fn rot_o(&self) -> Range<usize> {
        let s = 6 * self.joints + BETA_DIM;
        s..s + 6
    }

    pub fn trans_o(&self) -> Range<usize> {
        let s = 6 * self.joints + BETA_DIM + 6;
        s..s + 3
    }
}

/// Structured view of the optimization state.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub theta: Vec<[f64; 6]>,
    pub beta: [f64; BETA_DIM],
    pub rot_o: [f64; 6],
    pub trans_o: [f64; 3],
}

impl SceneParams {
    /// Identity pose, mean shape, identity object rotation at the origin.
    pub fn rest(joints: usize) -> Self {
        Self {
            theta: vec![IDENTITY_6D; joints],
            beta: [0.0; BETA_DIM],
            rot_o: IDENTITY_6D,
            trans_o: [0.0; 3],
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.theta.len())
    }

    pub fn flatten(&self) -> ParamVector {
        let mut data = Vec::with_capacity(self.layout().dim());
        for j in &self.theta {
            data.extend_from_slice(j);
        }
        data.extend_from_slice(&self.beta);
        data.extend_from_slice(&self.rot_o);
        data.extend_from_slice(&self.trans_o);
        ParamVector {
            layout: self.layout(),
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layout: ParamLayout,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.dim() {
            return Err(Error::invalid(
                "ParamVector",
                format!(
                    "length {} does not match {} joints (expected {})",
                    data.len(),
                    layout.joints,
                    layout.dim()
                ),
            ));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn beta(&self) -> &[f64] {
        &self.data[self.layout.beta()]
    }

    pub fn rot_o(&self) -> &[f64] {
        &self.data[self.layout.rot_o()]
    }

    pub fn trans_o(&self) -> &[f64] {
        &self.data[self.layout.trans_o()]
    }

    pub fn unflatten(&self) -> SceneParams {
        let l = self.layout;
        let theta = (0..l.joints)
            .map(|j| self.data[l.joint(j)].try_into().expect("6 entries"))
            .collect();
        SceneParams {
            theta,
            beta: self.data[l.beta()].try_into().expect("10 entries"),
            rot_o: self.data[l.rot_o()].try_into().expect("6 entries"),
            trans_o: self.data[l.trans_o()].try_into().expect("3 entries"),
        }
    }

    /// Clamps the normalized shape block into `[-1, 1]`.
    pub fn clamp_beta(&mut self) {
        let r = self.layout.beta();
        for v in &mut self.data[r] {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimensions() {
        assert_eq!(ParamLayout::new(52).dim(), 331);
        assert_eq!(ParamLayout::new(16).dim(), 115);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(ParamVector::new(ParamLayout::new(16), vec![0.0; 114]).is_err());
    }

    #[test]
    fn beta_normalization_bounds() {
        assert_eq!(normalize_beta(4.5), 1.0);
        assert_eq!(normalize_beta(-3.0), -1.0);
        assert_eq!(normalize_beta(1.5), 0.5);
        assert_eq!(denormalize_beta(normalize_beta(-2.4)), -2.4);
    }

    #[test]
    fn slices_follow_the_layout() {
        let mut p = SceneParams::rest(16);
        p.beta[3] = 0.25;
        p.rot_o = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        p.trans_o = [0.1, 0.2, 0.3];
        let v = p.flatten();
        assert_eq!(v.beta()[3], 0.25);
        assert_eq!(v.rot_o(), &p.rot_o);
        assert_eq!(v.trans_o(), &p.trans_o);
    }
}
