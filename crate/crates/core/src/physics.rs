//! Physical guidance objectives and the geometric contact-mask predictor.
//!
//! `L_ho` pulls masked human and object vertices onto the other surface,
//! `L_of` pulls floor-masked object vertices onto `y = 0` and `L_pt`
//! penalizes human vertices inside the object.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::model::object::{ObjectPoseVar, ObjectTemplate, PosedSdf};
use crate::model::scene::{pose_scene_var, SceneModels};

pub const DEFAULT_CONTACT_THRESHOLD: f64 = 0.05;
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactMasks {
    pub m_h: Vec<f64>,
    pub m_o: Vec<f64>,
    pub m_f: Vec<f64>,
}

impl ContactMasks {
    pub fn empty(human: usize, object: usize) -> Self {
        Self {
            m_h: vec![0.0; human],
            m_o: vec![0.0; object],
            m_f: vec![0.0; object],
        }
    }

    pub fn sizes(&self) -> MaskSizes {
        let count = |m: &[f64]| m.iter().filter(|&&v| v > 0.0).count();
        MaskSizes {
            human: count(&self.m_h),
            object: count(&self.m_o),
            floor: count(&self.m_f),
        }
    }

    fn check(&self, human: usize, object: usize) -> Result<()> {
        if self.m_h.len() != human || self.m_o.len() != object || self.m_f.len() != object {
            return Err(Error::invalid(
                "contact masks",
                format!(
                    "mask lengths ({}, {}, {}) do not match meshes ({human}, {object})",
                    self.m_h.len(),
                    self.m_o.len(),
                    self.m_f.len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSizes {
    pub human: usize,
    pub object: usize,
    pub floor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceWeights {
    pub lambda_ho: f64,
    pub lambda_of: f64,
    pub lambda_pt: f64,
    pub rho: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self {
            lambda_ho: 1.0,
            lambda_of: 1.0,
            lambda_pt: 1.0,
            rho: 10.0,
        }
    }
}

impl GuidanceWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ho, self.lambda_of, self.lambda_pt, self.rho];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("guidance weights", format!("must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.rho == 0.0 || (self.lambda_ho == 0.0 && self.lambda_of == 0.0 && self.lambda_pt == 0.0)
    }
}

/// Nearest-neighbor reduction used by `L_ho`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MinMode {
    Hard,
    /// Squared distances averaged under `softmax(-d / temperature)`.
    Soft { temperature: f64 },
}

impl Default for MinMode {
    fn default() -> Self {
        MinMode::Soft {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

fn sqdist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest(p: [f64; 3], set: &[[f64; 3]]) -> f64 {
    set.iter().map(|&q| sqdist(p, q)).fold(f64::INFINITY, f64::min).sqrt()
}

/// Geometric contact masks for the current estimate.
pub fn predict_contact_masks(
    human: &[[f64; 3]],
    object: &[[f64; 3]],
    sdf: &PosedSdf<'_>,
    threshold: f64,
) -> Result<ContactMasks> {
    if human.is_empty() || object.is_empty() {
        return Err(Error::invalid("predict_contact_masks", "empty mesh"));
    }
    let indicator = |b: bool| if b { 1.0 } else { 0.0 };
    let m_h = human.iter().map(|&v| indicator(sdf.eval(v).abs() <= threshold)).collect();
    let m_o = object
        .iter()
        .map(|&v| indicator(nearest(v, human) <= threshold))
        .collect();
    let min_y = object.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
    let m_f = object
        .iter()
        .map(|v| indicator(v[1] <= threshold && v[1] <= min_y + threshold))
        .collect();
    Ok(ContactMasks { m_h, m_o, m_f })
}

fn masked_indices(m: &[f64]) -> Vec<usize> {
    (0..m.len()).filter(|&i| m[i] > 0.0).collect()
}

/// `Σ m_i · d_i²` where `d_i` is the distance from masked row `i` of `from`
/// to the point set `to`.
fn directed_term<'t>(from: Var<'t>, to: Var<'t>, mask: &[f64], mode: MinMode) -> Result<Option<Var<'t>>> {
    let idx = masked_indices(mask);
    if idx.is_empty() {
        return Ok(None);
    }
    let tape = from.tape();
    let d2 = from.gather(&idx)?.pairwise_sqdist(to)?;
    let nearest = match mode {
        MinMode::Hard => d2.min_last()?,
        MinMode::Soft { temperature } => {
            let d = d2.sqrt()?;
            let w = d.scale(-1.0 / temperature)?.softmax()?;
            w.mul(d2)?.sum_axis(1)?
        }
    };
    let weights = tape.constant(Tensor::vector(idx.iter().map(|&i| mask[i]).collect()));
    Ok(Some(nearest.mul(weights)?.sum()?))
}

/// Human–object contact loss.
pub fn loss_ho<'t>(human: Var<'t>, object: Var<'t>, masks: &ContactMasks, mode: MinMode) -> Result<Var<'t>> {
    let tape = human.tape();
    masks.check(human.shape()[0], object.shape()[0])?;
    let a = directed_term(human, object, &masks.m_h, mode)?;
    let b = directed_term(object, human, &masks.m_o, mode)?;
    match (a, b) {
        (None, None) => Ok(tape.scalar(0.0)),
        (Some(s), None) | (None, Some(s)) => s.sqrt(),
        (Some(a), Some(b)) => a.add(b)?.sqrt(),
    }
}

/// Object–floor contact loss.
pub fn loss_of<'t>(object: Var<'t>, masks: &ContactMasks) -> Result<Var<'t>> {
    let tape = object.tape();
    let idx = masked_indices(&masks.m_f);
    if idx.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let heights = object.gather(&idx)?.narrow(1, 1, 1)?.reshape(&[idx.len()])?.abs()?;
    let w = tape.constant(Tensor::vector(idx.iter().map(|&i| masks.m_f[i]).collect()));
    heights.mul(w)?.sum()
}

/// Mean penetration depth of human vertices inside the object.
pub fn loss_pt<'t>(human: Var<'t>, pose: &ObjectPoseVar<'t>, object: &ObjectTemplate) -> Result<Var<'t>> {
    pose.sdf(object, human)?.neg()?.relu()?.mean()
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub ho: f64,
    pub of: f64,
    pub pt: f64,
}

/// Weighted physical objective of a parameter vector living on a tape.
/// Terms with zero weight are evaluated for reporting but kept off the
/// gradient path.
pub fn loss_total<'t>(
    x_hat0: Var<'t>,
    masks: &ContactMasks,
    weights: &GuidanceWeights,
    models: SceneModels<'_>,
    mode: MinMode,
) -> Result<LossTerms<'t>> {
    let tape = x_hat0.tape();
    let scene = pose_scene_var(x_hat0, models)?;
    let ho = loss_ho(scene.human, scene.object, masks, mode)?;
    let of = loss_of(scene.object, masks)?;
    let pt = loss_pt(scene.human, &scene.pose, models.object)?;
    let mut total = tape.scalar(0.0);
    for (lambda, term) in [(weights.lambda_ho, ho), (weights.lambda_of, of), (weights.lambda_pt, pt)] {
        if lambda != 0.0 {
            total = total.add(term.scale(lambda)?)?;
        }
    }
    Ok(LossTerms {
        total,
        ho: ho.item()?,
        of: of.item()?,
        pt: pt.item()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::rotation::IDENTITY_6D;
    use crate::model::sdf::SdfShape;

    fn pts<'t>(tape: &'t Tape, p: &[[f64; 3]]) -> Var<'t> {
        tape.constant(Tensor::from_rows(p))
    }

    #[test]
    fn zero_masks_give_zero_losses() {
        let tape = Tape::new();
        let h = pts(&tape, &[[0.0; 3], [1.0, 0.0, 0.0]]);
        let o = pts(&tape, &[[0.0, 0.5, 0.0]]);
        let m = ContactMasks::empty(2, 1);
        assert_eq!(loss_ho(h, o, &m, MinMode::Hard).unwrap().item().unwrap(), 0.0);
        assert_eq!(loss_of(o, &m).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn single_masked_vertex_hard_min() {
        let tape = Tape::new();
        let h = pts(&tape, &[[0.0; 3], [5.0, 0.0, 0.0]]);
        let o = pts(&tape, &[[0.1, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let mut m = ContactMasks::empty(2, 2);
        m.m_h[0] = 1.0;
        let l = loss_ho(h, o, &m, MinMode::Hard).unwrap().item().unwrap();
        assert!((l - 0.1).abs() < 1e-15);
    }

    #[test]
    fn hovering_vertices_sum_heights() {
        let tape = Tape::new();
        let o = pts(&tape, &[[0.0, 0.05, 0.0], [1.0, 0.05, 0.0], [0.0, 0.05, 1.0], [1.0, 0.05, 1.0]]);
        let mut m = ContactMasks::empty(0, 4);
        m.m_f = vec![1.0; 4];
        let l = loss_of(o, &m).unwrap().item().unwrap();
        assert!((l - 0.2).abs() < 1e-15);
    }

    #[test]
    fn single_penetrating_vertex_in_unit_box() {
        let tmpl = ObjectTemplate::primitive("b", SdfShape::Box { half: [0.5; 3] }).unwrap();
        let mut v = vec![[2.0, 0.0, 0.0]; 100];
        v[0] = [0.4, 0.0, 0.0];
        let tape = Tape::new();
        let pose = ObjectPoseVar::from_params(
            tape.constant(Tensor::vector(IDENTITY_6D.to_vec())),
            tape.constant(Tensor::vector(vec![0.0; 3])),
        )
        .unwrap();
        let l = loss_pt(pts(&tape, &v), &pose, &tmpl).unwrap().item().unwrap();
        assert!((l - 0.001).abs() < 1e-15);
    }

    #[test]
    fn soft_min_approaches_hard_min() {
        let h = [[0.0, 0.0, 0.0], [0.3, 0.2, 0.1]];
        let o = [[0.1, 0.0, 0.0], [0.12, 0.05, 0.0], [0.5, 0.5, 0.5]];
        let mut m = ContactMasks::empty(2, 3);
        m.m_h = vec![1.0, 1.0];
        m.m_o[2] = 1.0;
        let eval = |mode| {
            let tape = Tape::inference();
            loss_ho(pts(&tape, &h), pts(&tape, &o), &m, mode).unwrap().item().unwrap()
        };
        let hard = eval(MinMode::Hard);
        let mut prev = f64::INFINITY;
        for t in [0.1, 0.03, 0.01, 0.001, 0.0001] {
            let err = (eval(MinMode::Soft { temperature: t }) - hard).abs();
            assert!(err <= prev);
            prev = err;
        }
        assert!(prev < 1e-9);
    }
}
