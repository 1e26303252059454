//! Evaluation: Procrustes alignment, chamfer distance, contact P/R/F.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::object::PosedSdf;
use crate::model::{pose_scene, ParamVector, SceneModels};
use crate::physics::DEFAULT_CONTACT_THRESHOLD;

/// `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: crate::model::rotation::identity(),
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| {
            self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + self.translation[i]
        })
    }

    pub fn apply_all(&self, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        pts.iter().map(|&p| self.apply(p)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// Rotation, translation and uniform scale.
    #[default]
    Similarity,
    Rigid,
}

/// Least-squares transform mapping `source` onto `target` with known
/// one-to-one correspondence. The rotation is always proper.
pub fn procrustes_align(source: &[[f64; 3]], target: &[[f64; 3]], mode: AlignMode) -> Result<Similarity> {
    if source.len() != target.len() || source.is_empty() {
        return Err(Error::invalid(
            "procrustes_align",
            format!("need equal nonempty point sets, got {} and {}", source.len(), target.len()),
        ));
    }
    let n = source.len() as f64;
    let v = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let mu_s = source.iter().map(v).sum::<Vector3<f64>>() / n;
    let mu_t = target.iter().map(v).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = v(s) - mu_s;
        cov += (v(t) - mu_t) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if !(var_s > 1e-20) {
        return Err(Error::invalid("procrustes_align", "source points are all coincident"));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let d = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    let sign = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rot = u * sign * vt;
    let scale = match mode {
        AlignMode::Similarity => {
            let s = svd.singular_values;
            (s[0] + s[1] + d * s[2]) / var_s
        }
        AlignMode::Rigid => 1.0,
    };
    let t = mu_t - scale * rot * mu_s;
    Ok(Similarity {
        scale,
        rotation: std::array::from_fn(|i| std::array::from_fn(|j| rot[(i, j)])),
        translation: [t[0], t[1], t[2]],
    })
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn mean_nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    from.iter()
        .map(|&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric chamfer distance in centimetres (inputs in metres).
pub fn chamfer_cm(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer_cm", "empty point set"));
    }
    Ok(100.0 * 0.5 * (mean_nearest(a, b) + mean_nearest(b, a)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// Precision, recall and F-score of a predicted vertex mask. Empty
/// denominators score 1 when both masks are empty and 0 otherwise.
pub fn contact_prf(pred: &[bool], gt: &[bool]) -> Result<Prf> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "contact_prf",
            format!("mask lengths differ: {} vs {}", pred.len(), gt.len()),
        ));
    }
    let tp = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count() as f64;
    let n_pred = pred.iter().filter(|p| **p).count() as f64;
    let n_gt = gt.iter().filter(|g| **g).count() as f64;
    let both_empty = n_pred == 0.0 && n_gt == 0.0;
    let ratio = |den: f64| {
        if den > 0.0 {
            tp / den
        } else if both_empty {
            1.0
        } else {
            0.0
        }
    };
    let (p, r) = (ratio(n_pred), ratio(n_gt));
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Ok(Prf {
        precision: p,
        recall: r,
        f_score: f,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cd_human: f64,
    pub cd_object: f64,
    pub contact_p: f64,
    pub contact_r: f64,
    pub contact_f: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub align: AlignMode,
    pub contact_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            align: AlignMode::Similarity,
            contact_threshold: DEFAULT_CONTACT_THRESHOLD,
        }
    }
}

/// Human vertices whose signed distance to the object is at most
/// `threshold` (penetrating vertices count as contact).
pub fn contact_mask(human: &[[f64; 3]], sdf: &PosedSdf<'_>, threshold: f64) -> Vec<bool> {
    human.iter().map(|&v| sdf.eval(v) <= threshold).collect()
}

/// Full metric protocol for one predicted scene against ground truth.
pub fn evaluate_scene(pred: &ParamVector, gt: &ParamVector, models: SceneModels<'_>, opts: &EvalOptions) -> Result<EvalReport> {
    let p = pose_scene(pred, models)?;
    let g = pose_scene(gt, models)?;
    let mut src = p.human.clone();
    src.extend_from_slice(&p.object);
    let mut tgt = g.human.clone();
    tgt.extend_from_slice(&g.object);
    let sim = procrustes_align(&src, &tgt, opts.align)?;
    let cd_human = chamfer_cm(&sim.apply_all(&p.human), &g.human)?;
    let cd_object = chamfer_cm(&sim.apply_all(&p.object), &g.object)?;

    // Distances scale with the alignment, so the aligned mask equals the
    // raw mask at a rescaled threshold.
    let pred_sdf = PosedSdf::new(models.object, pred.rot_o(), pred.trans_o())?;
    let gt_sdf = PosedSdf::new(models.object, gt.rot_o(), gt.trans_o())?;
    let pred_mask: Vec<bool> = p
        .human
        .iter()
        .map(|&v| sim.scale * pred_sdf.eval(v) <= opts.contact_threshold)
        .collect();
    let gt_mask = contact_mask(&g.human, &gt_sdf, opts.contact_threshold);
    let prf = contact_prf(&pred_mask, &gt_mask)?;
    Ok(EvalReport {
        cd_human,
        cd_object,
        contact_p: prf.precision,
        contact_r: prf.recall,
        contact_f: prf.f_score,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub count: usize,
    pub mean: EvalReport,
    pub median: EvalReport,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn reduce(reports: &[EvalReport], f: impl Fn(&mut [f64]) -> f64) -> EvalReport {
    let col = |g: fn(&EvalReport) -> f64| f(&mut reports.iter().map(g).collect::<Vec<_>>());
    EvalReport {
        cd_human: col(|r| r.cd_human),
        cd_object: col(|r| r.cd_object),
        contact_p: col(|r| r.contact_p),
        contact_r: col(|r| r.contact_r),
        contact_f: col(|r| r.contact_f),
    }
}

pub fn aggregate(reports: &[EvalReport]) -> AggregateReport {
    AggregateReport {
        count: reports.len(),
        mean: reduce(reports, |v| v.iter().sum::<f64>() / v.len() as f64),
        median: reduce(reports, |v| median(v)),
    }
}

/// One JSON object per scene, then one aggregate line.
pub fn format_report(scenes: &[SceneReport]) -> Result<String> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    let reports: Vec<EvalReport> = scenes.iter().map(|s| s.report).collect();
    out.push_str(&serde_json::to_string(&serde_json::json!({ "aggregate": aggregate(&reports) }))?);
    out.push('\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_chamfer() {
        assert!((chamfer_cm(&[[0.0; 3]], &[[0.1, 0.0, 0.0]]).unwrap() - 10.0).abs() < 1e-12);
        assert!(chamfer_cm(&[], &[[0.0; 3]]).is_err());
    }

    #[test]
    fn prf_examples() {
        let gt = [true, true, false, false];
        let all = contact_prf(&[true; 4], &gt).unwrap();
        assert_eq!((all.precision, all.recall), (0.5, 1.0));
        assert!((all.f_score - 2.0 / 3.0).abs() < 1e-15);
        let same = contact_prf(&gt, &gt).unwrap();
        assert_eq!((same.precision, same.recall, same.f_score), (1.0, 1.0, 1.0));
        let empty = contact_prf(&[false; 3], &[false; 3]).unwrap();
        assert_eq!(empty.f_score, 1.0);
        let miss = contact_prf(&[false, false], &[true, false]).unwrap();
        assert_eq!((miss.precision, miss.recall, miss.f_score), (0.0, 0.0, 0.0));
        assert!(contact_prf(&[true], &[true, false]).is_err());
    }

    #[test]
    fn identity_alignment() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let s = procrustes_align(&pts, &pts, AlignMode::Similarity).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        for p in pts {
            assert!(dist(s.apply(p), p) < 1e-12);
        }
        assert!(procrustes_align(&[[1.0; 3]; 3], &pts[..3], AlignMode::Rigid).is_err());
    }
}
