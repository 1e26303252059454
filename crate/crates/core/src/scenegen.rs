//! Synthetic interaction scenes, datasets and mesh export.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::Conditions;
use crate::error::{Error, Result};
use crate::model::body::{
    rest_bone_direction, JOINT_COUNT, L_ELBOW, L_HIP, L_KNEE, L_SHOULDER, L_WRIST, PARENTS, R_ELBOW, R_HIP, R_KNEE,
    R_SHOULDER, R_WRIST,
};
use crate::model::mesh::write_obj_groups;
use crate::model::rotation::{
    axis_angle_to_matrix, cross, dot, identity, mat_mul, matrix_to_rot6d, rot6d_to_matrix, transpose, Mat3,
};
use crate::model::{lbs_forward, object_forward, BodyModel, Mesh, ObjectTemplate, ParamVector, PosedSdf, SceneParams, TemplateRegistry};
use crate::physics::DEFAULT_CONTACT_THRESHOLD;

pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const MAX_RESAMPLES: usize = 10;
const PUSH_STEPS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    SitOnBox,
    CarryBox,
    LiftSphere,
    LeanOnCylinder,
    StandNear,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::SitOnBox,
        ScenarioKind::CarryBox,
        ScenarioKind::LiftSphere,
        ScenarioKind::LeanOnCylinder,
        ScenarioKind::StandNear,
    ];

    pub fn template_id(self) -> &'static str {
        match self {
            ScenarioKind::SitOnBox => "seat_box",
            ScenarioKind::CarryBox => "carry_box",
            ScenarioKind::LiftSphere => "ball",
            ScenarioKind::LeanOnCylinder => "pillar",
            ScenarioKind::StandNear => "crate",
        }
    }

    pub fn has_contact(self) -> bool {
        self != ScenarioKind::StandNear
    }

    pub fn floor_supported(self) -> bool {
        matches!(self, ScenarioKind::SitOnBox | ScenarioKind::LeanOnCylinder | ScenarioKind::StandNear)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::SitOnBox => "sit-on-box",
            ScenarioKind::CarryBox => "carry-box",
            ScenarioKind::LiftSphere => "lift-sphere",
            ScenarioKind::LeanOnCylinder => "lean-on-cylinder",
            ScenarioKind::StandNear => "stand-near",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("scenario", format!("unknown scenario kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Per-axis std of the rotation-vector jitter on every joint (radians).
    pub pose_jitter: f64,
    /// Per-axis std of the object placement before snapping (metres).
    pub placement_jitter: f64,
    /// Std of the object yaw (degrees).
    pub yaw_jitter_deg: f64,
    /// Std of each normalized shape coefficient.
    pub beta_sigma: f64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        Self {
            kind,
            pose_jitter: 0.08,
            placement_jitter: 0.03,
            yaw_jitter_deg: 10.0,
            beta_sigma: 0.3,
        }
    }

    pub fn all_default() -> Vec<Self> {
        ScenarioKind::ALL.into_iter().map(Self::new).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pose_jitter", self.pose_jitter),
            ("placement_jitter", self.placement_jitter),
            ("yaw_jitter_deg", self.yaw_jitter_deg),
            ("beta_sigma", self.beta_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("scenario spec", format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the coarse initial estimate departs from ground truth. Rotation and
/// translation noise are isotropic Gaussians whose RMS magnitude is the
/// stated value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationModel {
    /// Rotation noise on every joint (radians).
    pub joint_sigma: f64,
    /// Per-coefficient std of the normalized shape noise.
    pub beta_sigma: f64,
    /// Object rotation noise (degrees).
    pub object_rot_deg: f64,
    /// Object translation noise (metres).
    pub object_trans: f64,
}

impl Default for PerturbationModel {
    fn default() -> Self {
        Self {
            joint_sigma: 0.15,
            beta_sigma: 0.1,
            object_rot_deg: 10.0,
            object_trans: 0.10,
        }
    }
}

impl PerturbationModel {
    pub fn none() -> Self {
        Self {
            joint_sigma: 0.0,
            beta_sigma: 0.0,
            object_rot_deg: 0.0,
            object_trans: 0.0,
        }
    }

    /// Every component multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            joint_sigma: self.joint_sigma * k,
            beta_sigma: self.beta_sigma * k,
            object_rot_deg: self.object_rot_deg * k,
            object_trans: self.object_trans * k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub perturbation: PerturbationModel,
    /// Std of the Gaussian noise on observed joints and object centre.
    pub observation_sigma: f64,
    pub contact_threshold: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            perturbation: PerturbationModel::default(),
            observation_sigma: 0.03,
            contact_threshold: DEFAULT_CONTACT_THRESHOLD,
        }
    }
}

impl GeneratorConfig {
    pub fn noiseless() -> Self {
        Self {
            perturbation: PerturbationModel::none(),
            observation_sigma: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub kind: ScenarioKind,
    pub template_id: String,
    pub seed: u64,
    pub gt: ParamVector,
    pub init: ParamVector,
    /// Observed joints (3 per joint), observed object centre, noise std.
    pub observation: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    format_version: u32,
    kind: ScenarioKind,
    template_id: String,
    seed: u64,
    joints: usize,
    gt: Vec<f64>,
    init: Vec<f64>,
    observation: Vec<f64>,
}

impl Scene {
    pub fn conditions(&self, tmpl: &ObjectTemplate) -> Conditions {
        Conditions {
            observation: self.observation.clone(),
            points: tmpl.coarse_points.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SceneFile {
            format_version: SCENE_FORMAT_VERSION,
            kind: self.kind,
            template_id: self.template_id.clone(),
            seed: self.seed,
            joints: self.gt.layout().joints,
            gt: self.gt.as_slice().to_vec(),
            init: self.init.as_slice().to_vec(),
            observation: self.observation.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let parse = |msg: String| Error::Parse {
            path: source.to_string(),
            msg,
        };
        let f: SceneFile = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
        if f.format_version != SCENE_FORMAT_VERSION {
            return Err(parse(format!("unsupported scene format version {}", f.format_version)));
        }
        let layout = crate::model::ParamLayout::new(f.joints);
        let gt = ParamVector::new(layout, f.gt).map_err(|e| parse(e.to_string()))?;
        let init = ParamVector::new(layout, f.init).map_err(|e| parse(e.to_string()))?;
        if f.observation.len() != 3 * f.joints + 4 {
            return Err(parse(format!("observation has {} values, expected {}", f.observation.len(), 3 * f.joints + 4)));
        }
        Ok(Self {
            kind: f.kind,
            template_id: f.template_id,
            seed: f.seed,
            gt,
            init,
            observation: f.observation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Smallest rotation taking unit `a` to unit `b`.
fn align(a: [f64; 3], b: [f64; 3]) -> Mat3 {
    let c = dot(a, b).clamp(-1.0, 1.0);
    let axis = cross(a, b);
    let s = dot(axis, axis).sqrt();
    if s < 1e-12 {
        if c > 0.0 {
            return identity();
        }
        let helper = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let k = normalize(cross(a, helper));
        return axis_angle_to_matrix([k[0] * std::f64::consts::PI, k[1] * std::f64::consts::PI, k[2] * std::f64::consts::PI]);
    }
    let angle = s.atan2(c);
    axis_angle_to_matrix([axis[0] / s * angle, axis[1] / s * angle, axis[2] / s * angle])
}

/// Local joint rotations whose capsules point along the requested world
/// directions; joints without a target keep their parent's orientation.
pub fn pose_from_directions(targets: &[Option<[f64; 3]>; JOINT_COUNT]) -> [Mat3; JOINT_COUNT] {
    let mut global = [identity(); JOINT_COUNT];
    let mut local = [identity(); JOINT_COUNT];
    for j in 0..JOINT_COUNT {
        let parent = PARENTS[j].map(|p| global[p]).unwrap_or_else(identity);
        global[j] = match targets[j] {
            Some(d) => align(rest_bone_direction(j), normalize(d)),
            None => parent,
        };
        local[j] = mat_mul(&transpose(&parent), &global[j]);
    }
    local
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> [f64; 3] {
    if sigma == 0.0 {
        return [0.0; 3];
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    [n.sample(rng), n.sample(rng), n.sample(rng)]
}

fn yaw(deg: f64) -> Mat3 {
    axis_angle_to_matrix([0.0, deg.to_radians(), 0.0])
}

fn base_directions(kind: ScenarioKind, rng: &mut ChaCha8Rng) -> [Option<[f64; 3]>; JOINT_COUNT] {
    let mut d = [None; JOINT_COUNT];
    let arms_down = |d: &mut [Option<[f64; 3]>; JOINT_COUNT]| {
        for (s, sh, el) in [(1.0, L_SHOULDER, L_ELBOW), (-1.0, R_SHOULDER, R_ELBOW)] {
            d[sh] = Some([0.15 * s, -1.0, 0.0]);
            d[el] = Some([0.1 * s, -1.0, 0.05]);
        }
    };
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..=hi);
    match kind {
        ScenarioKind::CarryBox => {
            for (s, sh, el) in [(1.0, L_SHOULDER, L_ELBOW), (-1.0, R_SHOULDER, R_ELBOW)] {
                d[sh] = Some([0.05 * s, -1.0, u(0.1, 0.25)]);
                d[el] = Some([0.0, u(-0.05, 0.1), 1.0]);
            }
        }
        ScenarioKind::LiftSphere => {
            for (s, sh, el) in [(1.0, L_SHOULDER, L_ELBOW), (-1.0, R_SHOULDER, R_ELBOW)] {
                d[sh] = Some([0.1 * s, -1.0, u(0.45, 0.6)]);
                d[el] = Some([-0.3 * s, -0.5, 1.0]);
            }
        }
        ScenarioKind::LeanOnCylinder => {
            let arm = [-1.0, u(-0.75, -0.6), u(0.2, 0.4)];
            d[R_SHOULDER] = Some(arm);
            d[R_ELBOW] = Some(arm);
            d[R_WRIST] = Some(arm);
            d[L_SHOULDER] = Some([0.15, -1.0, 0.0]);
            d[L_ELBOW] = Some([0.1, -1.0, 0.05]);
        }
        ScenarioKind::SitOnBox => {
            for (s, sh, el) in [(1.0, L_SHOULDER, L_ELBOW), (-1.0, R_SHOULDER, R_ELBOW)] {
                d[sh] = Some([0.05 * s, -1.0, 0.1]);
                d[el] = Some([0.0, 0.0, 1.0]);
            }
            for (hip, knee) in [(L_HIP, L_KNEE), (R_HIP, R_KNEE)] {
                d[hip] = Some([0.0, 0.0, 1.0]);
                d[knee] = Some([0.0, -1.0, 0.0]);
            }
        }
        ScenarioKind::StandNear => arms_down(&mut d),
    }
    d
}

fn pose_to_theta(local: &[Mat3; JOINT_COUNT]) -> Vec<[f64; 6]> {
    local.iter().map(matrix_to_rot6d).collect()
}

fn human_vertices(body: &BodyModel, theta: &[[f64; 6]], beta: &[f64]) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let flat: Vec<f64> = theta.iter().flatten().copied().collect();
    lbs_forward(body, &flat, beta)
}

fn min_sdf(human: &[[f64; 3]], tmpl: &ObjectTemplate, rot6d: &[f64; 6], trans: [f64; 3]) -> Result<f64> {
    let sdf = PosedSdf::new(tmpl, rot6d, &trans)?;
    Ok(human.iter().map(|&v| sdf.eval(v)).fold(f64::INFINITY, f64::min))
}

/// Moves the object from `start` along `dir` until the closest human
/// vertex sits at signed distance `target ± tol`.
fn snap_along(
    human: &[[f64; 3]],
    tmpl: &ObjectTemplate,
    rot6d: &[f64; 6],
    start: [f64; 3],
    dir: [f64; 3],
    target: f64,
    tol: f64,
) -> Result<Option<[f64; 3]>> {
    let at = |s: f64| [start[0] + s * dir[0], start[1] + s * dir[1], start[2] + s * dir[2]];
    let f = |s: f64| min_sdf(human, tmpl, rot6d, at(s)).map(|v| v - target);
    if f(0.0)? <= 0.0 {
        return Ok(None);
    }
    let step = 0.02;
    let mut lo = 0.0;
    let mut hi = None;
    for k in 1..=PUSH_STEPS {
        let s = k as f64 * step;
        if f(s)? <= 0.0 {
            hi = Some(s);
            break;
        }
        lo = s;
    }
    let Some(mut hi) = hi else { return Ok(None) };
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid)?;
        if v.abs() <= tol {
            return Ok(Some(at(mid)));
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(None)
}

struct Built {
    theta: Vec<[f64; 6]>,
    beta: [f64; crate::model::BETA_DIM],
    rot6d: [f64; 6],
    trans: [f64; 3],
    human: Vec<[f64; 3]>,
    joints: Vec<[f64; 3]>,
}

fn apply_jitter(local: &mut [Mat3; JOINT_COUNT], rng: &mut ChaCha8Rng, sigma: f64) {
    for r in local.iter_mut() {
        *r = mat_mul(r, &axis_angle_to_matrix(gaussian3(rng, sigma)));
    }
}

fn build_attempt(spec: &ScenarioSpec, body: &BodyModel, tmpl: &ObjectTemplate, rng: &mut ChaCha8Rng) -> Result<Option<Built>> {
    let mut beta = [0.0; crate::model::BETA_DIM];
    if spec.beta_sigma > 0.0 {
        let n = Normal::new(0.0, spec.beta_sigma).expect("finite sigma");
        for b in &mut beta {
            *b = n.sample(rng).clamp(-1.0, 1.0);
        }
    }
    let mut local = pose_from_directions(&base_directions(spec.kind, rng));
    apply_jitter(&mut local, rng, spec.pose_jitter);
    let yaw_n = Normal::new(0.0, spec.yaw_jitter_deg.max(1e-300)).expect("finite sigma");
    let jitter = gaussian3(rng, spec.placement_jitter);
    let min_y = tmpl.canonical_min_y();

    let (theta, rot, trans) = match spec.kind {
        ScenarioKind::SitOnBox => {
            let rot = yaw(yaw_n.sample(rng));
            let r6 = matrix_to_rot6d(&rot);
            let trans = [jitter[0], -min_y, 0.13 + jitter[2]];
            // Tilt both thighs about the x axis until they rest on the seat.
            let theta_at = |phi: f64| {
                let mut l = local;
                for hip in [L_HIP, R_HIP] {
                    l[hip] = mat_mul(&axis_angle_to_matrix([phi, 0.0, 0.0]), &local[hip]);
                }
                pose_to_theta(&l)
            };
            let f = |phi: f64| -> Result<f64> {
                let (h, _) = human_vertices(body, &theta_at(phi), &beta)?;
                Ok(min_sdf(&h, tmpl, &r6, trans)? - 0.005)
            };
            let (mut lo, mut hi) = (-0.6, 0.6);
            if f(lo)? <= 0.0 || f(hi)? > 0.0 {
                return Ok(None);
            }
            let mut phi = None;
            for _ in 0..PUSH_STEPS {
                let mid = 0.5 * (lo + hi);
                let v = f(mid)?;
                if v.abs() <= 0.003 {
                    phi = Some(mid);
                    break;
                }
                if v > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let Some(phi) = phi else { return Ok(None) };
            (theta_at(phi), r6, trans)
        }
        kind => {
            let theta = pose_to_theta(&local);
            let (human, joints) = human_vertices(body, &theta, &beta)?;
            let (rot, start, dir, target) = match kind {
                ScenarioKind::CarryBox => {
                    let fore = [
                        0.5 * (joints[L_ELBOW][0] + joints[R_ELBOW][0]),
                        0.5 * (joints[L_ELBOW][1] + joints[R_ELBOW][1]),
                        0.5 * (joints[L_WRIST][2] + joints[R_WRIST][2]),
                    ];
                    let start = [fore[0] + jitter[0], fore[1] + 0.5, fore[2] + 0.05 + jitter[2]];
                    (yaw(yaw_n.sample(rng)), start, [0.0, -1.0, 0.0], 0.005)
                }
                ScenarioKind::LiftSphere => {
                    let hands = [
                        0.5 * (joints[L_WRIST][0] + joints[R_WRIST][0]),
                        0.5 * (joints[L_WRIST][1] + joints[R_WRIST][1]),
                        0.5 * (joints[L_WRIST][2] + joints[R_WRIST][2]),
                    ];
                    let start = [hands[0] + jitter[0], hands[1] - 0.5, hands[2] + 0.08 + jitter[2]];
                    (yaw(yaw_n.sample(rng)), start, [0.0, 1.0, 0.0], 0.005)
                }
                ScenarioKind::LeanOnCylinder => {
                    let w = joints[R_WRIST];
                    let out = normalize([w[0] - joints[R_SHOULDER][0], 0.0, w[2] - joints[R_SHOULDER][2]]);
                    let start = [w[0] + 0.6 * out[0] + jitter[0], -min_y, w[2] + 0.6 * out[2] + jitter[2]];
                    (yaw(yaw_n.sample(rng)), start, [-out[0], 0.0, -out[2]], 0.005)
                }
                ScenarioKind::StandNear => {
                    let ang = rng.gen_range(-60f64..=60.0).to_radians();
                    let dir = [ang.sin(), 0.0, ang.cos()];
                    let gap = rng.gen_range(0.3..=0.6);
                    let start = [2.2 * dir[0], -min_y, 2.2 * dir[2]];
                    (yaw(rng.gen_range(0.0..90.0)), start, [-dir[0], 0.0, -dir[2]], gap)
                }
                ScenarioKind::SitOnBox => unreachable!(),
            };
            let r6 = matrix_to_rot6d(&rot);
            match snap_along(&human, tmpl, &r6, start, dir, target, 0.003)? {
                Some(t) => (theta, r6, t),
                None => return Ok(None),
            }
        }
    };
    let (human, joints) = human_vertices(body, &theta, &beta)?;
    Ok(Some(Built {
        theta,
        beta,
        rot6d: rot,
        trans,
        human,
        joints,
    }))
}

/// Generator self-checks on a ground-truth scene.
fn accept(kind: ScenarioKind, b: &Built, tmpl: &ObjectTemplate, threshold: f64) -> Result<bool> {
    let sdf = PosedSdf::new(tmpl, &b.rot6d, &b.trans)?;
    let phi: Vec<f64> = b.human.iter().map(|&v| sdf.eval(v)).collect();
    let penetration = phi.iter().map(|p| (-p).max(0.0)).sum::<f64>() / phi.len() as f64;
    if penetration >= 1e-4 {
        return Ok(false);
    }
    let contacts = phi.iter().filter(|&&p| p <= threshold).count();
    if kind.has_contact() && contacts < 5 {
        return Ok(false);
    }
    if !kind.has_contact() && contacts > 0 {
        return Ok(false);
    }
    let obj = object_forward(tmpl, &b.rot6d, &b.trans)?;
    let min_y = obj.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
    if min_y < -1e-9 || (kind.floor_supported() && min_y.abs() > 1e-6) {
        return Ok(false);
    }
    Ok(true)
}

fn perturb(gt: &SceneParams, model: &PerturbationModel, rng: &mut ChaCha8Rng) -> Result<SceneParams> {
    let per_axis = 1.0 / 3f64.sqrt();
    let mut out = gt.clone();
    for r in &mut out.theta {
        let m = rot6d_to_matrix(r)?;
        let n = gaussian3(rng, model.joint_sigma * per_axis);
        *r = matrix_to_rot6d(&mat_mul(&m, &axis_angle_to_matrix(n)));
    }
    if model.beta_sigma > 0.0 {
        let n = Normal::new(0.0, model.beta_sigma).expect("finite sigma");
        for b in &mut out.beta {
            *b = (*b + n.sample(rng)).clamp(-1.0, 1.0);
        }
    }
    let ro = rot6d_to_matrix(&out.rot_o)?;
    let dr = axis_angle_to_matrix(gaussian3(rng, model.object_rot_deg.to_radians() * per_axis));
    out.rot_o = matrix_to_rot6d(&mat_mul(&dr, &ro));
    let dt = gaussian3(rng, model.object_trans * per_axis);
    for i in 0..3 {
        out.trans_o[i] += dt[i];
    }
    Ok(out)
}

fn observe(joints: &[[f64; 3]], center: [f64; 3], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut obs = Vec::with_capacity(3 * joints.len() + 4);
    for p in joints.iter().chain(std::iter::once(&center)) {
        let n = gaussian3(rng, sigma);
        obs.extend((0..3).map(|i| p[i] + n[i]));
    }
    obs.push(sigma);
    obs
}

/// Draws one scene; failed placements retry on fresh random streams.
pub fn sample_scene(
    spec: &ScenarioSpec,
    gen: &GeneratorConfig,
    seed: u64,
    body: &BodyModel,
    registry: &TemplateRegistry,
) -> Result<Scene> {
    spec.validate()?;
    let tmpl = registry.get(spec.kind.template_id())?;
    for attempt in 0..MAX_RESAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let Some(b) = build_attempt(spec, body, &tmpl, &mut rng)? else { continue };
        if !accept(spec.kind, &b, &tmpl, gen.contact_threshold)? {
            continue;
        }
        let gt = SceneParams {
            theta: b.theta.clone(),
            beta: b.beta,
            rot_o: b.rot6d,
            trans_o: b.trans,
        };
        let observation = observe(&b.joints, b.trans, gen.observation_sigma, &mut rng);
        let init = perturb(&gt, &gen.perturbation, &mut rng)?;
        return Ok(Scene {
            kind: spec.kind,
            template_id: tmpl.id.clone(),
            seed,
            gt: gt.flatten(),
            init: init.flatten(),
            observation,
        });
    }
    Err(Error::SceneGeneration {
        kind: spec.kind.to_string(),
        attempts: MAX_RESAMPLES,
    })
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const SPLIT_STRIDE: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub specs: Vec<ScenarioSpec>,
    /// Scene counts for train, val and test.
    pub counts: [usize; 3],
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            specs: ScenarioSpec::all_default(),
            counts: [1000, 100, 100],
            seed: 0,
            generator: GeneratorConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.specs.is_empty() {
            return Err(Error::invalid("dataset", "need at least one scenario spec"));
        }
        for s in &self.specs {
            s.validate()?;
        }
        if self.counts.iter().any(|&c| c == 0 || c as u64 >= SPLIT_STRIDE) {
            return Err(Error::invalid("dataset", format!("split counts must be in 1..2^30, got {:?}", self.counts)));
        }
        if self.seed >= 1 << 32 {
            return Err(Error::invalid("dataset", "seed must fit in 32 bits"));
        }
        Ok(())
    }

    /// First scene seed of each split; ranges never overlap.
    pub fn split_seed_start(&self, split: usize) -> u64 {
        (self.seed << 32) + split as u64 * SPLIT_STRIDE
    }
}

/// One scene to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedScene {
    pub split: usize,
    pub index: usize,
    pub spec: ScenarioSpec,
    pub seed: u64,
}

impl PlannedScene {
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(SPLITS[self.split]).join(format!("scene_{:05}.json", self.index))
    }

    pub fn generate(&self, cfg: &DatasetConfig, body: &BodyModel, registry: &TemplateRegistry) -> Result<Scene> {
        sample_scene(&self.spec, &cfg.generator, self.seed, body, registry)
    }
}

pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Vec<PlannedScene>> {
    cfg.validate()?;
    let mut plan = Vec::new();
    for (split, &count) in cfg.counts.iter().enumerate() {
        let start = cfg.split_seed_start(split);
        for index in 0..count {
            plan.push(PlannedScene {
                split,
                index,
                spec: cfg.specs[index % cfg.specs.len()].clone(),
                seed: start + index as u64,
            });
        }
    }
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub name: String,
    pub count: usize,
    pub seed_start: u64,
    pub seed_end: u64,
    pub sha256: String,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub splits: Vec<SplitRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn split(&self, name: &str) -> Result<&SplitRecord> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::invalid("manifest", format!("no split named `{name}`")))
    }
}

/// Writes generated scenes and a manifest. `scenes` must follow the plan
/// order.
pub fn write_dataset(out_dir: &Path, cfg: &DatasetConfig, scenes: &[(PlannedScene, Scene)]) -> Result<Manifest> {
    let mut splits = Vec::new();
    for (split, name) in SPLITS.iter().enumerate() {
        let mut hasher = Sha256::new();
        let mut files = Vec::new();
        for (plan, scene) in scenes.iter().filter(|(p, _)| p.split == split) {
            let rel = plan.relative_path();
            let json = scene.to_json()?;
            write_file(&out_dir.join(&rel), json.as_bytes())?;
            hasher.update(json.as_bytes());
            files.push(rel.to_string_lossy().replace('\\', "/"));
        }
        let start = cfg.split_seed_start(split);
        splits.push(SplitRecord {
            name: name.to_string(),
            count: files.len(),
            seed_start: start,
            seed_end: start + files.len() as u64,
            sha256: hasher.finalize().iter().map(|b| format!("{b:02x}")).collect(),
            files,
        });
    }
    let manifest = Manifest {
        format_version: SCENE_FORMAT_VERSION,
        config: cfg.clone(),
        splits,
    };
    write_file(
        &out_dir.join("manifest.json"),
        (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes(),
    )?;
    Ok(manifest)
}

/// Generates and writes a whole dataset sequentially.
pub fn make_dataset(out_dir: &Path, cfg: &DatasetConfig, body: &BodyModel, registry: &TemplateRegistry) -> Result<Manifest> {
    let scenes = plan_dataset(cfg)?
        .into_iter()
        .map(|p| p.generate(cfg, body, registry).map(|s| (p, s)))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(out_dir, cfg, &scenes)
}

/// Loads every scene of one split listed in the manifest.
pub fn load_split(data_dir: &Path, split: &str) -> Result<Vec<Scene>> {
    let manifest = Manifest::load(&data_dir.join("manifest.json"))?;
    manifest
        .split(split)?
        .files
        .iter()
        .map(|f| Scene::load(&data_dir.join(f)))
        .collect()
}

/// OBJ text with the posed human and object as groups `human` and `object`.
pub fn scene_obj(x: &ParamVector, body: &BodyModel, tmpl: &ObjectTemplate) -> Result<String> {
    let posed = crate::model::pose_scene(x, crate::model::SceneModels::new(body, tmpl))?;
    let human = body.mesh_with(posed.human);
    let object = Mesh {
        vertices: posed.object,
        faces: tmpl.mesh.faces.clone(),
    };
    write_obj_groups(&[("human", &human), ("object", &object)])
}

pub fn export_obj(x: &ParamVector, body: &BodyModel, tmpl: &ObjectTemplate, path: &Path) -> Result<()> {
    write_file(path, scene_obj(x, body, tmpl)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_are_reached() {
        let mut t = [None; JOINT_COUNT];
        t[L_SHOULDER] = Some([0.0, -1.0, 0.0]);
        t[L_ELBOW] = Some([0.0, 0.0, 1.0]);
        let local = pose_from_directions(&t);
        let g_sh = local[crate::model::body::SPINE2];
        let g_sh = mat_mul(&mat_mul(&mat_mul(&local[0], &local[1]), &g_sh), &local[L_SHOULDER]);
        let d = crate::model::rotation::mat_vec(&g_sh, rest_bone_direction(L_SHOULDER));
        assert!((d[1] + 1.0).abs() < 1e-12);
        let g_el = mat_mul(&g_sh, &local[L_ELBOW]);
        let d = crate::model::rotation::mat_vec(&g_el, rest_bone_direction(L_ELBOW));
        assert!((d[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn antiparallel_alignment() {
        let r = align([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]);
        let d = crate::model::rotation::mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!((d[0] + 1.0).abs() < 1e-12);
    }
}
