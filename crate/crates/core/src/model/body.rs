//! Procedural mini body: 16 joints, capsule segments, linear blend skinning.
//!
//! The body faces +z with +y up and stands on the floor in the rest pose
//! (T-pose, arms along ±x). Joint 0 (pelvis) is the root and stays fixed at
//! its shaped rest position; the pose only rotates joints.

use super::mesh::Mesh;
use super::params::{BETA_DIM, BETA_RAW_BOUND};
use super::rotation::rot6d_to_matrix_batch;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 16;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "spine1",
    "spine2",
    "neck",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

pub const PARENTS: [Option<usize>; JOINT_COUNT] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(5),
    Some(0),
    Some(7),
    Some(8),
    Some(2),
    Some(10),
    Some(11),
    Some(2),
    Some(13),
    Some(14),
];

pub const PELVIS: usize = 0;
pub const SPINE1: usize = 1;
pub const SPINE2: usize = 2;
pub const NECK: usize = 3;
pub const L_HIP: usize = 4;
pub const L_KNEE: usize = 5;
pub const L_ANKLE: usize = 6;
pub const R_HIP: usize = 7;
pub const R_KNEE: usize = 8;
pub const R_ANKLE: usize = 9;
pub const L_SHOULDER: usize = 10;
pub const L_ELBOW: usize = 11;
pub const L_WRIST: usize = 12;
pub const R_SHOULDER: usize = 13;
pub const R_ELBOW: usize = 14;
pub const R_WRIST: usize = 15;

const RING_SEGMENTS: usize = 8;

/// One capsule per joint: (start, end, radius). Every capsule except the
/// pelvis starts at its joint.
fn segments() -> [([f64; 3], [f64; 3], f64); JOINT_COUNT] {
    let side = |s: f64, a: [f64; 3]| [s * a[0], a[1], a[2]];
    let mut out = [([0.0; 3], [0.0; 3], 0.0); JOINT_COUNT];
    out[PELVIS] = ([-0.09, 0.95, 0.0], [0.09, 0.95, 0.0], 0.1);
    out[SPINE1] = ([0.0, 1.10, 0.0], [0.0, 1.30, 0.0], 0.12);
    out[SPINE2] = ([0.0, 1.30, 0.0], [0.0, 1.45, 0.0], 0.13);
    out[NECK] = ([0.0, 1.50, 0.0], [0.0, 1.72, 0.0], 0.09);
    for (s, hip, knee, ankle, sh, el, wr) in [
        (1.0, L_HIP, L_KNEE, L_ANKLE, L_SHOULDER, L_ELBOW, L_WRIST),
        (-1.0, R_HIP, R_KNEE, R_ANKLE, R_SHOULDER, R_ELBOW, R_WRIST),
    ] {
        out[hip] = (side(s, [0.09, 0.90, 0.0]), side(s, [0.09, 0.50, 0.0]), 0.07);
        out[knee] = (side(s, [0.09, 0.50, 0.0]), side(s, [0.09, 0.08, 0.0]), 0.05);
        out[ankle] = (side(s, [0.09, 0.08, 0.0]), side(s, [0.09, 0.045, 0.16]), 0.045);
        out[sh] = (side(s, [0.18, 1.45, 0.0]), side(s, [0.45, 1.45, 0.0]), 0.045);
        out[el] = (side(s, [0.45, 1.45, 0.0]), side(s, [0.70, 1.45, 0.0]), 0.04);
        out[wr] = (side(s, [0.70, 1.45, 0.0]), side(s, [0.85, 1.45, 0.0]), 0.035);
    }
    out
}

/// Unit direction of each joint's capsule in the rest pose.
pub fn rest_bone_direction(j: usize) -> [f64; 3] {
    let (a, b, _) = segments()[j];
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    [d[0] / n, d[1] / n, d[2] / n]
}

/// Rest joint positions of the mean shape.
pub fn rest_joints() -> [[f64; 3]; JOINT_COUNT] {
    let segs = segments();
    let mut j = segs.map(|s| s.0);
    j[PELVIS] = [0.0, 0.95, 0.0];
    j
}

fn orthonormal_frame(axis: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if axis[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let u = super::rotation::cross(axis, helper);
    let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let u = [u[0] / n, u[1] / n, u[2] / n];
    (u, super::rotation::cross(axis, u))
}

/// Capsule surface: start pole, five rings, end pole. Returns the mesh and
/// the ring index of each vertex (poles are -1 and 5).
fn capsule(start: [f64; 3], end: [f64; 3], radius: f64) -> (Mesh, Vec<i32>) {
    let d = [end[0] - start[0], end[1] - start[1], end[2] - start[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let axis = [d[0] / len, d[1] / len, d[2] / len];
    let (u, w) = orthonormal_frame(axis);
    let c45 = std::f64::consts::FRAC_1_SQRT_2;
    let rings = [
        (-radius * c45, radius * c45),
        (0.0, radius),
        (0.5 * len, radius),
        (len, radius),
        (len + radius * c45, radius * c45),
    ];
    let at = |a: f64, offset: [f64; 3]| {
        [
            start[0] + axis[0] * a + offset[0],
            start[1] + axis[1] * a + offset[1],
            start[2] + axis[2] * a + offset[2],
        ]
    };
    let mut mesh = Mesh::default();
    let mut ring_of = Vec::new();
    mesh.vertices.push(at(-radius, [0.0; 3]));
    ring_of.push(-1);
    for (r, &(a, rho)) in rings.iter().enumerate() {
        for s in 0..RING_SEGMENTS {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / RING_SEGMENTS as f64;
            let (sn, cs) = phi.sin_cos();
            let off = [0, 1, 2].map(|k| rho * (cs * u[k] + sn * w[k]));
            mesh.vertices.push(at(a, off));
            ring_of.push(r as i32);
        }
    }
    mesh.vertices.push(at(len + radius, [0.0; 3]));
    ring_of.push(rings.len() as i32);
    let m = RING_SEGMENTS;
    let ring = |r: usize, s: usize| 1 + r * m + (s % m);
    let last = mesh.vertices.len() - 1;
    for s in 0..m {
        mesh.faces.push([0, ring(0, s + 1), ring(0, s)]);
        for r in 0..rings.len() - 1 {
            let (a, b, c, e) = (ring(r, s), ring(r, s + 1), ring(r + 1, s + 1), ring(r + 1, s));
            mesh.faces.push([a, b, c]);
            mesh.faces.push([a, c, e]);
        }
        let r = rings.len() - 1;
        mesh.faces.push([last, ring(r, s), ring(r, s + 1)]);
    }
    (mesh, ring_of)
}

/// Immutable skinned body model.
#[derive(Clone, Debug)]
pub struct BodyModel {
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub parents: Vec<Option<usize>>,
    /// `[K, N]`, each row a convex combination of vertices.
    pub joint_regressor: Tensor,
    /// `[N, K]`, rows non-negative and summing to one.
    pub skin_weights: Tensor,
    /// `[10, 3N]` displacement per unit raw shape coefficient.
    pub shape_basis: Tensor,
    /// Joint owning each vertex's capsule.
    pub vertex_joint: Vec<usize>,
    template: Tensor,
}

impl Default for BodyModel {
    fn default() -> Self {
        Self::mini()
    }
}

impl BodyModel {
    pub fn mini() -> Self {
        let segs = segments();
        let mut mesh = Mesh::default();
        let mut vertex_joint = Vec::new();
        let mut rings = Vec::new();
        for (j, &(a, b, r)) in segs.iter().enumerate() {
            let (m, ring_of) = capsule(a, b, r);
            vertex_joint.extend(std::iter::repeat(j).take(m.vertices.len()));
            rings.extend(ring_of);
            mesh.append(&m);
        }
        let n = mesh.vertices.len();
        let k = JOINT_COUNT;

        let mut skin = vec![0.0; n * k];
        for i in 0..n {
            let j = vertex_joint[i];
            let own = match (PARENTS[j], rings[i]) {
                (Some(_), -1 | 0) => 0.5,
                (Some(_), 1) => 0.75,
                _ => 1.0,
            };
            skin[i * k + j] = own;
            if let Some(p) = PARENTS[j] {
                skin[i * k + p] += 1.0 - own;
            }
        }

        let mut reg = vec![0.0; k * n];
        for j in 0..k {
            let members: Vec<usize> = (0..n)
                .filter(|&i| vertex_joint[i] == j && (j == PELVIS || rings[i] == 1))
                .collect();
            let w = 1.0 / members.len() as f64;
            for i in members {
                reg[j * n + i] = w;
            }
        }

        let basis = shape_fields(&mesh.vertices, &vertex_joint, &segs);
        let template = Tensor::from_rows(&mesh.vertices);
        Self {
            template_vertices: mesh.vertices,
            faces: mesh.faces,
            parents: PARENTS.to_vec(),
            joint_regressor: Tensor::from_parts(vec![k, n], reg),
            skin_weights: Tensor::from_parts(vec![n, k], skin),
            shape_basis: Tensor::from_parts(vec![BETA_DIM, 3 * n], basis),
            vertex_joint,
            template,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn mesh_with(&self, vertices: Vec<[f64; 3]>) -> Mesh {
        Mesh {
            vertices,
            faces: self.faces.clone(),
        }
    }

    /// Vertex indices whose capsule belongs to one of `joints`.
    pub fn vertices_of(&self, joints: &[usize]) -> Vec<usize> {
        (0..self.vertex_count())
            .filter(|&i| joints.contains(&self.vertex_joint[i]))
            .collect()
    }

    /// Posed vertices `[N, 3]` and joints `[K, 3]` on the tape, from
    /// `theta: [K, 6]` and normalized `beta: [10]`.
    pub fn forward_var<'t>(&self, theta: Var<'t>, beta: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = theta.tape();
        let k = self.joint_count();
        let n = self.vertex_count();
        if theta.shape() != [k, 6] || beta.shape() != [BETA_DIM] {
            return Err(Error::Shape {
                op: "lbs_forward",
                lhs: theta.shape(),
                rhs: beta.shape(),
            });
        }
        if !theta.value().all_finite() || !beta.value().all_finite() {
            return Err(Error::NonFinite {
                op: "lbs_forward".into(),
            });
        }
        let basis = tape.constant(self.shape_basis.clone());
        let offsets = beta
            .reshape(&[1, BETA_DIM])?
            .matmul(basis)?
            .scale(BETA_RAW_BOUND)?
            .reshape(&[n, 3])?;
        let shaped = tape.constant(self.template.clone()).add(offsets)?;
        let joints = tape.constant(self.joint_regressor.clone()).matmul(shaped)?;
        let rots = rot6d_to_matrix_batch(theta)?;
        let eye = tape.constant(Tensor::from_parts(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));

        let mut global: Vec<Var<'t>> = Vec::with_capacity(k);
        let mut disp: Vec<Option<Var<'t>>> = Vec::with_capacity(k);
        let mut rows = Vec::with_capacity(k);
        let mut joint_rows = Vec::with_capacity(k);
        for j in 0..k {
            let r = rots.narrow(0, j, 1)?.reshape(&[3, 3])?;
            let jj = joints.narrow(0, j, 1)?;
            let (g, d) = match self.parents[j] {
                None => (r, None),
                Some(p) => {
                    let gp = global[p];
                    let bone = jj.sub(joints.narrow(0, p, 1)?)?;
                    let moved = bone.matmul(gp.sub(eye)?.transpose()?)?;
                    let d = match disp[p] {
                        Some(dp) => dp.add(moved)?,
                        None => moved,
                    };
                    (gp.matmul(r)?, Some(d))
                }
            };
            let gm = g.sub(eye)?;
            let mut c = jj.matmul(gm.transpose()?)?.neg()?;
            let mut posed = jj;
            if let Some(d) = d {
                c = c.add(d)?;
                posed = posed.add(d)?;
            }
            rows.push(Var::concat(&[gm.reshape(&[1, 9])?, c], 1)?);
            joint_rows.push(posed);
            global.push(g);
            disp.push(d);
        }
        let blend = tape
            .constant(self.skin_weights.clone())
            .matmul(Var::concat(&rows, 0)?)?;
        let mut cols = Vec::with_capacity(3);
        for row in 0..3 {
            cols.push(
                blend
                    .narrow(1, 3 * row, 3)?
                    .mul(shaped)?
                    .sum_axis(1)?
                    .reshape(&[n, 1])?,
            );
        }
        let verts = shaped
            .add(Var::concat(&cols, 1)?)?
            .add(blend.narrow(1, 9, 3)?)?;
        Ok((verts, Var::concat(&joint_rows, 0)?))
    }
}

/// Posed vertices and joints for `theta` (`6K` values) and normalized `beta`.
pub fn lbs_forward(model: &BodyModel, theta: &[f64], beta: &[f64]) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let k = model.joint_count();
    if theta.len() != 6 * k || beta.len() != BETA_DIM {
        return Err(Error::invalid(
            "lbs_forward",
            format!("expected {} pose and {BETA_DIM} shape values, got {} and {}", 6 * k, theta.len(), beta.len()),
        ));
    }
    let tape = Tape::inference();
    let th = tape.constant(Tensor::from_parts(vec![k, 6], theta.to_vec()));
    let be = tape.constant(Tensor::vector(beta.to_vec()));
    let (v, j) = model.forward_var(th, be)?;
    Ok((rows3(&v.value()), rows3(&j.value())))
}

pub(crate) fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn shape_fields(
    verts: &[[f64; 3]],
    owner: &[usize],
    segs: &[([f64; 3], [f64; 3], f64); JOINT_COUNT],
) -> Vec<f64> {
    let n = verts.len();
    let mut out = vec![0.0; BETA_DIM * 3 * n];
    let is_arm = |j: usize| (L_SHOULDER..=R_WRIST).contains(&j);
    let is_leg = |j: usize| (L_HIP..=R_ANKLE).contains(&j);
    let is_torso = |j: usize| j <= SPINE2;
    for (i, &v) in verts.iter().enumerate() {
        let j = owner[i];
        let (a, b, _) = segs[j];
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let s = (((v[0] - a[0]) * d[0] + (v[1] - a[1]) * d[1] + (v[2] - a[2]) * d[2]) / dd).clamp(0.0, 1.0);
        let radial = [0, 1, 2].map(|k| v[k] - (a[k] + s * d[k]));
        let side = v[0].signum();
        let mut fields = [[0.0; 3]; BETA_DIM];
        fields[0] = [0.01 * v[0], 0.01 * v[1], 0.01 * v[2]];
        fields[1] = radial.map(|r| 0.1 * r);
        if is_torso(j) {
            fields[2] = radial.map(|r| 0.12 * r);
        }
        if is_arm(j) {
            fields[3] = [0.02 * (v[0] - side * 0.18), 0.0, 0.0];
            fields[5] = [0.01 * side, 0.0, 0.0];
            fields[9] = radial.map(|r| 0.15 * r);
        }
        if is_leg(j) {
            fields[4] = [0.0, 0.02 * (v[1] - 0.9), 0.0];
            if j == L_HIP || j == R_HIP {
                fields[8] = radial.map(|r| 0.15 * r);
            }
        }
        if j == NECK {
            fields[6] = [0, 1, 2].map(|k| 0.06 * (v[k] - [0.0, 1.62, 0.0][k]));
        }
        if is_torso(j) && v[2] > 0.0 {
            fields[7] = [0.0, 0.0, 0.08 * v[2]];
        }
        for (b, f) in fields.iter().enumerate() {
            out[b * 3 * n + 3 * i..b * 3 * n + 3 * i + 3].copy_from_slice(f);
        }
    }
    out
}
