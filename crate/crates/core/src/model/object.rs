//! Rigid object templates and their posing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use super::mesh::Mesh;
use super::rotation::{mat_vec, rot6d_to_matrix, rot6d_to_matrix_var, transpose, Mat3};
use super::sdf::{SdfGrid, SdfShape};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Number of canonical sample points fed to the geometry encoder.
pub const COARSE_POINTS: usize = 64;

pub const DEFAULT_GRID_RESOLUTION: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTemplate {
    pub id: String,
    pub shape: SdfShape,
    pub mesh: Mesh,
    pub coarse_points: Vec<[f64; 3]>,
}

impl ObjectTemplate {
    pub fn new(id: impl Into<String>, shape: SdfShape, mesh: Mesh, coarse_points: Vec<[f64; 3]>) -> Result<Self> {
        let id = id.into();
        if coarse_points.len() != COARSE_POINTS {
            return Err(Error::invalid(
                "object template",
                format!("`{id}` has {} coarse points, expected {COARSE_POINTS}", coarse_points.len()),
            ));
        }
        if mesh.vertices.is_empty() {
            return Err(Error::invalid("object template", format!("`{id}` has an empty mesh")));
        }
        mesh.validate()?;
        Ok(Self {
            id,
            shape,
            mesh,
            coarse_points,
        })
    }

    /// Template for an analytic primitive with a generated surface mesh.
    pub fn primitive(id: impl Into<String>, shape: SdfShape) -> Result<Self> {
        let mesh = match &shape {
            SdfShape::Box { half } => Mesh::cuboid(*half, 4),
            SdfShape::Sphere { radius } => Mesh::icosphere(*radius, 2),
            SdfShape::Cylinder {
                radius,
                half_height,
            } => Mesh::cylinder(*radius, *half_height, 16, 6),
            SdfShape::Grid(_) => {
                return Err(Error::invalid("object template", "grid templates are built from a mesh"))
            }
        };
        let points = mesh.farthest_point_sample(COARSE_POINTS);
        Self::new(id, shape, mesh, points)
    }

    /// Template for an arbitrary closed mesh, with a sampled SDF grid.
    pub fn from_mesh(id: impl Into<String>, mesh: Mesh, resolution: usize) -> Result<Self> {
        let grid = SdfGrid::from_mesh(&mesh, resolution)?;
        let points = mesh.farthest_point_sample(COARSE_POINTS);
        Self::new(id, SdfShape::Grid(grid), mesh, points)
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.vertices.len()
    }

    pub fn canonical_vertices(&self) -> Tensor {
        Tensor::from_rows(&self.mesh.vertices)
    }

    /// Lowest canonical point relative to the object origin along +y.
    pub fn canonical_min_y(&self) -> f64 {
        self.mesh
            .vertices
            .iter()
            .map(|v| v[1])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Posed object vertices `R · v + t`.
pub fn object_forward(tmpl: &ObjectTemplate, rot_o: &[f64], trans_o: &[f64]) -> Result<Vec<[f64; 3]>> {
    let r = rot6d_to_matrix(rot_o)?;
    let t = trans3(trans_o)?;
    Ok(tmpl
        .mesh
        .vertices
        .iter()
        .map(|&v| {
            let p = mat_vec(&r, v);
            [p[0] + t[0], p[1] + t[1], p[2] + t[2]]
        })
        .collect())
}

/// Signed distance of a world point to the posed object.
pub fn world_sdf(tmpl: &ObjectTemplate, rot_o: &[f64], trans_o: &[f64], query: [f64; 3]) -> Result<f64> {
    if query.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("world_sdf", "query is not finite"));
    }
    let r = rot6d_to_matrix(rot_o)?;
    let t = trans3(trans_o)?;
    Ok(tmpl.shape.eval(to_local(&r, t, query)))
}

/// Posed-object SDF evaluator for many queries against one pose.
pub struct PosedSdf<'a> {
    shape: &'a SdfShape,
    rot: Mat3,
    trans: [f64; 3],
}

impl<'a> PosedSdf<'a> {
    pub fn new(tmpl: &'a ObjectTemplate, rot_o: &[f64], trans_o: &[f64]) -> Result<Self> {
        Ok(Self {
            shape: &tmpl.shape,
            rot: rot6d_to_matrix(rot_o)?,
            trans: trans3(trans_o)?,
        })
    }

    pub fn eval(&self, q: [f64; 3]) -> f64 {
        self.shape.eval(to_local(&self.rot, self.trans, q))
    }
}

fn to_local(r: &Mat3, t: [f64; 3], q: [f64; 3]) -> [f64; 3] {
    mat_vec(&transpose(r), [q[0] - t[0], q[1] - t[1], q[2] - t[2]])
}

fn trans3(t: &[f64]) -> Result<[f64; 3]> {
    match t {
        [x, y, z] if t.iter().all(|v| v.is_finite()) => Ok([*x, *y, *z]),
        _ => Err(Error::invalid("object pose", format!("translation must be 3 finite values, got {t:?}"))),
    }
}

/// Object pose on the tape: rotation `[3, 3]` and translation `[3]`.
#[derive(Clone, Copy, Debug)]
pub struct ObjectPoseVar<'t> {
    pub rot: Var<'t>,
    pub trans: Var<'t>,
}

impl<'t> ObjectPoseVar<'t> {
    pub fn from_params(rot6d: Var<'t>, trans: Var<'t>) -> Result<Self> {
        Ok(Self {
            rot: rot6d_to_matrix_var(rot6d)?,
            trans,
        })
    }

    /// Posed vertices `[m, 3]`.
    pub fn vertices(&self, tmpl: &ObjectTemplate) -> Result<Var<'t>> {
        let tape = self.rot.tape();
        let canon = tape.constant(tmpl.canonical_vertices());
        canon.matmul(self.rot.transpose()?)?.add(self.trans)
    }

    /// Signed distances of world points `[n, 3]` → `[n]`.
    pub fn sdf(&self, tmpl: &ObjectTemplate, query: Var<'t>) -> Result<Var<'t>> {
        let local = query.sub(self.trans)?.matmul(self.rot)?;
        tmpl.shape.eval_var(local)
    }
}

/// Object templates keyed by id.
#[derive(Clone, Debug, Default)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Arc<ObjectTemplate>>,
}

impl TemplateRegistry {
    /// The procedural objects used by the synthetic scene generator.
    pub fn builtin() -> Self {
        let mut reg = Self::default();
        let shapes = [
            ("seat_box", SdfShape::Box { half: [0.2, 0.41, 0.2] }),
            ("carry_box", SdfShape::Box { half: [0.22, 0.1, 0.14] }),
            ("ball", SdfShape::Sphere { radius: 0.14 }),
            (
                "pillar",
                SdfShape::Cylinder {
                    radius: 0.1,
                    half_height: 0.6,
                },
            ),
            ("crate", SdfShape::Box { half: [0.25, 0.2, 0.25] }),
        ];
        for (id, shape) in shapes {
            reg.insert(ObjectTemplate::primitive(id, shape).expect("builtin template"));
        }
        reg
    }

    pub fn insert(&mut self, tmpl: ObjectTemplate) {
        self.templates.insert(tmpl.id.clone(), Arc::new(tmpl));
    }

    pub fn get(&self, id: &str) -> Result<Arc<ObjectTemplate>> {
        self.templates
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Writes one subdirectory per template: `template.txt` (header),
    /// `mesh.obj` and `points.txt`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        for tmpl in self.templates.values() {
            let sub = dir.join(&tmpl.id);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let params = match &tmpl.shape {
                SdfShape::Box { half } => format!("{:?} {:?} {:?}", half[0], half[1], half[2]),
                SdfShape::Sphere { radius } => format!("{radius:?}"),
                SdfShape::Cylinder {
                    radius,
                    half_height,
                } => format!("{radius:?} {half_height:?}"),
                SdfShape::Grid(g) => format!("{}", g.dims.iter().max().copied().unwrap_or(0)),
            };
            let header = format!(
                "id = {}\nsdf = {}\nparams = {params}\n",
                tmpl.id,
                tmpl.shape.kind()
            );
            let mut points = String::new();
            for p in &tmpl.coarse_points {
                let _ = writeln!(points, "{:?} {:?} {:?}", p[0], p[1], p[2]);
            }
            for (name, body) in [
                ("template.txt", header),
                ("mesh.obj", tmpl.mesh.to_obj()),
                ("points.txt", points),
            ] {
                let path = sub.join(name);
                std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    /// Loads every template subdirectory of `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut reg = Self::default();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut subdirs: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("template.txt").is_file())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            reg.insert(load_template(&sub)?);
        }
        Ok(reg)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_template(dir: &Path) -> Result<ObjectTemplate> {
    let header_path = dir.join("template.txt");
    let header = read(&header_path)?;
    let perr = |msg: String| Error::Parse {
        path: header_path.display().to_string(),
        msg,
    };
    let mut fields = BTreeMap::new();
    for line in header.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| perr(format!("expected `key = value`, got `{line}`")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| fields.get(k).cloned().ok_or_else(|| perr(format!("missing `{k}`")));
    let id = get("id")?;
    let kind = get("sdf")?;
    let params: Vec<f64> = get("params")?
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| perr(format!("bad param `{t}`: {e}"))))
        .collect::<Result<_>>()?;
    let mesh_path = dir.join("mesh.obj");
    let mesh = Mesh::parse_obj(&read(&mesh_path)?, &mesh_path.display().to_string())?;
    let points_path = dir.join("points.txt");
    let points = read(&points_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: points_path.display().to_string(),
                    msg: e.to_string(),
                })?;
            match v.as_slice() {
                [x, y, z] => Ok([*x, *y, *z]),
                _ => Err(Error::Parse {
                    path: points_path.display().to_string(),
                    msg: format!("expected 3 values per row, got `{l}`"),
                }),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let shape = match (kind.as_str(), params.as_slice()) {
        ("box", [x, y, z]) => SdfShape::Box { half: [*x, *y, *z] },
        ("sphere", [r]) => SdfShape::Sphere { radius: *r },
        ("cylinder", [r, h]) => SdfShape::Cylinder {
            radius: *r,
            half_height: *h,
        },
        ("grid", [res]) => SdfShape::Grid(SdfGrid::from_mesh(&mesh, *res as usize)?),
        _ => return Err(perr(format!("unsupported sdf `{kind}` with params {params:?}"))),
    };
    ObjectTemplate::new(id, shape, mesh, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::rotation::{axis_angle_to_matrix, matrix_to_rot6d, IDENTITY_6D};

    #[test]
    fn builtin_templates_have_64_points() {
        let reg = TemplateRegistry::builtin();
        for id in reg.ids() {
            assert_eq!(reg.get(id).unwrap().coarse_points.len(), COARSE_POINTS);
        }
        assert!(matches!(reg.get("nope"), Err(Error::UnknownTemplate(_))));
    }

    #[test]
    fn identity_pose_and_translation() {
        let reg = TemplateRegistry::builtin();
        let t = reg.get("crate").unwrap();
        let v = object_forward(&t, &IDENTITY_6D, &[0.0; 3]).unwrap();
        assert_eq!(v, t.mesh.vertices);
        let v = object_forward(&t, &IDENTITY_6D, &[0.0, 1.0, 0.0]).unwrap();
        for (a, b) in v.iter().zip(&t.mesh.vertices) {
            assert_eq!(a[1], b[1] + 1.0);
        }
    }

    #[test]
    fn inverse_transform_recovers_canonical() {
        let reg = TemplateRegistry::builtin();
        let t = reg.get("pillar").unwrap();
        let r = axis_angle_to_matrix([0.3, -1.1, 0.7]);
        let tr = [0.4, -0.2, 1.3];
        let posed = object_forward(&t, &matrix_to_rot6d(&r), &tr).unwrap();
        let rt = transpose(&r);
        for (p, c) in posed.iter().zip(&t.mesh.vertices) {
            let back = mat_vec(&rt, [p[0] - tr[0], p[1] - tr[1], p[2] - tr[2]]);
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_rotation_is_an_error() {
        let reg = TemplateRegistry::builtin();
        let t = reg.get("ball").unwrap();
        assert!(object_forward(&t, &[1., 0., 0., 2., 0., 0.], &[0.0; 3]).is_err());
    }

    #[test]
    fn registry_round_trips_through_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let reg = TemplateRegistry::builtin();
        reg.save_dir(dir.path()).unwrap();
        let back = TemplateRegistry::load_dir(dir.path()).unwrap();
        for id in reg.ids() {
            let a = reg.get(id).unwrap();
            let b = back.get(id).unwrap();
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.coarse_points, b.coarse_points);
            assert_eq!(a.mesh.faces, b.mesh.faces);
            for (p, q) in a.mesh.vertices.iter().zip(&b.mesh.vertices) {
                for k in 0..3 {
                    assert_eq!(p[k], q[k]);
                }
            }
        }
    }
}
