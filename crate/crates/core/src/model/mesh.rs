//! Triangle meshes: procedural primitives, OBJ text I/O and the geometric
//! queries needed to build sampled signed distance grids.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn mul(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    mul(a, 1.0 / norm(a))
}

use super::rotation::cross;

impl Mesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if let Some(bad) = f.iter().find(|&&v| v >= n) {
                return Err(Error::invalid(
                    "mesh",
                    format!("face {i} references vertex {bad} but only {n} vertices exist"),
                ));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Axis-aligned box centered at the origin, each face split into an
    /// `n × n` grid of quads.
    pub fn cuboid(half: [f64; 3], n: usize) -> Mesh {
        let mut mesh = Mesh::default();
        let mut index = std::collections::HashMap::new();
        let mut vid = |mesh: &mut Mesh, p: [i64; 3]| -> usize {
            *index.entry(p).or_insert_with(|| {
                let v = [0, 1, 2].map(|k| half[k] * (2.0 * p[k] as f64 / n as f64 - 1.0));
                mesh.vertices.push(v);
                mesh.vertices.len() - 1
            })
        };
        let n_i = n as i64;
        // (fixed axis, fixed value, u axis, v axis) with outward winding
        for axis in 0..3 {
            let u = (axis + 1) % 3;
            let w = (axis + 2) % 3;
            for side in [0, n_i] {
                for i in 0..n_i {
                    for j in 0..n_i {
                        let corner = |di: i64, dj: i64| {
                            let mut p = [0i64; 3];
                            p[axis] = side;
                            p[u] = i + di;
                            p[w] = j + dj;
                            p
                        };
                        let a = vid(&mut mesh, corner(0, 0));
                        let b = vid(&mut mesh, corner(1, 0));
                        let c = vid(&mut mesh, corner(1, 1));
                        let d = vid(&mut mesh, corner(0, 1));
                        if side == n_i {
                            mesh.faces.push([a, b, c]);
                            mesh.faces.push([a, c, d]);
                        } else {
                            mesh.faces.push([a, c, b]);
                            mesh.faces.push([a, d, c]);
                        }
                    }
                }
            }
        }
        mesh
    }

    /// Subdivided icosahedron projected onto a sphere.
    pub fn icosphere(radius: f64, subdivisions: usize) -> Mesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<[f64; 3]> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .into_iter()
        .map(normalize)
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mid = std::collections::HashMap::new();
            let mut midpoint = |verts: &mut Vec<[f64; 3]>, a: usize, b: usize| -> usize {
                let key = (a.min(b), a.max(b));
                *mid.entry(key).or_insert_with(|| {
                    verts.push(normalize(mul(add(verts[a], verts[b]), 0.5)));
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = midpoint(&mut verts, a, b);
                let bc = midpoint(&mut verts, b, c);
                let ca = midpoint(&mut verts, c, a);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        Mesh {
            vertices: verts.into_iter().map(|v| mul(v, radius)).collect(),
            faces,
        }
    }

    /// Closed cylinder along +y centered at the origin.
    pub fn cylinder(radius: f64, half_height: f64, segments: usize, rings: usize) -> Mesh {
        let mut mesh = Mesh::default();
        for r in 0..=rings {
            let y = -half_height + 2.0 * half_height * r as f64 / rings as f64;
            for s in 0..segments {
                let a = std::f64::consts::TAU * s as f64 / segments as f64;
                mesh.vertices.push([radius * a.cos(), y, radius * a.sin()]);
            }
        }
        for r in 0..rings {
            for s in 0..segments {
                let a = r * segments + s;
                let b = r * segments + (s + 1) % segments;
                let c = a + segments;
                let d = b + segments;
                mesh.faces.push([a, c, b]);
                mesh.faces.push([b, c, d]);
            }
        }
        // caps with inner rings so vertices spread over the discs
        for (top, ring_start) in [(false, 0), (true, rings * segments)] {
            let y = if top { half_height } else { -half_height };
            let inner = mesh.vertices.len();
            for s in 0..segments {
                let a = std::f64::consts::TAU * s as f64 / segments as f64;
                mesh.vertices.push([0.5 * radius * a.cos(), y, 0.5 * radius * a.sin()]);
            }
            let center = mesh.vertices.len();
            mesh.vertices.push([0.0, y, 0.0]);
            for s in 0..segments {
                let o0 = ring_start + s;
                let o1 = ring_start + (s + 1) % segments;
                let i0 = inner + s;
                let i1 = inner + (s + 1) % segments;
                if top {
                    mesh.faces.push([o0, i0, o1]);
                    mesh.faces.push([o1, i0, i1]);
                    mesh.faces.push([i0, center, i1]);
                } else {
                    mesh.faces.push([o0, o1, i0]);
                    mesh.faces.push([o1, i1, i0]);
                    mesh.faces.push([i0, i1, center]);
                }
            }
        }
        mesh
    }

    /// Appends `other`, offsetting its face indices.
    pub fn append(&mut self, other: &Mesh) {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
    }

    /// Generalized winding number of `p` (≈1 inside a closed, outward-wound
    /// mesh, ≈0 outside).
    pub fn winding_number(&self, p: [f64; 3]) -> f64 {
        let mut total = 0.0;
        for f in &self.faces {
            let a = sub(self.vertices[f[0]], p);
            let b = sub(self.vertices[f[1]], p);
            let c = sub(self.vertices[f[2]], p);
            let (la, lb, lc) = (norm(a), norm(b), norm(c));
            let num = dot(a, cross(b, c));
            let den = la * lb * lc + dot(a, b) * lc + dot(b, c) * la + dot(c, a) * lb;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * std::f64::consts::PI)
    }

    /// Unsigned distance from `p` to the closest triangle.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                point_triangle_distance(
                    p,
                    self.vertices[f[0]],
                    self.vertices[f[1]],
                    self.vertices[f[2]],
                )
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Deterministic farthest-point subsample of the vertices.
    pub fn farthest_point_sample(&self, count: usize) -> Vec<[f64; 3]> {
        let n = self.vertices.len();
        if n == 0 || count == 0 {
            return Vec::new();
        }
        let (lo, hi) = self.bounds();
        let center = mul(add(lo, hi), 0.5);
        let start = (0..n)
            .max_by(|&a, &b| {
                norm(sub(self.vertices[a], center)).total_cmp(&norm(sub(self.vertices[b], center)))
            })
            .unwrap_or(0);
        let mut chosen = vec![start];
        let mut dist: Vec<f64> = self
            .vertices
            .iter()
            .map(|v| norm(sub(*v, self.vertices[start])))
            .collect();
        while chosen.len() < count.min(n) {
            let next = (0..n).max_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap_or(0);
            chosen.push(next);
            for (i, d) in dist.iter_mut().enumerate() {
                *d = d.min(norm(sub(self.vertices[i], self.vertices[next])));
            }
        }
        // repeat points cyclically if the mesh has fewer vertices than asked
        (0..count).map(|i| self.vertices[chosen[i % chosen.len()]]).collect()
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        write_obj_body(&mut s, self, 0);
        s
    }

    pub fn parse_obj(text: &str, source: &str) -> Result<Mesh> {
        let groups = parse_obj_groups(text, source)?;
        let mut mesh = Mesh::default();
        for (_, m) in groups {
            mesh.append(&m);
        }
        Ok(mesh)
    }
}

/// Appends `v`/`f` records for `mesh`; face indices are 1-based and offset
/// by `vertex_offset` previously written vertices.
pub(crate) fn write_obj_body(out: &mut String, mesh: &Mesh, vertex_offset: usize) {
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:.17e} {:.17e} {:.17e}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(
            out,
            "f {} {} {}",
            f[0] + 1 + vertex_offset,
            f[1] + 1 + vertex_offset,
            f[2] + 1 + vertex_offset
        );
    }
}

/// Writes named groups into one OBJ document.
pub fn write_obj_groups(groups: &[(&str, &Mesh)]) -> Result<String> {
    let mut out = String::new();
    let mut offset = 0;
    for (name, mesh) in groups {
        mesh.validate()?;
        let _ = writeln!(out, "g {name}");
        write_obj_body(&mut out, mesh, offset);
        offset += mesh.vertices.len();
    }
    Ok(out)
}

/// Parses an OBJ document into `(group name, mesh)` pairs. Faces keep only
/// the vertex index of each corner; polygons are fan-triangulated.
pub fn parse_obj_groups(text: &str, source: &str) -> Result<Vec<(String, Mesh)>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        msg: format!("line {}: {msg}", line + 1),
    };
    let mut all_vertices: Vec<[f64; 3]> = Vec::new();
    let mut groups: Vec<(String, Vec<usize>, Vec<[usize; 3]>)> = Vec::new();
    let mut current: Option<usize> = None;
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let xyz: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| err(ln, e.to_string())))
                    .collect::<Result<_>>()?;
                if xyz.len() != 3 {
                    return Err(err(ln, "vertex needs 3 coordinates".into()));
                }
                let g = *current.get_or_insert_with(|| {
                    groups.push(("default".into(), Vec::new(), Vec::new()));
                    groups.len() - 1
                });
                groups[g].1.push(all_vertices.len());
                all_vertices.push([xyz[0], xyz[1], xyz[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        first
                            .parse::<usize>()
                            .ok()
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| err(ln, format!("bad face index `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err(ln, "face needs at least 3 vertices".into()));
                }
                let g = *current.get_or_insert_with(|| {
                    groups.push(("default".into(), Vec::new(), Vec::new()));
                    groups.len() - 1
                });
                for k in 1..idx.len() - 1 {
                    groups[g].2.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            Some("g") | Some("o") => {
                let name = it.collect::<Vec<_>>().join(" ");
                groups.push((name, Vec::new(), Vec::new()));
                current = Some(groups.len() - 1);
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (name, verts, faces) in groups {
        if verts.is_empty() && faces.is_empty() {
            continue;
        }
        let local: std::collections::HashMap<usize, usize> =
            verts.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let faces = faces
            .into_iter()
            .map(|f| {
                let mut o = [0usize; 3];
                for k in 0..3 {
                    o[k] = *local.get(&f[k]).ok_or_else(|| Error::Parse {
                        path: source.to_string(),
                        msg: format!("group `{name}` face references vertex {} outside the group", f[k] + 1),
                    })?;
                }
                Ok(o)
            })
            .collect::<Result<_>>()?;
        out.push((
            name,
            Mesh {
                vertices: verts.iter().map(|&g| all_vertices[g]).collect(),
                faces,
            },
        ));
    }
    Ok(out)
}

/// Closest-point distance from `p` to triangle `abc`.
pub fn point_triangle_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return norm(ap);
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return norm(bp);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return norm(sub(p, add(a, mul(ab, v))));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return norm(cp);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return norm(sub(p, add(a, mul(ac, w))));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return norm(sub(p, add(b, mul(sub(c, b), w))));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    norm(sub(p, add(a, add(mul(ab, v), mul(ac, w)))))
}
