//! Canonical-frame signed distance functions: analytic primitives and
//! trilinear-interpolated grids. Negative inside, positive outside, meters.

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

use super::mesh::Mesh;

#[derive(Clone, Debug, PartialEq)]
pub enum SdfShape {
    Box { half: [f64; 3] },
    Sphere { radius: f64 },
    /// Axis along +y.
    Cylinder { radius: f64, half_height: f64 },
    Grid(SdfGrid),
}

impl SdfShape {
    pub fn kind(&self) -> &'static str {
        match self {
            SdfShape::Box { .. } => "box",
            SdfShape::Sphere { .. } => "sphere",
            SdfShape::Cylinder { .. } => "cylinder",
            SdfShape::Grid(_) => "grid",
        }
    }

    pub fn is_analytic(&self) -> bool {
        !matches!(self, SdfShape::Grid(_))
    }

    /// Signed distance of a canonical-frame point.
    pub fn eval(&self, q: [f64; 3]) -> f64 {
        match self {
            SdfShape::Box { half } => {
                let a = [q[0].abs() - half[0], q[1].abs() - half[1], q[2].abs() - half[2]];
                let outside = a.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = a[0].max(a[1]).max(a[2]).min(0.0);
                outside + inside
            }
            SdfShape::Sphere { radius } => (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt() - radius,
            SdfShape::Cylinder {
                radius,
                half_height,
            } => {
                let d = [
                    (q[0] * q[0] + q[2] * q[2]).sqrt() - radius,
                    q[1].abs() - half_height,
                ];
                let outside = (d[0].max(0.0).powi(2) + d[1].max(0.0).powi(2)).sqrt();
                outside + d[0].max(d[1]).min(0.0)
            }
            SdfShape::Grid(g) => g.sample(q).0,
        }
    }

    /// Batched signed distance on the tape: `[n, 3]` → `[n]`.
    pub fn eval_var<'t>(&self, q: Var<'t>) -> Result<Var<'t>> {
        let tape = q.tape();
        match self {
            SdfShape::Box { half } => {
                let a = q.abs()?.sub(tape.constant(Tensor::vector(half.to_vec())))?;
                let outside = a.max_scalar(0.0)?.square()?.sum_axis(1)?.sqrt()?;
                let inside = a.max_last()?.min_scalar(0.0)?;
                outside.add(inside)
            }
            SdfShape::Sphere { radius } => q.square()?.sum_axis(1)?.sqrt()?.add_scalar(-radius),
            SdfShape::Cylinder {
                radius,
                half_height,
            } => {
                let x = q.narrow(1, 0, 1)?;
                let y = q.narrow(1, 1, 1)?;
                let z = q.narrow(1, 2, 1)?;
                let radial = x.square()?.add(z.square()?)?.sqrt()?.add_scalar(-radius)?;
                let axial = y.abs()?.add_scalar(-half_height)?;
                let d = Var::concat(&[radial, axial], 1)?;
                let outside = d.max_scalar(0.0)?.square()?.sum_axis(1)?.sqrt()?;
                let inside = d.max_last()?.min_scalar(0.0)?;
                outside.add(inside)
            }
            SdfShape::Grid(g) => g.eval_var(q),
        }
    }

    /// Canonical-frame axis-aligned bounds of the zero level set.
    pub fn extent(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            SdfShape::Box { half } => (half.map(|h| -h), *half),
            SdfShape::Sphere { radius } => ([-radius; 3], [*radius; 3]),
            SdfShape::Cylinder {
                radius,
                half_height,
            } => (
                [-radius, -half_height, -radius],
                [*radius, *half_height, *radius],
            ),
            SdfShape::Grid(g) => g.surface_bounds,
        }
    }
}

/// Signed distances sampled on a regular grid, interpolated trilinearly.
/// Queries outside the grid add their distance to the grid boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid {
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
    surface_bounds: ([f64; 3], [f64; 3]),
}

impl SdfGrid {
    /// Samples `mesh` on a `resolution³` grid covering its bounds plus a
    /// margin. Magnitudes are exact point-to-triangle distances; signs come
    /// from the generalized winding number.
    pub fn from_mesh(mesh: &Mesh, resolution: usize) -> Result<Self> {
        if resolution < 2 || mesh.faces.is_empty() {
            return Err(Error::invalid("sdf grid", "need a non-empty mesh and resolution ≥ 2"));
        }
        mesh.validate()?;
        let (lo, hi) = mesh.bounds();
        let size = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let margin = 0.1 * size + 1e-3;
        let origin = [lo[0] - margin, lo[1] - margin, lo[2] - margin];
        let spacing = (size + 2.0 * margin) / (resolution - 1) as f64;
        let dims = [0, 1, 2].map(|k| (((hi[k] + margin) - origin[k]) / spacing).ceil() as usize + 1);
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let p = [
                        origin[0] + i as f64 * spacing,
                        origin[1] + j as f64 * spacing,
                        origin[2] + k as f64 * spacing,
                    ];
                    let d = mesh.distance(p);
                    let inside = mesh.winding_number(p) >= 0.5;
                    values.push(if inside { -d } else { d });
                }
            }
        }
        Ok(Self {
            origin,
            spacing,
            dims,
            values,
            surface_bounds: (lo, hi),
        })
    }

    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    /// Value and gradient at `q`.
    pub fn sample(&self, q: [f64; 3]) -> (f64, [f64; 3]) {
        let mut cell = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut clamped = [0.0; 3];
        for k in 0..3 {
            let max = self.origin[k] + (self.dims[k] - 1) as f64 * self.spacing;
            clamped[k] = q[k].clamp(self.origin[k], max);
            let u = (clamped[k] - self.origin[k]) / self.spacing;
            let c = (u.floor() as usize).min(self.dims[k] - 2);
            cell[k] = c;
            frac[k] = u - c as f64;
        }
        let [i, j, k] = cell;
        let [fx, fy, fz] = frac;
        let c000 = self.at(i, j, k);
        let c001 = self.at(i, j, k + 1);
        let c010 = self.at(i, j + 1, k);
        let c011 = self.at(i, j + 1, k + 1);
        let c100 = self.at(i + 1, j, k);
        let c101 = self.at(i + 1, j, k + 1);
        let c110 = self.at(i + 1, j + 1, k);
        let c111 = self.at(i + 1, j + 1, k + 1);
        let c00 = c000 * (1.0 - fz) + c001 * fz;
        let c01 = c010 * (1.0 - fz) + c011 * fz;
        let c10 = c100 * (1.0 - fz) + c101 * fz;
        let c11 = c110 * (1.0 - fz) + c111 * fz;
        let c0 = c00 * (1.0 - fy) + c01 * fy;
        let c1 = c10 * (1.0 - fy) + c11 * fy;
        let value = c0 * (1.0 - fx) + c1 * fx;
        let h = self.spacing;
        let mut grad = [
            (c1 - c0) / h,
            ((c01 - c00) * (1.0 - fx) + (c11 - c10) * fx) / h,
            (((c001 - c000) * (1.0 - fy) + (c011 - c010) * fy) * (1.0 - fx)
                + ((c101 - c100) * (1.0 - fy) + (c111 - c110) * fy) * fx)
                / h,
        ];
        let off = [q[0] - clamped[0], q[1] - clamped[1], q[2] - clamped[2]];
        let dist = (off[0] * off[0] + off[1] * off[1] + off[2] * off[2]).sqrt();
        if dist > 0.0 {
            for a in 0..3 {
                if off[a] != 0.0 {
                    grad[a] = 0.0;
                }
                grad[a] += off[a] / dist;
            }
        }
        (value + dist, grad)
    }

    fn eval_var<'t>(&self, q: Var<'t>) -> Result<Var<'t>> {
        let qv = q.value();
        let [n, 3] = *qv.shape() else {
            return Err(Error::Shape {
                op: "sdf grid",
                lhs: qv.shape().to_vec(),
                rhs: vec![0, 3],
            });
        };
        let mut values = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(3 * n);
        for i in 0..n {
            let (v, g) = self.sample(qv.row3(i));
            values.push(v);
            grads.extend_from_slice(&g);
        }
        q.tape().custom("sdf_grid", &[q], Tensor::vector(values), move |up| {
            let data = grads
                .chunks(3)
                .zip(up.data())
                .flat_map(|(g, u)| [g[0] * u, g[1] * u, g[2] * u])
                .collect();
            vec![Some(Tensor::new(vec![n, 3], data).expect("shape"))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn analytic_values() {
        let b = SdfShape::Box { half: [0.5; 3] };
        assert_eq!(b.eval([0.0; 3]), -0.5);
        assert!((b.eval([1.5, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        let s = SdfShape::Sphere { radius: 1.0 };
        assert_eq!(s.eval([0.0, 2.0, 0.0]), 1.0);
        let c = SdfShape::Cylinder {
            radius: 0.5,
            half_height: 1.0,
        };
        assert!((c.eval([0.0, 0.0, 0.0]) + 0.5).abs() < 1e-15);
        assert!((c.eval([0.0, 1.5, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tape_matches_pointwise() {
        let pts = [[0.1, -0.7, 0.3], [0.9, 0.2, -0.1], [0.0, 0.0, 0.05], [1.2, 1.4, -2.0]];
        let shapes = [
            SdfShape::Box { half: [0.3, 0.5, 0.2] },
            SdfShape::Sphere { radius: 0.4 },
            SdfShape::Cylinder {
                radius: 0.3,
                half_height: 0.6,
            },
        ];
        for shape in &shapes {
            let tape = Tape::inference();
            let q = tape.constant(Tensor::from_rows(&pts));
            let d = shape.eval_var(q).unwrap().value();
            for (i, p) in pts.iter().enumerate() {
                assert!((d.data()[i] - shape.eval(*p)).abs() < 1e-15);
            }
        }
    }
}
