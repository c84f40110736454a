//! Gradient-domain operators: per-face gradients, the cotangent Laplacian,
//! face-area mass, and the prefactored Poisson solve that maps a per-face
//! Jacobian field back to vertex positions (plus its adjoint).
//!
//! The Laplacian has the constant functions in its kernel, one per
//! connected component. Every component is fixed in one of two ways:
//!
//! * components containing vertices outside the deformation mask keep those
//!   vertices at their rest positions (Dirichlet rows);
//! * fully movable components pin one anchor vertex for the factorization
//!   and afterwards translate the solution so that the component centroid
//!   equals its rest centroid.

use nalgebra::Matrix3;
use sprs::{CsMat, FillInReduction, SymmetryCheck, TriMat};
use sprs_ldl::{Ldl, LdlNumeric};

use crate::error::OperatorError;
use crate::mesh::{DeformationMask, TriMesh, Vec3};

/// One 3x3 Jacobian per face. Row `a` holds the surface gradient of world
/// coordinate `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    per_face: Vec<Matrix3<f64>>,
}

impl JacobianField {
    pub fn new(per_face: Vec<Matrix3<f64>>) -> Self {
        Self { per_face }
    }

    pub fn zeros(num_faces: usize) -> Self {
        Self {
            per_face: vec![Matrix3::zeros(); num_faces],
        }
    }

    pub fn len(&self) -> usize {
        self.per_face.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_face.is_empty()
    }

    pub fn faces(&self) -> &[Matrix3<f64>] {
        &self.per_face
    }

    pub fn faces_mut(&mut self) -> &mut [Matrix3<f64>] {
        &mut self.per_face
    }

    /// Row-major entries of every face, concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.per_face.len() * 9);
        for m in &self.per_face {
            for r in 0..3 {
                for c in 0..3 {
                    out.push(m[(r, c)]);
                }
            }
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len() % 9, 0, "flat field length must be a multiple of 9");
        let per_face = flat
            .chunks_exact(9)
            .map(Matrix3::from_row_slice)
            .collect();
        Self { per_face }
    }

    /// Sum of entrywise products.
    pub fn dot(&self, other: &JacobianField) -> f64 {
        self.per_face
            .iter()
            .zip(&other.per_face)
            .map(|(a, b)| a.component_mul(b).sum())
            .sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            per_face: self.per_face.iter().map(|m| m * s).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.per_face.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VertexRole {
    Free(usize),
    /// Held at its rest position.
    Pinned,
    /// Held at zero during the solve; its component is recentred afterwards.
    Anchor,
}

#[derive(Debug, Clone)]
struct GaugeComponent {
    vertices: Vec<usize>,
    rest_centroid: Vec3,
}

/// Prefactored operators built once from the rest pose.
pub struct MeshOperators {
    faces: Vec<[usize; 3]>,
    rest: Vec<Vec3>,
    /// Gradients of the three hat functions of each face, in face-vertex order.
    basis: Vec<[Vec3; 3]>,
    areas: Vec<f64>,
    grad: CsMat<f64>,
    laplacian: CsMat<f64>,
    roles: Vec<VertexRole>,
    free: Vec<usize>,
    gauge: Vec<GaugeComponent>,
    /// `-L_fp x_p` for the Dirichlet rows, one entry per free vertex.
    dirichlet_rhs: Vec<Vec3>,
    factor: Option<LdlNumeric<f64, usize>>,
}

impl std::fmt::Debug for MeshOperators {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeshOperators")
            .field("vertices", &self.rest.len())
            .field("faces", &self.faces.len())
            .field("free", &self.free.len())
            .field("gauge_components", &self.gauge.len())
            .finish()
    }
}

/// Operators with every vertex movable.
pub fn build_operators(mesh: &TriMesh) -> Result<MeshOperators, OperatorError> {
    MeshOperators::new(mesh, None)
}

/// Operators in which vertices outside `mask` stay at their rest positions.
pub fn build_operators_masked(
    mesh: &TriMesh,
    mask: &DeformationMask,
) -> Result<MeshOperators, OperatorError> {
    MeshOperators::new(mesh, Some(mask))
}

/// Gradients of the linear hat functions of triangle (p0, p1, p2):
/// `n x e_i / (2A)` with `e_i` the edge opposite vertex `i`.
pub fn hat_gradients(p0: &Vec3, p1: &Vec3, p2: &Vec3) -> ([Vec3; 3], f64) {
    let cross = (p1 - p0).cross(&(p2 - p0));
    let double_area = cross.norm();
    let n = cross / double_area;
    let g0 = n.cross(&(p2 - p1)) / double_area;
    let g1 = n.cross(&(p0 - p2)) / double_area;
    let g2 = n.cross(&(p1 - p0)) / double_area;
    ([g0, g1, g2], 0.5 * double_area)
}

/// Cotangent of the angle at `apex` in the triangle (apex, a, b).
pub fn cotangent(apex: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let u = a - apex;
    let v = b - apex;
    u.dot(&v) / u.cross(&v).norm()
}

/// Symmetric cotangent edge weights `w_ij = 1/2 (cot alpha + cot beta)`,
/// as (i, j, w) with i < j, sorted by (i, j).
pub fn cotangent_weights(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<(usize, usize, f64)> {
    let mut acc: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
    for &[a, b, c] in faces {
        for (apex, i, j) in [(a, b, c), (b, c, a), (c, a, b)] {
            let w = 0.5 * cotangent(&vertices[apex], &vertices[i], &vertices[j]);
            *acc.entry((i.min(j), i.max(j))).or_insert(0.0) += w;
        }
    }
    acc.into_iter().map(|((i, j), w)| (i, j, w)).collect()
}

fn connected_components(num_vertices: usize, faces: &[[usize; 3]]) -> Vec<usize> {
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut parent: Vec<usize> = (0..num_vertices).collect();
    for &[a, b, c] in faces {
        for (u, v) in [(a, b), (b, c)] {
            let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
            if ru != rv {
                parent[ru.max(rv)] = ru.min(rv);
            }
        }
    }
    (0..num_vertices).map(|v| find(&mut parent, v)).collect()
}

impl MeshOperators {
    fn new(mesh: &TriMesh, mask: Option<&DeformationMask>) -> Result<Self, OperatorError> {
        let rest = mesh.rest_vertices().to_vec();
        let faces = mesh.faces().to_vec();
        let nv = rest.len();
        let nf = faces.len();

        let mut basis = Vec::with_capacity(nf);
        let mut areas = Vec::with_capacity(nf);
        let mut grad_trip = TriMat::new((3 * nf, nv));
        for (f, &[a, b, c]) in faces.iter().enumerate() {
            let (g, area) = hat_gradients(&rest[a], &rest[b], &rest[c]);
            for (k, &v) in [a, b, c].iter().enumerate() {
                for d in 0..3 {
                    grad_trip.add_triplet(3 * f + d, v, g[k][d]);
                }
            }
            basis.push(g);
            areas.push(area);
        }
        let grad: CsMat<f64> = grad_trip.to_csr();

        let weights = cotangent_weights(&rest, &faces);
        let mut lap_trip = TriMat::new((nv, nv));
        for &(i, j, w) in &weights {
            lap_trip.add_triplet(i, j, -w);
            lap_trip.add_triplet(j, i, -w);
            lap_trip.add_triplet(i, i, w);
            lap_trip.add_triplet(j, j, w);
        }
        let laplacian: CsMat<f64> = lap_trip.to_csr();

        // Roles: pinned (outside mask), anchor (one per fully movable component), free.
        let comp = connected_components(nv, &faces);
        let movable = |v: usize| mask.is_none_or(|m| m.contains_vertex(v));
        let mut comp_has_pin = vec![false; nv];
        for v in 0..nv {
            if !movable(v) {
                comp_has_pin[comp[v]] = true;
            }
        }
        let mut roles = vec![VertexRole::Pinned; nv];
        let mut gauge_members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for v in 0..nv {
            if !movable(v) {
                continue;
            }
            if comp_has_pin[comp[v]] {
                roles[v] = VertexRole::Free(0);
            } else {
                let members = gauge_members.entry(comp[v]).or_default();
                // root of the union-find is the smallest index of the component
                roles[v] = if v == comp[v] {
                    VertexRole::Anchor
                } else {
                    VertexRole::Free(0)
                };
                members.push(v);
            }
        }
        let mut free = Vec::new();
        for (v, role) in roles.iter_mut().enumerate() {
            if let VertexRole::Free(k) = role {
                *k = free.len();
                free.push(v);
            }
        }
        let gauge = gauge_members
            .into_values()
            .map(|vertices| {
                let rest_centroid =
                    vertices.iter().map(|&v| rest[v]).sum::<Vec3>() / vertices.len() as f64;
                GaugeComponent {
                    vertices,
                    rest_centroid,
                }
            })
            .collect();

        let mut reduced = TriMat::new((free.len(), free.len()));
        let mut dirichlet_rhs = vec![Vec3::zeros(); free.len()];
        for (row, vec) in laplacian.outer_iterator().enumerate() {
            let VertexRole::Free(r) = roles[row] else { continue };
            for (col, &val) in vec.iter() {
                match roles[col] {
                    VertexRole::Free(c) => reduced.add_triplet(r, c, val),
                    VertexRole::Pinned => dirichlet_rhs[r] -= rest[col] * val,
                    VertexRole::Anchor => {}
                }
            }
        }

        let factor = if free.is_empty() {
            None
        } else {
            let reduced: CsMat<f64> = reduced.to_csc();
            let numeric = Ldl::new()
                .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
                .check_symmetry(SymmetryCheck::DontCheckSymmetry)
                .numeric(reduced.view())
                .map_err(|e| match e {
                    sprs::errors::LinalgError::SingularMatrix(info) => OperatorError::Factorization {
                        pivot: info.index,
                        value: 0.0,
                    },
                    _ => OperatorError::Factorization {
                        pivot: 0,
                        value: f64::NAN,
                    },
                })?;
            let d = numeric.d();
            let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if let Some((pivot, &value)) = d
                .iter()
                .enumerate()
                .find(|(_, &x)| !x.is_finite() || x <= 1e-14 * scale)
            {
                return Err(OperatorError::Factorization { pivot, value });
            }
            Some(numeric)
        };

        Ok(Self {
            faces,
            rest,
            basis,
            areas,
            grad,
            laplacian,
            roles,
            free,
            gauge,
            dirichlet_rhs,
            factor,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.rest.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Sparse (3F x V) gradient operator, three rows per face.
    pub fn grad(&self) -> &CsMat<f64> {
        &self.grad
    }

    /// Sparse symmetric (V x V) cotangent Laplacian, positive semidefinite
    /// sign convention (`L_ij = -w_ij`, diagonal = sum of weights).
    pub fn laplacian(&self) -> &CsMat<f64> {
        &self.laplacian
    }

    /// Face areas of the rest pose (diagonal of the mass matrix).
    pub fn mass(&self) -> &[f64] {
        &self.areas
    }

    /// Whether vertex `v` is held at its rest position by the gauge.
    pub fn is_pinned(&self, v: usize) -> bool {
        self.roles[v] == VertexRole::Pinned
    }

    /// Per-face Jacobians `J_f = sum_i p_i g_i^T` of the given positions.
    pub fn extract_jacobians(&self, vertices: &[Vec3]) -> Result<JacobianField, OperatorError> {
        self.check_vertices(vertices.len())?;
        let per_face = self
            .faces
            .iter()
            .zip(&self.basis)
            .map(|(face, g)| {
                let mut j = Matrix3::zeros();
                for k in 0..3 {
                    j += vertices[face[k]] * g[k].transpose();
                }
                j
            })
            .collect();
        Ok(JacobianField { per_face })
    }

    /// Vertices whose Jacobians are least-squares closest to `field`.
    pub fn poisson_solve(&self, field: &JacobianField) -> Result<Vec<Vec3>, OperatorError> {
        if field.len() != self.faces.len() {
            return Err(OperatorError::Shape {
                expected: self.faces.len(),
                got: field.len(),
            });
        }
        // rhs = G^T A M, per vertex
        let mut rhs = vec![Vec3::zeros(); self.rest.len()];
        for ((face, g), (m, &area)) in self
            .faces
            .iter()
            .zip(&self.basis)
            .zip(field.per_face.iter().zip(&self.areas))
        {
            for k in 0..3 {
                rhs[face[k]] += (m * g[k]) * area;
            }
        }
        let mut reduced: Vec<Vec3> = self
            .free
            .iter()
            .zip(&self.dirichlet_rhs)
            .map(|(&v, d)| rhs[v] + d)
            .collect();
        self.solve_reduced(&mut reduced);

        let mut out: Vec<Vec3> = self
            .roles
            .iter()
            .enumerate()
            .map(|(v, role)| match role {
                VertexRole::Free(k) => reduced[*k],
                VertexRole::Pinned => self.rest[v],
                VertexRole::Anchor => Vec3::zeros(),
            })
            .collect();
        for comp in &self.gauge {
            let mean = comp.vertices.iter().map(|&v| out[v]).sum::<Vec3>() / comp.vertices.len() as f64;
            let shift = comp.rest_centroid - mean;
            for &v in &comp.vertices {
                out[v] += shift;
            }
        }
        Ok(out)
    }

    /// Pulls a per-vertex gradient back through `poisson_solve` onto the field.
    pub fn poisson_adjoint(&self, grad_vertices: &[Vec3]) -> Result<JacobianField, OperatorError> {
        self.check_vertices(grad_vertices.len())?;
        let mut centred = grad_vertices.to_vec();
        for comp in &self.gauge {
            let mean = comp.vertices.iter().map(|&v| grad_vertices[v]).sum::<Vec3>()
                / comp.vertices.len() as f64;
            for &v in &comp.vertices {
                centred[v] -= mean;
            }
        }
        let mut reduced: Vec<Vec3> = self.free.iter().map(|&v| centred[v]).collect();
        self.solve_reduced(&mut reduced);
        let mut z = vec![Vec3::zeros(); self.rest.len()];
        for (&v, val) in self.free.iter().zip(&reduced) {
            z[v] = *val;
        }
        let per_face = self
            .faces
            .iter()
            .zip(&self.basis)
            .zip(&self.areas)
            .map(|((face, g), &area)| {
                let mut m = Matrix3::zeros();
                for k in 0..3 {
                    m += z[face[k]] * g[k].transpose();
                }
                m * area
            })
            .collect();
        Ok(JacobianField { per_face })
    }

    fn solve_reduced(&self, rhs: &mut [Vec3]) {
        let Some(factor) = &self.factor else { return };
        for d in 0..3 {
            let column: Vec<f64> = rhs.iter().map(|v| v[d]).collect();
            let x: Vec<f64> = factor.solve(&column);
            for (r, val) in rhs.iter_mut().zip(x) {
                r[d] = val;
            }
        }
    }

    fn check_vertices(&self, n: usize) -> Result<(), OperatorError> {
        if n != self.rest.len() {
            return Err(OperatorError::Shape {
                expected: self.rest.len(),
                got: n,
            });
        }
        Ok(())
    }
}
