//! As-rigid-as-possible energy over vertex one-rings, with closed-form
//! per-vertex rotation fitting and the rotation-frozen vertex gradient.

use nalgebra::Matrix3;

use crate::mesh::{TriMesh, Vec3};
use crate::operators::cotangent_weights;

#[derive(Debug, Clone)]
pub struct ArapState {
    rotations: Vec<Matrix3<f64>>,
    /// One-ring of each vertex as (neighbor, cotangent weight).
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl ArapState {
    /// Identity rotations and the rest-pose cotangent weights of `mesh`.
    pub fn new(mesh: &TriMesh) -> Self {
        let mut neighbors = vec![Vec::new(); mesh.num_vertices()];
        for (i, j, w) in cotangent_weights(mesh.rest_vertices(), mesh.faces()) {
            neighbors[i].push((j, w));
            neighbors[j].push((i, w));
        }
        Self {
            rotations: vec![Matrix3::identity(); mesh.num_vertices()],
            neighbors,
        }
    }

    pub fn rotations(&self) -> &[Matrix3<f64>] {
        &self.rotations
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.neighbors[v]
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.neighbors[i].iter().find(|(n, _)| *n == j).map(|(_, w)| *w)
    }
}

/// Rotation `R` maximizing `tr(R S)` over SO(3), i.e. the rotation best
/// aligning rest edges to deformed edges when `S = sum w e e'^T`.
pub fn best_rotation(covariance: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = covariance.svd(true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested V^T").transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(2);
        let mut v = v;
        v.column_mut(smallest).neg_mut();
        r = v * u.transpose();
    }
    r
}

/// Refits every one-ring rotation to the deformed positions.
pub fn fit_rotations(mesh: &TriMesh, deformed: &[Vec3], state: &ArapState) -> ArapState {
    let rest = mesh.rest_vertices();
    let rotations = (0..rest.len())
        .map(|i| {
            let mut cov = Matrix3::zeros();
            for &(j, w) in &state.neighbors[i] {
                let e = rest[i] - rest[j];
                let e_def = deformed[i] - deformed[j];
                cov += w * e * e_def.transpose();
            }
            best_rotation(&cov)
        })
        .collect();
    ArapState {
        rotations,
        neighbors: state.neighbors.clone(),
    }
}

/// Local energy of one vertex's one-ring under a given rotation.
pub fn one_ring_energy(
    rest: &[Vec3],
    deformed: &[Vec3],
    ring: &[(usize, f64)],
    i: usize,
    rotation: &Matrix3<f64>,
) -> f64 {
    ring.iter()
        .map(|&(j, w)| {
            let d = (deformed[i] - deformed[j]) - rotation * (rest[i] - rest[j]);
            w * d.norm_squared()
        })
        .sum()
}

pub fn arap_energy(mesh: &TriMesh, deformed: &[Vec3], state: &ArapState) -> f64 {
    let rest = mesh.rest_vertices();
    (0..rest.len())
        .map(|i| one_ring_energy(rest, deformed, &state.neighbors[i], i, &state.rotations[i]))
        .sum()
}

/// Gradient of the energy with respect to the deformed positions, rotations held fixed.
pub fn arap_gradient(mesh: &TriMesh, deformed: &[Vec3], state: &ArapState) -> Vec<Vec3> {
    let rest = mesh.rest_vertices();
    let mut grad = vec![Vec3::zeros(); rest.len()];
    for i in 0..rest.len() {
        let r = &state.rotations[i];
        for &(j, w) in &state.neighbors[i] {
            let d = (deformed[i] - deformed[j]) - r * (rest[i] - rest[j]);
            let g = d * (2.0 * w);
            grad[i] += g;
            grad[j] -= g;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;
    use nalgebra::Rotation3;

    fn is_rotation(r: &Matrix3<f64>) -> bool {
        (r.transpose() * r - Matrix3::identity()).norm() < 1e-8 && (r.determinant() - 1.0).abs() < 1e-8
    }

    #[test]
    fn weights_symmetric() {
        let mesh = icosphere(1);
        let s = ArapState::new(&mesh);
        for i in 0..mesh.num_vertices() {
            for &(j, w) in s.neighbors(i) {
                assert_eq!(s.weight(j, i), Some(w));
            }
        }
    }

    #[test]
    fn rest_pose_fits_identity_with_zero_energy() {
        let mesh = icosphere(1);
        let s = fit_rotations(&mesh, mesh.rest_vertices(), &ArapState::new(&mesh));
        for r in s.rotations() {
            assert!((r - Matrix3::identity()).norm() < 1e-8);
        }
        assert!(arap_energy(&mesh, mesh.rest_vertices(), &s) < 1e-12);
        let g = arap_gradient(&mesh, mesh.rest_vertices(), &s);
        assert!(g.iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn rigid_motion_recovers_rotation() {
        let mesh = icosphere(1);
        let r0 = Rotation3::from_euler_angles(0.4, -0.9, 2.2);
        let t = Vec3::new(0.3, -4.0, 1.0);
        let moved: Vec<Vec3> = mesh.rest_vertices().iter().map(|v| r0 * v + t).collect();
        let s = fit_rotations(&mesh, &moved, &ArapState::new(&mesh));
        for r in s.rotations() {
            assert!(is_rotation(r));
            assert!((r - r0.matrix()).norm() < 1e-8);
        }
        assert!(arap_energy(&mesh, &moved, &s) < 1e-12);
    }

    #[test]
    fn translation_has_zero_energy() {
        let mesh = icosphere(1);
        let moved: Vec<Vec3> = mesh.rest_vertices().iter().map(|v| v + Vec3::new(1.0, 2.0, 3.0)).collect();
        let s = fit_rotations(&mesh, &moved, &ArapState::new(&mesh));
        assert!(arap_energy(&mesh, &moved, &s) < 1e-12);
    }

    #[test]
    fn uniform_scale_keeps_identity_and_costs_edge_sum() {
        let mesh = icosphere(1);
        let scaled: Vec<Vec3> = mesh.rest_vertices().iter().map(|v| v * 2.0).collect();
        let s = fit_rotations(&mesh, &scaled, &ArapState::new(&mesh));
        for r in s.rotations() {
            assert!((r - Matrix3::identity()).norm() < 1e-8);
        }
        // direct summation over directed edges, stretch (2 - 1)^2 = 1
        let rest = mesh.rest_vertices();
        let mut oracle = 0.0;
        for (i, j, w) in cotangent_weights(rest, mesh.faces()) {
            oracle += 2.0 * w * (rest[i] - rest[j]).norm_squared();
        }
        let e = arap_energy(&mesh, &scaled, &s);
        assert!((e - oracle).abs() < 1e-10 * oracle);
    }

    #[test]
    fn planar_patch_scale_matches_angle_search() {
        // hexagonal fan in the z = 0 plane, scaled by 2 and rotated about z by 0.3 rad
        let mut verts = vec![Vec3::zeros()];
        for k in 0..6 {
            let a = k as f64 * std::f64::consts::PI / 3.0 + 0.1 * (k % 2) as f64;
            verts.push(Vec3::new(a.cos(), a.sin(), 0.0));
        }
        let faces: Vec<[usize; 3]> = (0..6).map(|k| [0, 1 + k, 1 + (k + 1) % 6]).collect();
        let mesh = TriMesh::new(verts, faces, None).unwrap();
        let rz = Rotation3::from_axis_angle(&Vec3::z_axis(), 0.3);
        let deformed: Vec<Vec3> = mesh.rest_vertices().iter().map(|v| rz * (v * 2.0)).collect();
        let s = fit_rotations(&mesh, &deformed, &ArapState::new(&mesh));
        let fitted = one_ring_energy(mesh.rest_vertices(), &deformed, s.neighbors(0), 0, &s.rotations()[0]);
        let mut best = (f64::INFINITY, 0.0);
        for step in 0..=200_000 {
            let theta = -std::f64::consts::PI + step as f64 * 2.0 * std::f64::consts::PI / 200_000.0;
            let r = Rotation3::from_axis_angle(&Vec3::z_axis(), theta);
            let e = one_ring_energy(mesh.rest_vertices(), &deformed, s.neighbors(0), 0, r.matrix());
            if e < best.0 {
                best = (e, theta);
            }
        }
        assert!((best.1 - 0.3).abs() < 1e-4);
        assert!(fitted <= best.0 + 1e-9);
        let expected = Rotation3::from_axis_angle(&Vec3::z_axis(), 0.3);
        assert!((s.rotations()[0] - expected.matrix()).norm() < 1e-8);
    }

    #[test]
    fn reflection_is_corrected() {
        let cov = Matrix3::from_diagonal(&Vec3::new(1.0, 2.0, -3.0));
        let r = best_rotation(&cov);
        assert!(is_rotation(&r));
        // rank-deficient covariance still yields a rotation
        let r = best_rotation(&Matrix3::from_diagonal(&Vec3::new(1.0, 0.0, 0.0)));
        assert!(is_rotation(&r));
        let r = best_rotation(&Matrix3::zeros());
        assert!(is_rotation(&r));
    }

    fn perturbed_sphere(seed: u64, amp: f64) -> Vec<Vec3> {
        let mesh = icosphere(1);
        let mut state = seed ^ 0x9E3779B97F4A7C15;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        mesh.rest_vertices()
            .iter()
            .map(|v| v + Vec3::new(next(), next(), next()) * amp)
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mesh = icosphere(1);
        let deformed = perturbed_sphere(7, 0.2);
        let s = fit_rotations(&mesh, &deformed, &ArapState::new(&mesh));
        let g = arap_gradient(&mesh, &deformed, &s);
        let h = 1e-6;
        for v in 0..mesh.num_vertices() {
            for d in 0..3 {
                let mut p = deformed.clone();
                p[v][d] += h;
                let mut m = deformed.clone();
                m[v][d] -= h;
                let fd = (arap_energy(&mesh, &p, &s) - arap_energy(&mesh, &m, &s)) / (2.0 * h);
                let rel = (fd - g[v][d]).abs() / g[v][d].abs().max(1e-6);
                assert!(rel < 1e-5, "v{v} d{d}: {fd} vs {}", g[v][d]);
            }
        }
    }

    #[test]
    fn gradient_sums_to_zero() {
        let mesh = icosphere(1);
        let deformed = perturbed_sphere(3, 0.3);
        let s = fit_rotations(&mesh, &deformed, &ArapState::new(&mesh));
        let total: Vec3 = arap_gradient(&mesh, &deformed, &s).iter().sum();
        assert!(total.norm() < 1e-9);
    }

    #[test]
    fn nonrigid_one_ring_has_positive_energy() {
        let mesh = icosphere(1);
        let mut deformed = mesh.rest_vertices().to_vec();
        deformed[0] *= 1.3;
        let s = fit_rotations(&mesh, &deformed, &ArapState::new(&mesh));
        assert!(arap_energy(&mesh, &deformed, &s) > 1e-4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn energy_invariant_under_rigid_motion(
                seed in 0u64..10_000,
                angles in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
                t in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
            ) {
                let mesh = icosphere(1);
                let deformed = perturbed_sphere(seed, 0.2);
                let base = fit_rotations(&mesh, &deformed, &ArapState::new(&mesh));
                let e0 = arap_energy(&mesh, &deformed, &base);
                let r = Rotation3::from_euler_angles(angles.0, angles.1, angles.2);
                let moved: Vec<Vec3> = deformed.iter().map(|v| r * v + Vec3::new(t.0, t.1, t.2)).collect();
                let s = fit_rotations(&mesh, &moved, &base);
                prop_assert!((arap_energy(&mesh, &moved, &s) - e0).abs() <= 1e-10);
            }
        }
    }
}
