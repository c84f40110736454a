//! The deformation loop: per-face Jacobians are the only variables; user
//! handle distance, ARAP rigidity and image guidance are evaluated on the
//! Poisson-solved vertices and pulled back onto the field.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arap::{arap_energy, arap_gradient, fit_rotations, ArapState};
use crate::error::DeformError;
use crate::guidance::{dds_gradients, GuidanceMode, GuidanceProvider, GuidanceRequest};
use crate::mesh::{bounding_info_of, DeformationMask, HandleConstraint, TriMesh, Vec3};
use crate::operators::{build_operators, build_operators_masked, JacobianField};
use crate::render::{canonical_cameras, render, render_backward, sample_cameras, Camera, RenderedView, Scene, ViewSettings};

pub const DEFAULT_ITERATIONS: usize = 2000;
pub const DEFAULT_VIEWS_PER_ITER: usize = 4;
pub const DEFAULT_LEARNING_RATE: f64 = 0.005;
pub const DEFAULT_ARAP_WEIGHT: f64 = 0.04;
/// Recommended range for the ARAP weight.
pub const ARAP_WEIGHT_RANGE: (f64, f64) = (0.04, 0.2);
pub const USER_WEIGHT_START: f64 = 1.0;
pub const USER_WEIGHT_END: f64 = 50.0;
/// Default camera distance as a multiple of the bounding-box diagonal.
pub const DEFAULT_DISTANCE_FACTOR: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dds: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dds: 1.0,
            lambda_reg: DEFAULT_ARAP_WEIGHT,
        }
    }
}

/// Linear ramp of the handle weight over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub start: f64,
    pub end: f64,
    pub total_iters: usize,
}

impl Schedule {
    pub fn user_weight(total_iters: usize) -> Self {
        Self {
            start: USER_WEIGHT_START,
            end: USER_WEIGHT_END,
            total_iters,
        }
    }
}

/// `start + (end - start) * iter / (total - 1)`, clamped to `end`.
/// A one-iteration schedule stays at `start`.
pub fn schedule_weight(schedule: &Schedule, iter: usize) -> f64 {
    if schedule.total_iters <= 1 {
        return schedule.start;
    }
    let frac = iter as f64 / (schedule.total_iters - 1) as f64;
    (schedule.start + (schedule.end - schedule.start) * frac).min(schedule.end)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdanConfig {
    pub learning_rate: f64,
    /// Decay rates of the gradient, gradient-difference and squared-update moments.
    pub betas: (f64, f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdanConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            betas: (0.98, 0.92, 0.99),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive Nesterov momentum (Adan) optimizer state for a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdanState {
    pub config: AdanConfig,
    pub first_moment: Vec<f64>,
    pub grad_diff_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub previous_gradient: Option<Vec<f64>>,
    pub step_count: u64,
}

impl AdanState {
    pub fn new(len: usize, config: AdanConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; len],
            grad_diff_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            previous_gradient: None,
            step_count: 0,
        }
    }
}

/// One Adan update of `variable` in place.
pub fn adan_step(state: &mut AdanState, gradient: &[f64], variable: &mut [f64]) {
    assert_eq!(gradient.len(), variable.len(), "gradient and variable shapes differ");
    assert_eq!(gradient.len(), state.first_moment.len(), "optimizer state shape differs");
    let AdanConfig {
        learning_rate: lr,
        betas: (b1, b2, b3),
        eps,
        weight_decay,
    } = state.config;
    state.step_count += 1;
    let k = state.step_count as i32;
    let bc1 = 1.0 - b1.powi(k);
    let bc2 = 1.0 - b2.powi(k);
    let bc3 = 1.0 - b3.powi(k);
    let prev = state.previous_gradient.get_or_insert_with(|| gradient.to_vec());
    for i in 0..gradient.len() {
        let g = gradient[i];
        let diff = g - prev[i];
        state.first_moment[i] = b1 * state.first_moment[i] + (1.0 - b1) * g;
        state.grad_diff_moment[i] = b2 * state.grad_diff_moment[i] + (1.0 - b2) * diff;
        let combined = g + b2 * diff;
        state.second_moment[i] = b3 * state.second_moment[i] + (1.0 - b3) * combined * combined;
        let denom = (state.second_moment[i] / bc3).sqrt() + eps;
        let update = (state.first_moment[i] / bc1 + b2 * state.grad_diff_moment[i] / bc2) / denom;
        variable[i] = (variable[i] - lr * update) / (1.0 + lr * weight_decay);
    }
    prev.copy_from_slice(gradient);
}

/// Zeroes the gradient of every face outside the mask.
pub fn apply_mask(field_gradient: &mut JacobianField, mask: &DeformationMask) {
    for (f, m) in field_gradient.faces_mut().iter_mut().enumerate() {
        if !mask.contains_face(f) {
            m.fill(0.0);
        }
    }
}

/// `sum |target - current|^2` over the handles and its per-vertex gradient.
pub fn user_loss(vertices: &[Vec3], handles: &[HandleConstraint]) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::zeros(); vertices.len()];
    let mut loss = 0.0;
    for h in handles {
        let d = vertices[h.vertex_index] - h.target();
        loss += d.norm_squared();
        grad[h.vertex_index] += d * 2.0;
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaskSpec {
    All,
    VertexSet { vertices: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSettings {
    pub guidance_scale: f64,
    pub gradient_scale: f64,
    pub timestep_range: (f64, f64),
    pub mode: GuidanceMode,
    pub view_prompt_augment: bool,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        Self {
            guidance_scale: crate::guidance::DEFAULT_GUIDANCE_SCALE,
            gradient_scale: crate::guidance::DEFAULT_GRADIENT_SCALE,
            timestep_range: crate::guidance::DEFAULT_TIMESTEP_RANGE,
            mode: GuidanceMode::Dds,
            view_prompt_augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationConfig {
    pub handles: Vec<HandleConstraint>,
    pub mask: MaskSpec,
    pub prompt: String,
    pub iters: usize,
    pub views_per_iter: usize,
    /// Camera distance of the handle views; defaults to 1.25 x bounding diagonal.
    pub d0: Option<f64>,
    pub weights: LossWeights,
    pub schedule_start: f64,
    pub schedule_end: f64,
    pub seed: u64,
    pub snapshot_every: usize,
    pub view: ViewSettings,
    /// Use the four canonical views every iteration instead of random ones.
    pub fixed_views: bool,
    /// Disables the image guidance term entirely.
    pub guidance_enabled: bool,
    pub guidance: GuidanceSettings,
    pub adan: AdanConfig,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self {
            handles: Vec::new(),
            mask: MaskSpec::All,
            prompt: String::new(),
            iters: DEFAULT_ITERATIONS,
            views_per_iter: DEFAULT_VIEWS_PER_ITER,
            d0: None,
            weights: LossWeights::default(),
            schedule_start: USER_WEIGHT_START,
            schedule_end: USER_WEIGHT_END,
            seed: 0,
            snapshot_every: 0,
            view: ViewSettings::default(),
            fixed_views: false,
            guidance_enabled: true,
            guidance: GuidanceSettings::default(),
            adan: AdanConfig::default(),
        }
    }
}

impl DeformationConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            start: self.schedule_start,
            end: self.schedule_end,
            total_iters: self.iters,
        }
    }

    pub fn build_mask(&self, mesh: &TriMesh) -> Result<DeformationMask, DeformError> {
        match &self.mask {
            MaskSpec::All => Ok(DeformationMask::all(mesh)),
            MaskSpec::VertexSet { vertices } => Ok(DeformationMask::from_vertices(mesh, vertices.iter().copied())?),
        }
    }

    fn validate(&self, mesh: &TriMesh, mask: &DeformationMask) -> Result<(), DeformError> {
        let fail = |m: String| Err(DeformError::Config(m));
        if self.handles.is_empty() {
            return fail("at least one handle is required".into());
        }
        for (k, h) in self.handles.iter().enumerate() {
            if h.vertex_index >= mesh.num_vertices() {
                return fail(format!("handles[{k}].vertex: {} out of range", h.vertex_index));
            }
            if !h.target.iter().all(|x| x.is_finite()) {
                return fail(format!("handles[{k}].target: not finite"));
            }
            if !mask.contains_vertex(h.vertex_index) {
                return fail(format!("handles[{k}]: handle {} not in mask", h.vertex_index));
            }
        }
        if self.iters == 0 {
            return fail("iters must be >= 1".into());
        }
        if self.views_per_iter == 0 {
            return fail("views_per_iter must be >= 1".into());
        }
        if let Some(d0) = self.d0 {
            if !(d0 > 0.0 && d0.is_finite()) {
                return fail("d0 must be > 0".into());
            }
        }
        let w = &self.weights;
        if !(w.lambda_dds >= 0.0 && w.lambda_reg >= 0.0) {
            return fail("loss weights must be >= 0".into());
        }
        if !(self.schedule_start >= 0.0 && self.schedule_start <= self.schedule_end) {
            return fail("schedule must satisfy 0 <= start <= end".into());
        }
        let probe = Camera::new(0.0, 0.0, 1.0, Vec3::zeros(), &self.view);
        if !probe.is_valid() {
            return fail("view settings need 0 < fov_y < 180 and image_size >= 8".into());
        }
        let g = &self.guidance;
        let gc = crate::guidance::GuidanceConfig {
            guidance_scale: g.guidance_scale,
            gradient_scale: g.gradient_scale,
            timestep_range: g.timestep_range,
            ..Default::default()
        };
        gc.validate().map_err(DeformError::Config)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda_user: f64,
    pub loss_user: f64,
    pub loss_reg: f64,
    /// Guidance loss averaged over views, when the provider reports one.
    pub loss_dds: Option<f64>,
    pub loss_total: f64,
    pub grad_norm_user: f64,
    pub grad_norm_reg: f64,
    pub grad_norm_dds: f64,
    pub grad_norm_field: f64,
    /// (azimuth, elevation, distance) of each view.
    pub cameras: Vec<[f64; 3]>,
    pub timesteps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: DeformationConfig,
    pub seed: u64,
    pub provider: String,
    pub d0: f64,
    pub iterations: Vec<IterationRecord>,
    pub completed: bool,
    pub final_loss_user: Option<f64>,
    pub final_flipped_faces: Option<usize>,
    /// Wall-clock seconds; kept out of the serialized report so identical
    /// runs produce identical files.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug)]
pub struct DeformFailure {
    pub error: DeformError,
    pub report: RunReport,
}

/// State handed to the snapshot observer.
pub struct Snapshot<'a> {
    pub iteration: usize,
    pub vertices: &'a [Vec3],
    pub views: &'a [RenderedView],
}

/// Faces whose normal no longer has a positive dot product with the rest normal.
pub fn count_flipped_faces(mesh: &TriMesh, deformed: &[Vec3]) -> usize {
    let rest = mesh.face_normals(mesh.rest_vertices());
    let now = mesh.face_normals(deformed);
    rest.iter().zip(&now).filter(|(a, b)| a.dot(b) <= 0.0).count()
}

fn norm(v: &[Vec3]) -> f64 {
    v.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt()
}

pub fn deform(
    mesh: &TriMesh,
    config: &DeformationConfig,
    provider: &dyn GuidanceProvider,
) -> Result<(TriMesh, RunReport), Box<DeformFailure>> {
    deform_with_observer(mesh, config, provider, &mut |_| {})
}

/// Runs the full optimization. `observer` is called every
/// `config.snapshot_every` iterations (never when it is 0).
pub fn deform_with_observer(
    mesh: &TriMesh,
    config: &DeformationConfig,
    provider: &dyn GuidanceProvider,
    observer: &mut dyn FnMut(&Snapshot),
) -> Result<(TriMesh, RunReport), Box<DeformFailure>> {
    let started = Instant::now();
    let (look_at, diagonal) = bounding_info_of(mesh.rest_vertices());
    let d0 = config.d0.unwrap_or(DEFAULT_DISTANCE_FACTOR * diagonal);
    let mut report = RunReport {
        config: config.clone(),
        seed: config.seed,
        provider: provider.name().to_string(),
        d0,
        iterations: Vec::with_capacity(config.iters),
        completed: false,
        final_loss_user: None,
        final_flipped_faces: None,
        wall_time_secs: 0.0,
    };
    let fail = |error: DeformError, mut report: RunReport| {
        report.wall_time_secs = started.elapsed().as_secs_f64();
        Box::new(DeformFailure { error, report })
    };

    let mask = match config.build_mask(mesh) {
        Ok(m) => m,
        Err(e) => return Err(fail(e, report)),
    };
    if let Err(e) = config.validate(mesh, &mask) {
        return Err(fail(e, report));
    }
    let ops = match if mask.is_all() {
        build_operators(mesh)
    } else {
        build_operators_masked(mesh, &mask)
    } {
        Ok(ops) => ops,
        Err(e) => return Err(fail(e.into(), report)),
    };

    let rest = mesh.rest_vertices();
    let faces = mesh.faces();
    let colors = mesh.colors();
    let rest_scene = Scene::new(rest, faces, colors);
    let arap_base = ArapState::new(mesh);
    let schedule = config.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let field0 = ops.extract_jacobians(rest).expect("rest pose matches operators");
    let mut params = field0.to_flat();
    let mut adan = AdanState::new(params.len(), config.adan);
    let canonical = canonical_cameras(d0, look_at, &config.view);

    for iter in 0..config.iters {
        let field = JacobianField::from_flat(&params);
        let verts = ops.poisson_solve(&field).expect("field matches operators");
        if !verts.iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(fail(DeformError::Diverged { iteration: iter, term: "vertices" }, report));
        }

        // Random draws happen here, before any per-view work.
        let cameras: Vec<Camera> = if config.fixed_views {
            canonical.iter().cycle().take(config.views_per_iter).copied().collect()
        } else {
            sample_cameras(&mut rng, d0, look_at, config.views_per_iter, &config.view)
        };
        let guidance_seed: u64 = rng.random();

        let scene = Scene::new(&verts, faces, colors);
        let mut dds_grad = vec![Vec3::zeros(); verts.len()];
        let mut loss_dds = None;
        let mut timesteps = Vec::new();
        let mut views = Vec::new();
        if config.guidance_enabled && config.weights.lambda_dds > 0.0 || config.snapshot_every > 0 {
            views = render_views(&scene, &cameras);
        }
        if config.guidance_enabled && config.weights.lambda_dds > 0.0 {
            let refs = render_views(&rest_scene, &cameras);
            let request = GuidanceRequest {
                edit_images: views.iter().map(|v| v.rgb.clone()).collect(),
                ref_images: refs.into_iter().map(|v| v.rgb).collect(),
                prompt: config.prompt.clone(),
                camera_azimuths: cameras.iter().map(|c| c.azimuth).collect(),
                seed: guidance_seed,
                guidance_scale: config.guidance.guidance_scale,
                gradient_scale: config.guidance.gradient_scale,
                timestep_range: config.guidance.timestep_range,
                mode: config.guidance.mode,
                view_prompt_augment: config.guidance.view_prompt_augment,
            };
            let response = match dds_gradients(&request, provider) {
                Ok(r) => r,
                Err(source) => return Err(fail(DeformError::Guidance { iteration: iter, source }, report)),
            };
            let per_view = backprop_views(&views, &response.pixel_gradients, &scene);
            let scale = config.weights.lambda_dds / cameras.len() as f64;
            for g in per_view {
                for (acc, x) in dds_grad.iter_mut().zip(g) {
                    *acc += x * scale;
                }
            }
            loss_dds = response
                .losses
                .map(|l| config.weights.lambda_dds * l.iter().sum::<f64>() / l.len() as f64);
            timesteps = response.timesteps;
        }
        if !dds_grad.iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(fail(DeformError::Diverged { iteration: iter, term: "guidance gradient" }, report));
        }

        let arap_state = fit_rotations(mesh, &verts, &arap_base);
        let loss_reg = arap_energy(mesh, &verts, &arap_state);
        let mut reg_grad = arap_gradient(mesh, &verts, &arap_state);
        for g in &mut reg_grad {
            *g *= config.weights.lambda_reg;
        }

        let lambda_user = schedule_weight(&schedule, iter);
        let (loss_user, mut user_grad) = user_loss(&verts, &config.handles);
        for g in &mut user_grad {
            *g *= lambda_user;
        }
        if !loss_user.is_finite() {
            return Err(fail(DeformError::Diverged { iteration: iter, term: "user loss" }, report));
        }
        if !loss_reg.is_finite() {
            return Err(fail(DeformError::Diverged { iteration: iter, term: "ARAP energy" }, report));
        }

        let total_grad: Vec<Vec3> = (0..verts.len())
            .map(|v| user_grad[v] + reg_grad[v] + dds_grad[v])
            .collect();
        let mut field_grad = ops.poisson_adjoint(&total_grad).expect("gradient matches operators");
        apply_mask(&mut field_grad, &mask);
        if !field_grad.is_finite() {
            return Err(fail(DeformError::Diverged { iteration: iter, term: "field gradient" }, report));
        }

        let loss_total = lambda_user * loss_user + config.weights.lambda_reg * loss_reg + loss_dds.unwrap_or(0.0);
        report.iterations.push(IterationRecord {
            iteration: iter,
            lambda_user,
            loss_user,
            loss_reg,
            loss_dds,
            loss_total,
            grad_norm_user: norm(&user_grad),
            grad_norm_reg: norm(&reg_grad),
            grad_norm_dds: norm(&dds_grad),
            grad_norm_field: field_grad.norm(),
            cameras: cameras.iter().map(|c| [c.azimuth, c.elevation, c.distance]).collect(),
            timesteps,
        });

        if config.snapshot_every > 0 && iter % config.snapshot_every == 0 {
            observer(&Snapshot {
                iteration: iter,
                vertices: &verts,
                views: &views,
            });
        }

        adan_step(&mut adan, &field_grad.to_flat(), &mut params);
        if iter % 100 == 0 {
            log::debug!(
                "iter {iter}: user {loss_user:.6e} reg {loss_reg:.6e} lambda_user {lambda_user:.2}"
            );
        }
    }

    let final_field = JacobianField::from_flat(&params);
    let final_verts = ops.poisson_solve(&final_field).expect("field matches operators");
    if !final_verts.iter().all(|v| v.iter().all(|x| x.is_finite())) {
        return Err(fail(
            DeformError::Diverged {
                iteration: config.iters,
                term: "vertices",
            },
            report,
        ));
    }
    report.final_loss_user = Some(user_loss(&final_verts, &config.handles).0);
    report.final_flipped_faces = Some(count_flipped_faces(mesh, &final_verts));
    report.completed = true;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    let out = mesh.with_vertices(final_verts).map_err(|e| fail(e.into(), report.clone()))?;
    Ok((out, report))
}

/// Renders each camera on its own thread; results keep camera order.
fn render_views(scene: &Scene, cameras: &[Camera]) -> Vec<RenderedView> {
    std::thread::scope(|s| {
        let handles: Vec<_> = cameras.iter().map(|c| s.spawn(move || render(scene, c))).collect();
        handles.into_iter().map(|h| h.join().expect("render thread")).collect()
    })
}

fn backprop_views(views: &[RenderedView], grads: &[crate::render::Image], scene: &Scene) -> Vec<Vec<Vec3>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = views
            .iter()
            .zip(grads)
            .map(|(v, g)| s.spawn(move || render_backward(v, g, scene)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("backward thread")).collect()
    })
}
