use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::DeformError;
use crate::guidance::{service_provider, GuidanceConfig, GuidanceMode, GuidanceProvider, MockProvider, ProviderKind};
use crate::mesh::{load_obj, save_obj, HandleConstraint, TriMesh, Vec3};
use crate::optimizer::{
    deform_with_observer, DeformationConfig, GuidanceSettings, LossWeights, MaskSpec, RunReport, Snapshot,
    DEFAULT_ARAP_WEIGHT, DEFAULT_ITERATIONS, DEFAULT_VIEWS_PER_ITER,
};
use crate::render::{Image, ViewSettings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_GUIDANCE: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuidanceArg {
    Mock,
    Service,
}

/// Drag mesh vertices to new positions while keeping the shape plausible.
#[derive(Debug, Parser)]
#[command(name = "meshdrag", version)]
pub struct Args {
    /// Input triangle mesh (OBJ)
    #[arg(long)]
    pub mesh: PathBuf,
    /// Constraint file (JSON): handles, mask, prompt
    #[arg(long)]
    pub constraints: PathBuf,
    /// Output mesh (OBJ)
    #[arg(long)]
    pub out: PathBuf,
    /// Optimization iterations
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iters: usize,
    /// ARAP regularizer weight (recommended 0.04..0.2)
    #[arg(long, default_value_t = DEFAULT_ARAP_WEIGHT)]
    pub arap_weight: f64,
    /// Guidance provider
    #[arg(long, value_enum, default_value_t = GuidanceArg::Mock)]
    pub guidance: GuidanceArg,
    /// Diffusion service address; DRAGD3D_GUIDANCE_URL overrides it
    #[arg(long)]
    pub service_url: Option<String>,
    /// Target image (PNG) for the mock provider [default: rest-pose renders]
    #[arg(long)]
    pub mock_target: Option<PathBuf>,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Views rendered per iteration
    #[arg(long, default_value_t = DEFAULT_VIEWS_PER_ITER)]
    pub views: usize,
    /// Render resolution in pixels (square)
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Write an OBJ and the current renders every N iterations (0 = never)
    #[arg(long, default_value_t = 0)]
    pub snapshot_every: usize,
    /// Run report (JSON) [default: <out>.report.json]
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Ablation: SDS guidance (no reference subtraction) instead of DDS
    #[arg(long, default_value_t = false)]
    pub sds: bool,
    /// Ablation: the four canonical views every iteration instead of random cameras
    #[arg(long, default_value_t = false)]
    pub fixed_views: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandleSpec {
    pub vertex: usize,
    pub target: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskFileSpec {
    All,
    VertexSet { vertices: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintFile {
    pub handles: Vec<HandleSpec>,
    pub mask: MaskFileSpec,
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub camera_distance: Option<f64>,
}

impl ConstraintFile {
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// One problem found while cross-checking a constraint file against a mesh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Cross-checks indices, handle/mask containment and finiteness. An empty
/// list means the pair is usable.
pub fn validate(mesh: &TriMesh, constraints: &ConstraintFile) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut push = |field: String, message: String| findings.push(Finding { field, message });
    let n = mesh.num_vertices();
    if constraints.handles.is_empty() {
        push("handles".into(), "at least one handle is required".into());
    }
    let mask: Option<BTreeSet<usize>> = match &constraints.mask {
        MaskFileSpec::All => None,
        MaskFileSpec::VertexSet { vertices } => {
            for (k, &v) in vertices.iter().enumerate() {
                if v >= n {
                    push(format!("mask.vertices[{k}]"), format!("vertex {v} out of range ({n} vertices)"));
                }
            }
            Some(vertices.iter().copied().collect())
        }
    };
    let mut seen = BTreeSet::new();
    for (k, h) in constraints.handles.iter().enumerate() {
        if h.vertex >= n {
            push(format!("handles[{k}].vertex"), format!("vertex {} out of range ({n} vertices)", h.vertex));
            continue;
        }
        if !h.target.iter().all(|x| x.is_finite()) {
            push(format!("handles[{k}].target"), "target must be finite".into());
        }
        if !seen.insert(h.vertex) {
            push(format!("handles[{k}].vertex"), format!("duplicate handle {}", h.vertex));
        }
        if let Some(m) = &mask {
            if !m.contains(&h.vertex) {
                push(format!("handles[{k}].vertex"), format!("handle {} not in mask", h.vertex));
            }
        }
    }
    if let Some(d) = constraints.camera_distance {
        if !(d > 0.0 && d.is_finite()) {
            push("camera_distance".into(), "must be a positive number".into());
        }
    }
    findings
}

/// Builds the optimizer configuration from parsed flags and constraints.
pub fn build_config(args: &Args, constraints: &ConstraintFile) -> DeformationConfig {
    DeformationConfig {
        handles: constraints
            .handles
            .iter()
            .map(|h| HandleConstraint::new(h.vertex, Vec3::from(h.target)))
            .collect(),
        mask: match &constraints.mask {
            MaskFileSpec::All => MaskSpec::All,
            MaskFileSpec::VertexSet { vertices } => MaskSpec::VertexSet {
                vertices: vertices.clone(),
            },
        },
        prompt: constraints.prompt.clone(),
        iters: args.iters,
        views_per_iter: args.views,
        d0: constraints.camera_distance,
        weights: LossWeights {
            lambda_reg: args.arap_weight,
            ..LossWeights::default()
        },
        seed: args.seed,
        snapshot_every: args.snapshot_every,
        view: ViewSettings {
            image_size: args.image_size,
            ..ViewSettings::default()
        },
        fixed_views: args.fixed_views,
        guidance: GuidanceSettings {
            mode: if args.sds { GuidanceMode::Sds } else { GuidanceMode::Dds },
            ..GuidanceSettings::default()
        },
        ..DeformationConfig::default()
    }
}

fn default_report_path(out: &Path) -> PathBuf {
    out.with_extension("report.json")
}

fn write_report(path: &Path, report: &RunReport) -> Result<(), String> {
    std::fs::write(path, report.to_json()).map_err(|e| format!("{}: {e}", path.display()))
}

fn flag_checks(args: &Args) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut check = |ok: bool, field: &str, message: &str| {
        if !ok {
            findings.push(Finding {
                field: field.into(),
                message: message.into(),
            });
        }
    };
    check(args.iters >= 1, "--iters", "must be >= 1");
    check(args.views >= 1, "--views", "must be >= 1");
    check(args.image_size >= 8, "--image-size", "must be >= 8");
    check(
        args.arap_weight >= 0.0 && args.arap_weight.is_finite(),
        "--arap-weight",
        "must be a finite number >= 0",
    );
    findings
}

/// Parses `argv` (including the program name), runs the deformation and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    run_with_args(&args)
}

pub fn run_with_args(args: &Args) -> i32 {
    let invalid = |msg: String| {
        eprintln!("error: {msg}");
        EXIT_VALIDATION
    };
    let flags = flag_checks(args);
    if !flags.is_empty() {
        for f in &flags {
            eprintln!("error: {f}");
        }
        return EXIT_VALIDATION;
    }
    let mesh = match load_obj(&args.mesh) {
        Ok(m) => m,
        Err(e) => return invalid(format!("mesh: {e}")),
    };
    let text = match std::fs::read_to_string(&args.constraints) {
        Ok(t) => t,
        Err(e) => return invalid(format!("constraints: {}: {e}", args.constraints.display())),
    };
    let constraints = match ConstraintFile::parse(&text) {
        Ok(c) => c,
        Err(e) => return invalid(format!("constraints: {e}")),
    };
    let findings = validate(&mesh, &constraints);
    if !findings.is_empty() {
        for f in &findings {
            eprintln!("error: {f}");
        }
        return EXIT_VALIDATION;
    }
    let config = build_config(args, &constraints);

    let provider: Box<dyn GuidanceProvider> = match args.guidance {
        GuidanceArg::Mock => match &args.mock_target {
            None => Box::new(MockProvider::reference_targets()),
            Some(path) => match Image::load_png(path) {
                Ok(img) if img.size() == args.image_size => Box::new(MockProvider::new(vec![img])),
                Ok(img) => {
                    return invalid(format!(
                        "--mock-target: image is {0}x{0}, --image-size is {1}",
                        img.size(),
                        args.image_size
                    ))
                }
                Err(e) => return invalid(format!("--mock-target: {}: {e}", path.display())),
            },
        },
        GuidanceArg::Service => {
            let gc = GuidanceConfig {
                provider: ProviderKind::Service,
                service_url: args.service_url.clone(),
                ..GuidanceConfig::default()
            };
            if gc.resolved_url().is_none() {
                return invalid("--service-url is required with --guidance service".into());
            }
            match service_provider(&gc) {
                Ok(p) => {
                    log::info!("connected to guidance service (model `{}`)", p.model());
                    Box::new(p)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_GUIDANCE;
                }
            }
        }
    };

    let report_path = args.report.clone().unwrap_or_else(|| default_report_path(&args.out));
    let snapshot_dir = args.out.with_extension("snapshots");
    let mut snapshot_error = None;
    let mut observer = |s: &Snapshot| {
        if snapshot_error.is_some() {
            return;
        }
        if let Err(e) = write_snapshot(&snapshot_dir, &mesh, s) {
            snapshot_error = Some(e);
        }
    };
    let result = deform_with_observer(&mesh, &config, provider.as_ref(), &mut observer);
    if let Some(e) = snapshot_error {
        eprintln!("error: snapshot: {e}");
        return EXIT_IO;
    }
    match result {
        Ok((out, report)) => {
            log::info!("finished {} iterations in {:.1}s", report.iterations.len(), report.wall_time_secs);
            if let Err(e) = save_obj(&out, &args.out) {
                eprintln!("error: {e}");
                return EXIT_IO;
            }
            if let Err(e) = write_report(&report_path, &report) {
                eprintln!("error: {e}");
                return EXIT_IO;
            }
            EXIT_OK
        }
        Err(failure) => {
            eprintln!("error: {}", failure.error);
            if let Err(e) = write_report(&report_path, &failure.report) {
                eprintln!("error: {e}");
            }
            match failure.error {
                DeformError::Config(_) | DeformError::Mesh(_) => EXIT_VALIDATION,
                DeformError::Guidance { .. } => EXIT_GUIDANCE,
                DeformError::Diverged { .. } | DeformError::Operator(_) => EXIT_DIVERGED,
            }
        }
    }
}

fn write_snapshot(dir: &Path, mesh: &TriMesh, s: &Snapshot) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let m = mesh.with_vertices(s.vertices.to_vec()).map_err(|e| e.to_string())?;
    save_obj(&m, dir.join(format!("iter_{:05}.obj", s.iteration))).map_err(|e| e.to_string())?;
    for (k, v) in s.views.iter().enumerate() {
        let path = dir.join(format!("iter_{:05}_view{k}.png", s.iteration));
        v.rgb.save_png(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}
