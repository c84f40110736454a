//! Image-space guidance: the provider interface, the delta/score
//! distillation combination, a deterministic offline provider and an HTTP
//! client for the `dds/1` denoiser service protocol.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::GuidanceError;
use crate::render::Image;

pub const PROTOCOL_VERSION: &str = "dds/1";
/// Environment variable that overrides the configured service address.
pub const GUIDANCE_URL_ENV: &str = "DRAGD3D_GUIDANCE_URL";

pub const DEFAULT_GUIDANCE_SCALE: f64 = 100.0;
pub const DEFAULT_GRADIENT_SCALE: f64 = 0.00002;
pub const DEFAULT_TIMESTEP_RANGE: (f64, f64) = (0.05, 0.95);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// Edit-branch score minus reference-branch score.
    #[default]
    Dds,
    /// Edit-branch score only.
    Sds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Service,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub provider: ProviderKind,
    pub service_url: Option<String>,
    pub guidance_scale: f64,
    pub gradient_scale: f64,
    pub timestep_range: (f64, f64),
    pub mode: GuidanceMode,
    pub view_prompt_augment: bool,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Mock,
            service_url: None,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            gradient_scale: DEFAULT_GRADIENT_SCALE,
            timestep_range: DEFAULT_TIMESTEP_RANGE,
            mode: GuidanceMode::Dds,
            view_prompt_augment: false,
            timeout_secs: 120.0,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.guidance_scale > 0.0) {
            return Err("guidance_scale must be > 0".into());
        }
        if !(self.gradient_scale > 0.0) {
            return Err("gradient_scale must be > 0".into());
        }
        let (lo, hi) = self.timestep_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(format!("timestep_range ({lo}, {hi}) must satisfy 0 <= min < max <= 1"));
        }
        Ok(())
    }

    /// Service address, with the environment variable taking precedence.
    pub fn resolved_url(&self) -> Option<String> {
        std::env::var(GUIDANCE_URL_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.service_url.clone())
    }
}

#[derive(Debug, Clone)]
pub struct GuidanceRequest {
    pub edit_images: Vec<Image>,
    pub ref_images: Vec<Image>,
    pub prompt: String,
    pub camera_azimuths: Vec<f64>,
    pub seed: u64,
    pub guidance_scale: f64,
    pub gradient_scale: f64,
    pub timestep_range: (f64, f64),
    pub mode: GuidanceMode,
    pub view_prompt_augment: bool,
}

impl GuidanceRequest {
    pub fn num_views(&self) -> usize {
        self.edit_images.len()
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        let n = self.edit_images.len();
        if self.ref_images.len() != n {
            return Err(GuidanceError::Shape(format!(
                "{n} edit images but {} reference images",
                self.ref_images.len()
            )));
        }
        if self.camera_azimuths.len() != n {
            return Err(GuidanceError::Shape(format!(
                "{n} edit images but {} azimuths",
                self.camera_azimuths.len()
            )));
        }
        for (i, (e, r)) in self.edit_images.iter().zip(&self.ref_images).enumerate() {
            if e.size() != r.size() {
                return Err(GuidanceError::Shape(format!(
                    "view {i}: edit is {0}x{0}, reference is {1}x{1}",
                    e.size(),
                    r.size()
                )));
            }
            let in_range = |img: &Image| img.data().iter().all(|x| (0.0..=1.0).contains(x));
            if !in_range(e) || !in_range(r) {
                return Err(GuidanceError::Shape(format!("view {i}: pixel values outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Unscaled provider output: one per-pixel gradient per view.
#[derive(Debug, Clone)]
pub struct ProviderOutput {
    pub gradients: Vec<Image>,
    pub timesteps: Vec<f64>,
    /// Per-view scalar loss whose gradient is `gradients`, when the provider has one.
    pub losses: Option<Vec<f64>>,
}

pub trait GuidanceProvider: Send + Sync {
    /// Evaluates the guidance for every view in `request`, honoring
    /// `request.mode`. Edit and reference branches of one view share their
    /// random draws, so identical edit and reference images give zero.
    fn evaluate(&self, request: &GuidanceRequest) -> Result<ProviderOutput, GuidanceError>;

    fn name(&self) -> &str;
}

#[derive(Debug, Clone)]
pub struct GuidanceResponse {
    /// Per-pixel gradients, already multiplied by the gradient scale.
    pub pixel_gradients: Vec<Image>,
    pub timesteps: Vec<f64>,
    /// L2 norm of each entry of `pixel_gradients`.
    pub gradient_norms: Vec<f64>,
    /// Scaled per-view loss, when the provider reports one.
    pub losses: Option<Vec<f64>>,
}

/// Runs `provider` on `request`, validates shapes and applies the gradient scale.
pub fn dds_gradients(
    request: &GuidanceRequest,
    provider: &dyn GuidanceProvider,
) -> Result<GuidanceResponse, GuidanceError> {
    request.validate()?;
    let out = provider.evaluate(request)?;
    let n = request.num_views();
    if out.gradients.len() != n {
        return Err(GuidanceError::Shape(format!(
            "provider returned {} gradients for {n} views",
            out.gradients.len()
        )));
    }
    if out.timesteps.len() != n {
        return Err(GuidanceError::Shape(format!(
            "provider returned {} timesteps for {n} views",
            out.timesteps.len()
        )));
    }
    let mut pixel_gradients = Vec::with_capacity(n);
    let mut gradient_norms = Vec::with_capacity(n);
    for (view, (g, e)) in out.gradients.into_iter().zip(&request.edit_images).enumerate() {
        if g.size() != e.size() {
            return Err(GuidanceError::Shape(format!(
                "view {view}: gradient is {0}x{0}, image is {1}x{1}",
                g.size(),
                e.size()
            )));
        }
        let mut g = g;
        for x in g.data_mut() {
            *x *= request.gradient_scale;
        }
        if !g.data().iter().all(|x| x.is_finite()) {
            return Err(GuidanceError::NonFinite { view });
        }
        gradient_norms.push(g.norm());
        pixel_gradients.push(g);
    }
    let losses = out
        .losses
        .map(|l| l.into_iter().map(|x| x * request.gradient_scale).collect());
    Ok(GuidanceResponse {
        pixel_gradients,
        timesteps: out.timesteps,
        gradient_norms,
        losses,
    })
}

#[derive(Debug, Clone)]
enum MockTarget {
    /// The request's own reference images.
    Reference,
    /// One image per view; a single image applies to every view.
    Images(Vec<Image>),
}

/// Offline stand-in for the denoiser. The score of an image `x` is the
/// gradient of `|x - T|^2`, i.e. `2 (x - T)`, for a fixed target `T`.
#[derive(Debug, Clone)]
pub struct MockProvider {
    target: MockTarget,
}

impl MockProvider {
    pub fn new(targets: Vec<Image>) -> Self {
        Self {
            target: MockTarget::Images(targets),
        }
    }

    /// Uses each view's reference render as its target.
    pub fn reference_targets() -> Self {
        Self {
            target: MockTarget::Reference,
        }
    }

    fn target<'a>(&'a self, request: &'a GuidanceRequest, view: usize) -> Result<&'a Image, GuidanceError> {
        let t = match &self.target {
            MockTarget::Reference => &request.ref_images[view],
            MockTarget::Images(imgs) if imgs.len() == 1 => &imgs[0],
            MockTarget::Images(imgs) => imgs.get(view).ok_or_else(|| {
                GuidanceError::Shape(format!("mock has {} targets, request has {} views", imgs.len(), request.num_views()))
            })?,
        };
        if t.size() != request.edit_images[view].size() {
            return Err(GuidanceError::Shape(format!(
                "mock target is {0}x{0}, view {view} is {1}x{1}",
                t.size(),
                request.edit_images[view].size()
            )));
        }
        Ok(t)
    }
}

fn squared_distance(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl GuidanceProvider for MockProvider {
    fn evaluate(&self, request: &GuidanceRequest) -> Result<ProviderOutput, GuidanceError> {
        let mut gradients = Vec::with_capacity(request.num_views());
        let mut losses = Vec::with_capacity(request.num_views());
        for view in 0..request.num_views() {
            let target = self.target(request, view)?;
            let edit = &request.edit_images[view];
            let reference = &request.ref_images[view];
            let data = match request.mode {
                GuidanceMode::Dds => edit
                    .data()
                    .iter()
                    .zip(reference.data())
                    .zip(target.data())
                    .map(|((e, r), t)| 2.0 * (e - t) - 2.0 * (r - t))
                    .collect(),
                GuidanceMode::Sds => edit.data().iter().zip(target.data()).map(|(e, t)| 2.0 * (e - t)).collect(),
            };
            let loss = match request.mode {
                GuidanceMode::Dds => squared_distance(edit, target) - squared_distance(reference, target),
                GuidanceMode::Sds => squared_distance(edit, target),
            };
            gradients.push(Image::from_data(edit.size(), data).expect("same size as edit"));
            losses.push(loss);
        }
        let mid = 0.5 * (request.timestep_range.0 + request.timestep_range.1);
        Ok(ProviderOutput {
            gradients,
            timesteps: vec![mid; request.num_views()],
            losses: Some(losses),
        })
    }

    fn name(&self) -> &str {
        "mock"
    }
}

/// Little-endian float32 bytes of `H x W x 3` row-major pixels, base64 encoded.
pub fn encode_image(img: &Image) -> String {
    let mut bytes = Vec::with_capacity(img.data().len() * 4);
    for &x in img.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_image(encoded: &str, size: usize) -> Result<Image, GuidanceError> {
    let bytes = B64
        .decode(encoded)
        .map_err(|e| GuidanceError::Malformed(format!("base64: {e}")))?;
    if bytes.len() != size * size * 3 * 4 {
        return Err(GuidanceError::Shape(format!(
            "image payload has {} bytes, expected {} for {size}x{size}x3 float32",
            bytes.len(),
            size * size * 12
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Image::from_data(size, data).expect("length checked"))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireRequest {
    pub prompt: String,
    pub mode: GuidanceMode,
    pub guidance_scale: f64,
    pub seed: u64,
    pub timestep_range: [f64; 2],
    pub azimuths: Vec<f64>,
    pub view_prompt_augment: bool,
    pub edit_images: Vec<String>,
    pub ref_images: Vec<String>,
}

impl WireRequest {
    pub fn from_request(req: &GuidanceRequest) -> Self {
        Self {
            prompt: req.prompt.clone(),
            mode: req.mode,
            guidance_scale: req.guidance_scale,
            seed: req.seed,
            timestep_range: [req.timestep_range.0, req.timestep_range.1],
            azimuths: req.camera_azimuths.clone(),
            view_prompt_augment: req.view_prompt_augment,
            edit_images: req.edit_images.iter().map(encode_image).collect(),
            ref_images: req.ref_images.iter().map(encode_image).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireResponse {
    pub version: String,
    pub gradients: Vec<String>,
    pub timesteps: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HealthResponse {
    pub status: String,
    #[serde(default)]
    pub model: String,
}

/// Client for a remote denoiser speaking the `dds/1` protocol.
pub struct ServiceProvider {
    base_url: String,
    agent: ureq::Agent,
    max_retries: u32,
    backoff: Duration,
    model: String,
}

impl std::fmt::Debug for ServiceProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceProvider")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .finish()
    }
}

/// Connects to the service named by the config (or the environment
/// override) and checks its health endpoint.
pub fn service_provider(config: &GuidanceConfig) -> Result<ServiceProvider, GuidanceError> {
    let url = config
        .resolved_url()
        .ok_or_else(|| GuidanceError::Unavailable("no service URL configured".into()))?;
    ServiceProvider::connect(
        &url,
        Duration::from_secs_f64(config.timeout_secs),
        config.max_retries,
        Duration::from_millis(config.backoff_ms),
    )
}

impl ServiceProvider {
    pub fn connect(
        url: &str,
        timeout: Duration,
        max_retries: u32,
        backoff: Duration,
    ) -> Result<Self, GuidanceError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .proxy(None)
            .build()
            .into();
        let mut provider = Self {
            base_url: url.trim_end_matches('/').to_string(),
            agent,
            max_retries,
            backoff,
            model: String::new(),
        };
        let health = provider.with_retries(|p| p.health())?;
        if health.status != "ok" {
            return Err(GuidanceError::Unavailable(format!("service status `{}`", health.status)));
        }
        provider.model = health.model;
        Ok(provider)
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    fn with_retries<T>(&self, mut f: impl FnMut(&Self) -> Result<T, GuidanceError>) -> Result<T, GuidanceError> {
        let mut attempt = 0;
        loop {
            match f(self) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    log::warn!("guidance request failed (attempt {}): {e}", attempt + 1);
                    std::thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn health(&self) -> Result<HealthResponse, GuidanceError> {
        let mut resp = self
            .agent
            .get(format!("{}/v1/health", self.base_url))
            .call()
            .map_err(|e| GuidanceError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(GuidanceError::Unavailable(format!("health returned HTTP {status}")));
        }
        resp.body_mut()
            .read_json()
            .map_err(|e| GuidanceError::Malformed(e.to_string()))
    }

    fn post(&self, body: &WireRequest) -> Result<WireResponse, GuidanceError> {
        let mut resp = self
            .agent
            .post(format!("{}/v1/dds", self.base_url))
            .send_json(body)
            .map_err(|e| GuidanceError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_string()
            .map_err(|e| GuidanceError::Unavailable(e.to_string()))?;
        match status {
            200 => {}
            500..=599 => return Err(GuidanceError::Unavailable(format!("HTTP {status}: {text}"))),
            _ => return Err(GuidanceError::Shape(format!("HTTP {status}: {text}"))),
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| GuidanceError::Malformed(e.to_string()))?;
        if parsed.version != PROTOCOL_VERSION {
            return Err(GuidanceError::Protocol {
                expected: PROTOCOL_VERSION.into(),
                got: parsed.version,
            });
        }
        Ok(parsed)
    }
}

impl GuidanceProvider for ServiceProvider {
    fn evaluate(&self, request: &GuidanceRequest) -> Result<ProviderOutput, GuidanceError> {
        let body = WireRequest::from_request(request);
        let resp = self.with_retries(|p| p.post(&body))?;
        if resp.gradients.len() != request.num_views() {
            return Err(GuidanceError::Shape(format!(
                "service returned {} gradients for {} views",
                resp.gradients.len(),
                request.num_views()
            )));
        }
        let gradients = resp
            .gradients
            .iter()
            .zip(&request.edit_images)
            .map(|(g, e)| decode_image(g, e.size()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ProviderOutput {
            gradients,
            timesteps: resp.timesteps,
            losses: None,
        })
    }

    fn name(&self) -> &str {
        "service"
    }
}
