//! Small deterministic software rasterizer with analytic gradients.
//!
//! Visibility inside the silhouette is hard (nearest face at the pixel
//! center wins). Pixels just outside the silhouette receive fractional
//! coverage `1 - d`, where `d < 1` is the screen distance in pixels to the
//! nearest triangle, so outline positions receive gradients.

use std::path::Path;

use nalgebra::Vector2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mesh::Vec3;

pub const AMBIENT: f64 = 0.2;
pub const DIFFUSE: f64 = 0.8;
pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];
/// Vertex color used when a mesh carries no colors.
pub const DEFAULT_COLOR: [f64; 3] = [0.8, 0.8, 0.8];
/// Faces with a vertex closer than this to the eye plane are skipped.
pub const NEAR_PLANE: f64 = 1e-3;

type Vec2 = Vector2<f64>;

/// Square RGB image, row-major, three channels per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn filled(size: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Self { size, data }
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; size * size * 3],
        }
    }

    pub fn from_data(size: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == size * size * 3).then_some(Self { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.size + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.size + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), image::ImageError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.size as u32, self.size as u32, bytes)
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
    }

    /// Reads a square PNG (any color type) as RGB in [0, 1].
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, String> {
        let img = image::open(path.as_ref()).map_err(|e| e.to_string())?.to_rgb8();
        if img.width() != img.height() {
            return Err(format!("image is {}x{}, expected square", img.width(), img.height()));
        }
        let size = img.width() as usize;
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Ok(Self { size, data })
    }
}

/// Pinhole camera orbiting `look_at`. Azimuth 0 looks down -Z from +Z;
/// elevation 90 looks straight down from +Y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub look_at: [f64; 3],
    pub fov_y: f64,
    pub image_size: usize,
}

#[derive(Debug, Clone, Copy)]
struct CameraFrame {
    eye: Vec3,
    right: Vec3,
    up: Vec3,
    forward: Vec3,
    /// pixels per unit of x/z
    focal: f64,
    half: f64,
}

impl CameraFrame {
    fn new(cam: &Camera) -> Self {
        let (az, el) = (cam.azimuth.to_radians(), cam.elevation.to_radians());
        let dir = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
        let eye = Vec3::from(cam.look_at) + dir * cam.distance;
        let forward = -dir;
        // horizontal, so it stays defined at elevation 90
        let right = Vec3::new(az.cos(), 0.0, -az.sin());
        let up = right.cross(&forward);
        let half = cam.image_size as f64 / 2.0;
        let focal = half / (cam.fov_y.to_radians() / 2.0).tan();
        Self {
            eye,
            right,
            up,
            forward,
            focal,
            half,
        }
    }

    /// (pixel x, pixel y, depth along the view direction)
    fn project(&self, p: &Vec3) -> (Vec2, f64) {
        let rel = p - self.eye;
        let (x, y, z) = (rel.dot(&self.right), rel.dot(&self.up), rel.dot(&self.forward));
        (
            Vec2::new(self.half + self.focal * x / z, self.half - self.focal * y / z),
            z,
        )
    }

    /// Rows: d(px)/dp and d(py)/dp.
    fn project_jacobian(&self, p: &Vec3) -> (Vec3, Vec3) {
        let rel = p - self.eye;
        let (x, y, z) = (rel.dot(&self.right), rel.dot(&self.up), rel.dot(&self.forward));
        let dpx = (self.right / z - self.forward * (x / (z * z))) * self.focal;
        let dpy = -(self.up / z - self.forward * (y / (z * z))) * self.focal;
        (dpx, dpy)
    }

    /// Direction from the surface towards the light (the camera).
    fn light(&self) -> Vec3 {
        -self.forward
    }
}

impl Camera {
    pub fn new(azimuth: f64, elevation: f64, distance: f64, look_at: Vec3, settings: &ViewSettings) -> Self {
        Self {
            azimuth,
            elevation,
            distance,
            look_at: [look_at.x, look_at.y, look_at.z],
            fov_y: settings.fov_y,
            image_size: settings.image_size,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.distance > 0.0 && self.fov_y > 0.0 && self.fov_y < 180.0 && self.image_size >= 8
    }

    pub fn eye(&self) -> Vec3 {
        CameraFrame::new(self).eye
    }

    /// Pixel coordinates (continuous, pixel centers at +0.5) and depth.
    pub fn project(&self, p: &Vec3) -> ([f64; 2], f64) {
        let (s, z) = CameraFrame::new(self).project(p);
        ([s.x, s.y], z)
    }
}

/// Fields of a camera that do not vary between sampled views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSettings {
    pub fov_y: f64,
    pub image_size: usize,
}

impl Default for ViewSettings {
    fn default() -> Self {
        Self {
            fov_y: 45.0,
            image_size: 64,
        }
    }
}

/// Uniform random orbit cameras: azimuth in [-180, 180], elevation in
/// [0, 90], distance in [d0, d0 + 2]. Each camera consumes exactly three
/// `f64` draws from `rng`, in that order.
pub fn sample_cameras<R: Rng + ?Sized>(
    rng: &mut R,
    d0: f64,
    look_at: Vec3,
    count: usize,
    settings: &ViewSettings,
) -> Vec<Camera> {
    (0..count)
        .map(|_| {
            let azimuth = -180.0 + 360.0 * rng.random::<f64>();
            let elevation = 90.0 * rng.random::<f64>();
            let distance = d0 + 2.0 * rng.random::<f64>();
            Camera::new(azimuth, elevation, distance, look_at, settings)
        })
        .collect()
}

/// Front, right, back and left views at elevation 0 and distance `d0`.
pub fn canonical_cameras(d0: f64, look_at: Vec3, settings: &ViewSettings) -> Vec<Camera> {
    [0.0, 90.0, 180.0, -90.0]
        .iter()
        .map(|&az| Camera::new(az, 0.0, d0, look_at, settings))
        .collect()
}

/// Geometry to render: positions, triangles and optional per-vertex colors.
#[derive(Debug, Clone, Copy)]
pub struct Scene<'a> {
    pub vertices: &'a [Vec3],
    pub faces: &'a [[usize; 3]],
    pub colors: Option<&'a [Vec3]>,
}

impl<'a> Scene<'a> {
    pub fn new(vertices: &'a [Vec3], faces: &'a [[usize; 3]], colors: Option<&'a [Vec3]>) -> Self {
        Self {
            vertices,
            faces,
            colors,
        }
    }

    fn color(&self, v: usize) -> Vec3 {
        match self.colors {
            Some(c) => c[v],
            None => Vec3::from(DEFAULT_COLOR),
        }
    }
}

/// What produced a pixel's color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelSample {
    Background,
    /// Pixel center inside `face`, with screen-space barycentric coordinates.
    Interior { face: usize, bary: [f64; 3] },
    /// Pixel center within one pixel outside `face`; nearest point lies on
    /// the edge between local corners `edge.0` and `edge.1` at parameter `t`.
    Band {
        face: usize,
        edge: (usize, usize),
        t: f64,
        distance: f64,
    },
}

#[derive(Debug, Clone)]
pub struct RenderedView {
    pub rgb: Image,
    pub aux: Vec<PixelSample>,
    pub camera: Camera,
}

fn area2(a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Gradients of `area2(a, b, c)` with respect to a, b and c.
fn area2_grad(a: &Vec2, b: &Vec2, c: &Vec2) -> [Vec2; 3] {
    [
        Vec2::new(b.y - c.y, c.x - b.x),
        Vec2::new(c.y - a.y, a.x - c.x),
        Vec2::new(a.y - b.y, b.x - a.x),
    ]
}

/// Closest point on segment [a, b] to p: (parameter t, distance).
fn segment_distance(p: &Vec2, a: &Vec2, b: &Vec2) -> (f64, f64) {
    let e = b - a;
    let len2 = e.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&e) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (t, (p - (a + e * t)).norm())
}

struct ProjectedFace {
    screen: [Vec2; 3],
    depth: [f64; 3],
    area: f64,
}

fn project_face(frame: &CameraFrame, scene: &Scene, face: &[usize; 3]) -> Option<ProjectedFace> {
    let mut screen = [Vec2::zeros(); 3];
    let mut depth = [0.0; 3];
    for k in 0..3 {
        let (s, z) = frame.project(&scene.vertices[face[k]]);
        if !(z > NEAR_PLANE) {
            return None;
        }
        screen[k] = s;
        depth[k] = z;
    }
    let area = area2(&screen[0], &screen[1], &screen[2]);
    (area.abs() > 1e-12).then_some(ProjectedFace { screen, depth, area })
}

fn shade_factor(frame: &CameraFrame, scene: &Scene, face: &[usize; 3]) -> f64 {
    let v = scene.vertices;
    let c = (v[face[1]] - v[face[0]]).cross(&(v[face[2]] - v[face[0]]));
    let n = c.try_normalize(0.0).unwrap_or_else(Vec3::zeros);
    AMBIENT + DIFFUSE * n.dot(&frame.light()).clamp(0.0, 1.0)
}

/// Renders shaded RGB plus the per-pixel record needed by [`render_backward`].
pub fn render(scene: &Scene, camera: &Camera) -> RenderedView {
    let frame = CameraFrame::new(camera);
    let size = camera.image_size;
    let mut depth_buf = vec![f64::INFINITY; size * size];
    let mut aux = vec![PixelSample::Background; size * size];
    // (distance, back-facing, depth) of the current band candidate
    let mut band_key = vec![(f64::INFINITY, f64::INFINITY, f64::INFINITY); size * size];
    let mut band = vec![PixelSample::Background; size * size];

    for (f, face) in scene.faces.iter().enumerate() {
        let Some(pf) = project_face(&frame, scene, face) else { continue };
        let [s0, s1, s2] = pf.screen;
        let lo = s0.inf(&s1).inf(&s2);
        let hi = s0.sup(&s1).sup(&s2);
        let x0 = ((lo.x - 1.0).floor().max(0.0)) as usize;
        let y0 = ((lo.y - 1.0).floor().max(0.0)) as usize;
        let x1 = ((hi.x + 1.0).ceil().min(size as f64)).max(0.0) as usize;
        let y1 = ((hi.y + 1.0).ceil().min(size as f64)).max(0.0) as usize;
        for py in y0..y1 {
            for px in x0..x1 {
                let p = Vec2::new(px as f64 + 0.5, py as f64 + 0.5);
                let idx = py * size + px;
                let bary = [
                    area2(&p, &s1, &s2) / pf.area,
                    area2(&p, &s2, &s0) / pf.area,
                    area2(&p, &s0, &s1) / pf.area,
                ];
                if bary.iter().all(|&b| b >= 0.0) {
                    let inv_z: f64 = (0..3).map(|k| bary[k] / pf.depth[k]).sum();
                    let z = 1.0 / inv_z;
                    if z < depth_buf[idx] {
                        depth_buf[idx] = z;
                        aux[idx] = PixelSample::Interior { face: f, bary };
                    }
                } else {
                    let mut best: Option<((usize, usize), f64, f64)> = None;
                    for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                        let (t, d) = segment_distance(&p, &pf.screen[i], &pf.screen[j]);
                        if best.is_none_or(|(_, _, bd)| d < bd) {
                            best = Some(((i, j), t, d));
                        }
                    }
                    let ((i, j), t, d) = best.expect("three edges");
                    if d < 1.0 && d > 0.0 {
                        let z = 1.0 / ((1.0 - t) / pf.depth[i] + t / pf.depth[j]);
                        // counter-clockwise in world space flips to clockwise in pixel space
                        let back = if pf.area < 0.0 { 0.0 } else { 1.0 };
                        let key = band_key[idx];
                        let better = if (d - key.0).abs() > 1e-9 {
                            d < key.0
                        } else if back != key.1 {
                            back < key.1
                        } else {
                            z < key.2 * (1.0 - 1e-12)
                        };
                        if better {
                            band_key[idx] = (d, back, z);
                            band[idx] = PixelSample::Band {
                                face: f,
                                edge: (i, j),
                                t,
                                distance: d,
                            };
                        }
                    }
                }
            }
        }
    }

    let mut rgb = Image::filled(size, BACKGROUND);
    let bg = Vec3::from(BACKGROUND);
    for idx in 0..size * size {
        if aux[idx] == PixelSample::Background {
            aux[idx] = band[idx];
        }
        let (px, py) = (idx % size, idx / size);
        match aux[idx] {
            PixelSample::Background => {}
            PixelSample::Interior { face, bary } => {
                let fv = &scene.faces[face];
                let base: Vec3 = (0..3).map(|k| scene.color(fv[k]) * bary[k]).sum();
                let c = base * shade_factor(&frame, scene, fv);
                rgb.set_pixel(px, py, clamp_rgb(&c));
            }
            PixelSample::Band {
                face,
                edge,
                t,
                distance,
            } => {
                let fv = &scene.faces[face];
                let base = scene.color(fv[edge.0]) * (1.0 - t) + scene.color(fv[edge.1]) * t;
                let alpha = 1.0 - distance;
                let c = base * shade_factor(&frame, scene, fv) * alpha + bg * (1.0 - alpha);
                rgb.set_pixel(px, py, clamp_rgb(&c));
            }
        }
    }

    RenderedView {
        rgb,
        aux,
        camera: *camera,
    }
}

/// Rounding guard only: shaded colors are convex combinations of values in [0, 1].
fn clamp_rgb(c: &Vec3) -> [f64; 3] {
    [c.x.clamp(0.0, 1.0), c.y.clamp(0.0, 1.0), c.z.clamp(0.0, 1.0)]
}

/// Accumulates the gradient of the scalar `n . l` shading term onto the
/// face's three vertices, given `upstream = dL/d(n . l)`.
fn backprop_normal(scene: &Scene, face: &[usize; 3], light: &Vec3, upstream: f64, out: &mut [Vec3]) {
    let v = scene.vertices;
    let e1 = v[face[1]] - v[face[0]];
    let e2 = v[face[2]] - v[face[0]];
    let c = e1.cross(&e2);
    let len = c.norm();
    if len == 0.0 {
        return;
    }
    let n = c / len;
    let g_n = light * upstream;
    let g_c = (g_n - n * g_n.dot(&n)) / len;
    let g1 = e2.cross(&g_c);
    let g2 = g_c.cross(&e1);
    out[face[1]] += g1;
    out[face[2]] += g2;
    out[face[0]] -= g1 + g2;
}

/// Vector-Jacobian product of [`render`]: maps per-pixel RGB gradients to
/// per-vertex position gradients. `scene` must be the one that produced `view`.
pub fn render_backward(view: &RenderedView, grad_rgb: &Image, scene: &Scene) -> Vec<Vec3> {
    let frame = CameraFrame::new(&view.camera);
    let size = view.camera.image_size;
    assert_eq!(grad_rgb.size(), size, "gradient image size must match the view");
    let light = frame.light();
    let bg = Vec3::from(BACKGROUND);
    let mut out = vec![Vec3::zeros(); scene.vertices.len()];
    // screen-space gradient per face corner is pushed through the projection at the end of each pixel
    for (idx, sample) in view.aux.iter().enumerate() {
        let g = {
            let p = grad_rgb.pixel(idx % size, idx / size);
            Vec3::new(p[0], p[1], p[2])
        };
        if g == Vec3::zeros() {
            continue;
        }
        let p = Vec2::new((idx % size) as f64 + 0.5, (idx / size) as f64 + 0.5);
        match *sample {
            PixelSample::Background => {}
            PixelSample::Interior { face, bary } => {
                let fv = &scene.faces[face];
                let Some(pf) = project_face(&frame, scene, fv) else { continue };
                let colors = [scene.color(fv[0]), scene.color(fv[1]), scene.color(fv[2])];
                let base: Vec3 = (0..3).map(|k| colors[k] * bary[k]).sum();
                let shade = shade_factor(&frame, scene, fv);

                let d_shade = g.dot(&base);
                let n_dot_l = (shade - AMBIENT) / DIFFUSE;
                if n_dot_l > 0.0 && n_dot_l < 1.0 {
                    backprop_normal(scene, fv, &light, DIFFUSE * d_shade, &mut out);
                }

                let d_bary: [f64; 3] = std::array::from_fn(|k| shade * g.dot(&colors[k]));
                let s = &pf.screen;
                let grad_area = area2_grad(&s[0], &s[1], &s[2]);
                let mut d_screen = [Vec2::zeros(); 3];
                for i in 0..3 {
                    let (j, k) = ((i + 1) % 3, (i + 2) % 3);
                    // bary_i = area2(p, s_j, s_k) / area
                    let gi = area2_grad(&p, &s[j], &s[k]);
                    let mut partial = [Vec2::zeros(); 3];
                    partial[j] = gi[1];
                    partial[k] = gi[2];
                    for m in 0..3 {
                        d_screen[m] += (partial[m] - grad_area[m] * bary[i]) * (d_bary[i] / pf.area);
                    }
                }
                push_screen_grad(&frame, scene, fv, &d_screen, &mut out);
            }
            PixelSample::Band {
                face,
                edge,
                t,
                distance,
            } => {
                let fv = &scene.faces[face];
                let Some(pf) = project_face(&frame, scene, fv) else { continue };
                let (ca, cb) = (scene.color(fv[edge.0]), scene.color(fv[edge.1]));
                let base = ca * (1.0 - t) + cb * t;
                let shade = shade_factor(&frame, scene, fv);
                let alpha = 1.0 - distance;

                let d_alpha = g.dot(&(base * shade - bg));
                let d_shade = alpha * g.dot(&base);
                let d_t = alpha * shade * g.dot(&(cb - ca));
                let d_dist = -d_alpha;

                let n_dot_l = (shade - AMBIENT) / DIFFUSE;
                if n_dot_l > 0.0 && n_dot_l < 1.0 {
                    backprop_normal(scene, fv, &light, DIFFUSE * d_shade, &mut out);
                }

                let a = pf.screen[edge.0];
                let b = pf.screen[edge.1];
                let e = b - a;
                let len2 = e.norm_squared();
                let q = a + e * t;
                let r = p - q;
                let mut d_screen = [Vec2::zeros(); 3];
                d_screen[edge.0] += -r * ((1.0 - t) / distance) * d_dist;
                d_screen[edge.1] += -r * (t / distance) * d_dist;
                if t > 0.0 && t < 1.0 {
                    let w = p - a;
                    let dt_da = (-e - w + e * (2.0 * t)) / len2;
                    let dt_db = (w - e * (2.0 * t)) / len2;
                    d_screen[edge.0] += dt_da * d_t;
                    d_screen[edge.1] += dt_db * d_t;
                }
                push_screen_grad(&frame, scene, fv, &d_screen, &mut out);
            }
        }
    }
    out
}

fn push_screen_grad(frame: &CameraFrame, scene: &Scene, face: &[usize; 3], d_screen: &[Vec2; 3], out: &mut [Vec3]) {
    for k in 0..3 {
        let (dpx, dpy) = frame.project_jacobian(&scene.vertices[face[k]]);
        out[face[k]] += dpx * d_screen[k].x + dpy * d_screen[k].y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn settings(size: usize) -> ViewSettings {
        ViewSettings {
            fov_y: 45.0,
            image_size: size,
        }
    }

    #[test]
    fn camera_sampling_is_seeded() {
        let s = settings(64);
        let a = sample_cameras(&mut ChaCha8Rng::seed_from_u64(5), 3.0, Vec3::zeros(), 4, &s);
        let b = sample_cameras(&mut ChaCha8Rng::seed_from_u64(5), 3.0, Vec3::zeros(), 4, &s);
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        // three draws per camera
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _ = sample_cameras(&mut rng, 3.0, Vec3::zeros(), 1, &s);
        let mut reference = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let _: f64 = reference.random();
        }
        assert_eq!(rng.random::<u64>(), reference.random::<u64>());
    }

    #[test]
    fn camera_frame_orthonormal_at_zenith() {
        let cam = Camera::new(37.0, 90.0, 2.0, Vec3::zeros(), &settings(32));
        let f = CameraFrame::new(&cam);
        assert!((f.right.norm() - 1.0).abs() < 1e-12);
        assert!((f.up.norm() - 1.0).abs() < 1e-12);
        assert!(f.right.dot(&f.forward).abs() < 1e-12);
        assert!(f.up.dot(&f.forward).abs() < 1e-12);
        // look-at point projects to the image center
        let (s, z) = cam.project(&Vec3::zeros());
        assert!((s[0] - 16.0).abs() < 1e-12 && (s[1] - 16.0).abs() < 1e-12);
        assert!((z - 2.0).abs() < 1e-12);
    }

    #[test]
    fn head_on_red_triangle() {
        // camera at azimuth 0 sits on +Z looking at the origin; the triangle faces +Z
        let cam = Camera::new(0.0, 0.0, 2.0, Vec3::zeros(), &settings(16));
        let verts = vec![Vec3::new(-10.0, -10.0, 0.0), Vec3::new(10.0, -10.0, 0.0), Vec3::new(0.0, 10.0, 0.0)];
        let colors = vec![Vec3::new(1.0, 0.0, 0.0); 3];
        let faces = [[0, 1, 2]];
        let view = render(&Scene::new(&verts, &faces, Some(&colors)), &cam);
        let c = view.rgb.pixel(8, 8);
        // (1, 0, 0) * (0.2 + 0.8 * 1)
        assert!((c[0] - 1.0).abs() < 1e-12 && c[1].abs() < 1e-12 && c[2].abs() < 1e-12);
        assert!(view.rgb.data().iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
    }

    #[test]
    fn empty_scene_is_background() {
        let cam = Camera::new(10.0, 20.0, 3.0, Vec3::zeros(), &settings(8));
        let view = render(&Scene::new(&[], &[], None), &cam);
        assert_eq!(view.rgb, Image::filled(8, BACKGROUND));
        assert!(view.aux.iter().all(|s| *s == PixelSample::Background));
    }

    #[test]
    fn sphere_front_and_back_views_agree() {
        let mesh = icosphere(3);
        let s = settings(32);
        let scene = Scene::new(mesh.vertices(), mesh.faces(), None);
        let front = render(&scene, &Camera::new(0.0, 0.0, 3.0, Vec3::zeros(), &s));
        let back = render(&scene, &Camera::new(180.0, 0.0, 3.0, Vec3::zeros(), &s));
        // The icosphere is invariant under a half-turn about Y, so the views coincide.
        for (i, (a, b)) in front.rgb.data().iter().zip(back.rgb.data()).enumerate() {
            assert!((a - b).abs() < 1e-6, "{a} vs {b} at {i}: {:?} {:?}", front.aux[i / 3], back.aux[i / 3]);
        }
    }

    #[test]
    fn render_is_pure() {
        let mesh = icosphere(2);
        let scene = Scene::new(mesh.vertices(), mesh.faces(), None);
        let cam = Camera::new(33.0, 12.0, 3.5, Vec3::zeros(), &settings(24));
        assert_eq!(render(&scene, &cam).rgb, render(&scene, &cam).rgb);
    }

    fn two_triangle_scene() -> (Vec<Vec3>, Vec<[usize; 3]>, Vec<Vec3>) {
        let verts = vec![
            Vec3::new(-0.8, -0.7, 0.1),
            Vec3::new(0.9, -0.6, -0.2),
            Vec3::new(0.1, 0.8, 0.3),
            Vec3::new(1.0, 0.7, -0.4),
        ];
        let faces = vec![[0, 1, 2], [1, 3, 2]];
        let colors = vec![
            Vec3::new(0.9, 0.2, 0.1),
            Vec3::new(0.1, 0.8, 0.3),
            Vec3::new(0.2, 0.3, 0.9),
            Vec3::new(0.7, 0.7, 0.1),
        ];
        (verts, faces, colors)
    }

    #[test]
    fn zero_gradient_in_zero_out() {
        let (v, f, c) = two_triangle_scene();
        let scene = Scene::new(&v, &f, Some(&c));
        let view = render(&scene, &Camera::new(15.0, 10.0, 3.0, Vec3::zeros(), &settings(32)));
        let g = render_backward(&view, &Image::zeros(32), &scene);
        assert!(g.iter().all(|x| *x == Vec3::zeros()));
    }

    #[test]
    fn interior_pixels_match_finite_differences() {
        let (v, f, c) = two_triangle_scene();
        let cam = Camera::new(15.0, 10.0, 3.0, Vec3::zeros(), &settings(32));
        let view = render(&Scene::new(&v, &f, Some(&c)), &cam);
        let interior: Vec<usize> = view
            .aux
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                PixelSample::Interior { bary, .. } if bary.iter().all(|&b| b > 0.05) => Some(i),
                _ => None,
            })
            .collect();
        assert!(interior.len() > 20);
        let weights = [0.3, -0.5, 0.8];
        for &pix in interior.iter().step_by(interior.len() / 5).take(5) {
            let mut grad = Image::zeros(32);
            grad.data_mut()[3 * pix..3 * pix + 3].copy_from_slice(&weights);
            let analytic = render_backward(&view, &grad, &Scene::new(&v, &f, Some(&c)));
            let loss = |verts: &[Vec3]| {
                let r = render(&Scene::new(verts, &f, Some(&c)), &cam);
                (0..3).map(|k| r.rgb.data()[3 * pix + k] * weights[k]).sum::<f64>()
            };
            let h = 1e-4;
            let mut fd = vec![Vec3::zeros(); v.len()];
            for i in 0..v.len() {
                for d in 0..3 {
                    let mut p = v.clone();
                    p[i][d] += h;
                    let mut m = v.clone();
                    m[i][d] -= h;
                    fd[i][d] = (loss(&p) - loss(&m)) / (2.0 * h);
                }
            }
            let num: f64 = fd.iter().zip(&analytic).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt();
            assert!(den > 0.0);
            assert!(num / den < 1e-2, "pixel {pix}: rel err {}", num / den);
        }
    }

    #[test]
    fn band_pixels_have_gradients() {
        let (v, f, c) = two_triangle_scene();
        let scene = Scene::new(&v, &f, Some(&c));
        let view = render(&scene, &Camera::new(15.0, 10.0, 3.0, Vec3::zeros(), &settings(32)));
        let band = view.aux.iter().position(|s| matches!(s, PixelSample::Band { .. })).unwrap();
        let mut grad = Image::zeros(32);
        grad.data_mut()[3 * band] = 1.0;
        let g = render_backward(&view, &grad, &scene);
        assert!(g.iter().any(|x| x.norm() > 0.0));
    }

    #[test]
    fn occluded_face_gets_no_gradient() {
        // large near quad hides a small far triangle entirely
        let verts = vec![
            Vec3::new(-2.0, -2.0, 0.5),
            Vec3::new(2.0, -2.0, 0.5),
            Vec3::new(2.0, 2.0, 0.5),
            Vec3::new(-2.0, 2.0, 0.5),
            Vec3::new(-0.3, -0.3, -0.5),
            Vec3::new(0.3, -0.3, -0.5),
            Vec3::new(0.0, 0.3, -0.5),
        ];
        let faces = [[0, 1, 2], [0, 2, 3], [4, 5, 6]];
        let scene = Scene::new(&verts, &faces, None);
        let view = render(&scene, &Camera::new(0.0, 0.0, 3.0, Vec3::zeros(), &settings(16)));
        let g = render_backward(&view, &Image::filled(16, [1.0, 1.0, 1.0]), &scene);
        for v in 4..7 {
            assert_eq!(g[v], Vec3::zeros());
        }
    }
}
