//! Procedural synthetic scenes rendered by ray casting.
//!
//! Scenes are built from planes, oriented boxes and spheres with smooth
//! world-space textures and Lambertian shading under one directional light.
//! Shading does not depend on the viewpoint, so brightness is constant across
//! frames and a frame can be reconstructed from its neighbours by warping.
//! Depth is z-depth (distance along the optical axis).

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_from_axis_angle, Intrinsics, Pose};
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Closed box room viewed from inside, with furniture-sized objects.
    Room,
    /// Long narrow hallway with forward camera motion.
    Corridor,
    /// Ground plane, distant backdrop, building and car sized boxes.
    OutdoorStrip,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Room, Layout::Corridor, Layout::OutdoorStrip];

    pub fn name(self) -> &'static str {
        match self {
            Layout::Room => "room",
            Layout::Corridor => "corridor",
            Layout::OutdoorStrip => "outdoor-strip",
        }
    }

    /// Depth range that contains every surface of the layout.
    pub fn default_depth_range(self) -> (f64, f64) {
        match self {
            Layout::Room => (0.2, 10.0),
            Layout::Corridor => (0.2, 25.0),
            Layout::OutdoorStrip => (0.5, 80.0),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown layout `{s}` (expected room, corridor or outdoor-strip)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureStyle {
    Checker,
    Noise,
    Gradient,
    /// Each surface draws one of the other styles.
    Mixed,
}

impl FromStr for TextureStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checker" => Ok(Self::Checker),
            "noise" => Ok(Self::Noise),
            "gradient" => Ok(Self::Gradient),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::InvalidInput(format!(
                "unknown texture style `{s}` (expected checker, noise, gradient or mixed)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub layout: Layout,
    /// Inclusive range for the number of free-standing objects.
    pub objects: (usize, usize),
    pub depth_range: (f64, f64),
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
    pub texture: TextureStyle,
    /// Per-frame bound on camera translation in meters.
    pub max_step_translation: f64,
    /// Per-frame bound on camera rotation in degrees.
    pub max_step_rotation_deg: f64,
}

impl SceneConfig {
    pub fn new(seed: u64, layout: Layout) -> Self {
        Self {
            seed,
            layout,
            objects: (3, 7),
            depth_range: layout.default_depth_range(),
            frames: 10,
            width: 160,
            height: 128,
            focal_scale: 0.9,
            texture: TextureStyle::Mixed,
            max_step_translation: 0.05,
            max_step_rotation_deg: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::InvalidInput(format!(
                "depth range must satisfy 0 < min < max, got [{lo}, {hi}]"
            )));
        }
        if self.frames < 3 {
            return Err(Error::InvalidInput(format!(
                "a trajectory needs at least 3 frames, got {}",
                self.frames
            )));
        }
        if self.objects.0 > self.objects.1 {
            return Err(Error::InvalidInput("object count range is reversed".into()));
        }
        if self.width < 2 || self.height < 2 || self.focal_scale <= 0.0 {
            return Err(Error::InvalidInput("image size and focal length must be positive".into()));
        }
        if self.max_step_translation < 0.0 || self.max_step_rotation_deg < 0.0 {
            return Err(Error::InvalidInput("trajectory step bounds must be non-negative".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.width, self.height, self.focal_scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    /// RGB in `[0, 1]`.
    pub image: Tensor,
    /// Dense z-depth in meters.
    pub depth: Tensor,
    /// World-to-camera.
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTriplet {
    pub prev: RenderedFrame,
    pub target: RenderedFrame,
    pub next: RenderedFrame,
    /// Target camera to previous camera.
    pub pose_prev: Pose,
    /// Target camera to next camera.
    pub pose_next: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    Flat,
    /// Smoothed checkerboard with the given cell size in meters.
    Checker { cell: f64 },
    /// Two octaves of value noise with the given base frequency in 1/m.
    Noise { frequency: f64, seed: u64 },
    /// Sinusoidal bands along a direction.
    Gradient { direction: Vector3<f64>, period: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Material {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub pattern: Pattern,
}

impl Material {
    pub fn flat(gray: f64) -> Self {
        Self {
            base: [gray; 3],
            accent: [gray; 3],
            pattern: Pattern::Flat,
        }
    }

    fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let t = match &self.pattern {
            Pattern::Flat => 0.0,
            Pattern::Checker { cell } => {
                let s = (std::f64::consts::PI / cell) * p;
                let v = s.x.sin() * s.y.sin() * s.z.sin();
                0.5 + 0.5 * (3.0 * v).tanh()
            }
            Pattern::Noise { frequency, seed } => {
                0.65 * value_noise(p * *frequency, *seed)
                    + 0.35 * value_noise(p * (2.7 * frequency), seed.wrapping_add(1))
            }
            Pattern::Gradient { direction, period } => {
                0.5 + 0.5 * (std::f64::consts::TAU * direction.dot(p) / period).sin()
            }
        };
        std::array::from_fn(|c| self.base[c] + t * (self.accent[c] - self.base[c]))
    }
}

/// Smooth 3D value noise in `[0, 1]`.
fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let cell = p.map(f64::floor);
    let f = p - cell;
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (ix, iy, iz) = (cell.x as i64, cell.y as i64, cell.z as i64);
    let lattice = |dx: i64, dy: i64, dz: i64| -> f64 {
        let mut h = seed ^ 0x2545_f491_4f6c_dd1d;
        for v in [ix + dx, iy + dy, iz + dz] {
            h ^= v as u64;
            h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            h ^= h >> 29;
        }
        (h >> 11) as f64 / (1u64 << 53) as f64
    };
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let x00 = lerp(lattice(0, 0, 0), lattice(1, 0, 0), s.x);
    let x10 = lerp(lattice(0, 1, 0), lattice(1, 1, 0), s.x);
    let x01 = lerp(lattice(0, 0, 1), lattice(1, 0, 1), s.x);
    let x11 = lerp(lattice(0, 1, 1), lattice(1, 1, 1), s.x);
    lerp(lerp(x00, x10, s.y), lerp(x01, x11, s.y), s.z)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Infinite plane through `point` with normal `normal`.
    Plane { point: Vector3<f64>, normal: Vector3<f64> },
    /// Axis-aligned box seen from the inside (room shells).
    Shell { min: Vector3<f64>, max: Vector3<f64> },
    /// Box with half-extents `half`, rotated by `rotation` (local to world).
    Cuboid {
        center: Vector3<f64>,
        half: Vector3<f64>,
        rotation: Matrix3<f64>,
    },
    Sphere { center: Vector3<f64>, radius: f64 },
}

impl Shape {
    /// Nearest hit with ray parameter greater than `t_min`: (t, unit normal).
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64) -> Option<(f64, Vector3<f64>)> {
        match self {
            Shape::Plane { point, normal } => {
                let denom = normal.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = normal.dot(&(point - o)) / denom;
                (t > t_min).then_some((t, *normal))
            }
            Shape::Shell { min, max } => {
                let mut t_exit = f64::INFINITY;
                let mut normal = Vector3::zeros();
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        continue;
                    }
                    let bound = if d[a] > 0.0 { max[a] } else { min[a] };
                    let t = (bound - o[a]) / d[a];
                    if t < t_exit {
                        t_exit = t;
                        normal = Vector3::zeros();
                        normal[a] = -d[a].signum();
                    }
                }
                (t_exit.is_finite() && t_exit > t_min).then_some((t_exit, normal))
            }
            Shape::Cuboid {
                center,
                half,
                rotation,
            } => {
                let rt = rotation.transpose();
                let lo = rt * (o - center);
                let ld = rt * d;
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut n0, mut n1) = (Vector3::zeros(), Vector3::zeros());
                for a in 0..3 {
                    if ld[a].abs() < 1e-15 {
                        if lo[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let mut ta = (-half[a] - lo[a]) / ld[a];
                    let mut tb = (half[a] - lo[a]) / ld[a];
                    let mut na = Vector3::zeros();
                    na[a] = -1.0;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        na[a] = 1.0;
                    }
                    if ta > t0 {
                        t0 = ta;
                        n0 = na;
                    }
                    if tb < t1 {
                        t1 = tb;
                        n1 = -na;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                if t0 > t_min {
                    Some((t0, rotation * n0))
                } else if t1 > t_min {
                    Some((t1, rotation * n1))
                } else {
                    None
                }
            }
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let b = oc.dot(d);
                let a = d.norm_squared();
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [(-b - sq) / a, (-b + sq) / a]
                    .into_iter()
                    .find(|&t| t > t_min)
                    .map(|t| (t, (o + d * t - center) / *radius))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub surfaces: Vec<Surface>,
    /// Unit vector pointing towards the light.
    pub light: Vector3<f64>,
    pub ambient: f64,
    pub depth_range: (f64, f64),
}

impl Scene {
    pub fn new(surfaces: Vec<Surface>, depth_range: (f64, f64)) -> Self {
        Self {
            surfaces,
            light: Vector3::new(0.3, -1.0, -0.4).normalize(),
            ambient: 0.35,
            depth_range,
        }
    }

    /// Render one view. Pixels that hit nothing, or land outside the depth
    /// range, take the nearest range bound; closed layouts never trigger this.
    pub fn render(&self, k: &Intrinsics, pose: &Pose) -> RenderedFrame {
        let (w, h) = (k.width, k.height);
        let cam_to_world = pose.rotation.transpose();
        let origin = -(cam_to_world * pose.translation);
        let (lo, hi) = self.depth_range;
        let mut image = Tensor::zeros(3, h, w);
        let mut depth = Tensor::zeros(1, h, w);
        let n = w * h;
        for y in 0..h {
            for x in 0..w {
                let dir = cam_to_world * k.ray(x as f64, y as f64);
                let hit = self
                    .surfaces
                    .iter()
                    .filter_map(|s| s.shape.intersect(&origin, &dir, 1e-6).map(|(t, nrm)| (t, nrm, s)))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                let i = y * w + x;
                let (z, rgb) = match hit {
                    // The camera-frame ray has unit z, so the ray parameter is z-depth.
                    Some((t, normal, surface)) => {
                        let p = origin + dir * t;
                        let facing = if normal.dot(&dir) > 0.0 { -normal } else { normal };
                        let shade = self.ambient + (1.0 - self.ambient) * facing.dot(&self.light).max(0.0);
                        let albedo = surface.material.albedo(&p);
                        (t, albedo.map(|a| (a * shade).clamp(0.0, 1.0)))
                    }
                    None => (hi, [0.0; 3]),
                };
                depth.data_mut()[i] = z.clamp(lo, hi);
                for (c, v) in rgb.into_iter().enumerate() {
                    image.data_mut()[c * n + i] = v;
                }
            }
        }
        RenderedFrame {
            image,
            depth,
            pose: *pose,
            intrinsics: *k,
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    let base = rng.random_range(lo..hi);
    std::array::from_fn(|_| (base + rng.random_range(-0.12..0.12)).clamp(0.05, 1.0))
}

fn random_material(rng: &mut ChaCha8Rng, style: TextureStyle, scale: f64) -> Material {
    let style = match style {
        TextureStyle::Mixed => [TextureStyle::Checker, TextureStyle::Noise, TextureStyle::Gradient]
            [rng.random_range(0..3)],
        s => s,
    };
    let base = random_color(rng, 0.15, 0.5);
    let accent = random_color(rng, 0.55, 0.95);
    let pattern = match style {
        TextureStyle::Checker => Pattern::Checker {
            cell: scale * rng.random_range(0.25..0.6),
        },
        TextureStyle::Gradient => {
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            Pattern::Gradient {
                direction: if dir.norm() > 1e-3 { dir.normalize() } else { Vector3::x() },
                period: scale * rng.random_range(0.4..1.2),
            }
        }
        _ => Pattern::Noise {
            frequency: rng.random_range(2.0..4.0) / scale,
            seed: rng.random(),
        },
    };
    Material {
        base,
        accent,
        pattern,
    }
}

fn yaw(angle: f64) -> Matrix3<f64> {
    rotation_from_axis_angle(Vector3::new(0.0, angle, 0.0))
}

/// Objects are kept this far from the camera's home position.
const CLEARANCE: f64 = 1.0;

/// Build the static geometry of a scene. World axes follow the camera
/// convention at the home pose: x right, y down, z forward.
pub fn build_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = rng_for(config.seed, "scene", 0);
    let style = config.texture;
    let n_objects = rng.random_range(config.objects.0..=config.objects.1);
    let mut surfaces = Vec::new();
    let mut push = |shape: Shape, material: Material| surfaces.push(Surface { shape, material });
    match config.layout {
        Layout::Room => {
            let half_w = rng.random_range(2.0..3.0);
            let height = rng.random_range(2.6..3.2);
            let back = rng.random_range(4.0..6.5);
            let front = rng.random_range(1.5..2.5);
            let eye = 1.4;
            let shell = Shape::Shell {
                min: Vector3::new(-half_w, eye - height, -front),
                max: Vector3::new(half_w, eye, back),
            };
            push(shell, random_material(&mut rng, style, 1.0));
            for _ in 0..n_objects {
                let z = rng.random_range(CLEARANCE + 0.5..back - 0.6);
                let x = rng.random_range(-half_w + 0.5..half_w - 0.5);
                let material = random_material(&mut rng, style, 0.6);
                if rng.random_bool(0.6) {
                    let half = Vector3::new(
                        rng.random_range(0.2..0.6),
                        rng.random_range(0.2..0.7),
                        rng.random_range(0.2..0.6),
                    );
                    let center = Vector3::new(x, eye - half.y, z);
                    let rotation = yaw(rng.random_range(-0.8..0.8));
                    push(Shape::Cuboid { center, half, rotation }, material);
                } else {
                    let radius = rng.random_range(0.15..0.45);
                    let center = Vector3::new(x, rng.random_range(eye - 2.0..eye - radius), z);
                    push(Shape::Sphere { center, radius }, material);
                }
            }
        }
        Layout::Corridor => {
            let half_w = rng.random_range(1.0..1.6);
            let height = rng.random_range(2.4..3.0);
            let length = rng.random_range(12.0..20.0);
            let eye = 1.5;
            let shell = Shape::Shell {
                min: Vector3::new(-half_w, eye - height, -2.0),
                max: Vector3::new(half_w, eye, length),
            };
            push(shell, random_material(&mut rng, style, 1.0));
            for _ in 0..n_objects {
                let z = rng.random_range(CLEARANCE + 1.0..length - 1.0);
                let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
                let material = random_material(&mut rng, style, 0.6);
                if rng.random_bool(0.7) {
                    let half = Vector3::new(
                        rng.random_range(0.15..0.35),
                        rng.random_range(0.3..0.9),
                        rng.random_range(0.2..0.8),
                    );
                    let center = Vector3::new(side * (half_w - half.x), eye - half.y, z);
                    push(
                        Shape::Cuboid {
                            center,
                            half,
                            rotation: Matrix3::identity(),
                        },
                        material,
                    );
                } else {
                    let radius = rng.random_range(0.15..0.35);
                    let center = Vector3::new(side * (half_w - radius - 0.05), eye - radius, z);
                    push(Shape::Sphere { center, radius }, material);
                }
            }
        }
        Layout::OutdoorStrip => {
            let eye = 1.6;
            push(
                Shape::Plane {
                    point: Vector3::new(0.0, eye, 0.0),
                    normal: -Vector3::y(),
                },
                random_material(&mut rng, style, 3.0),
            );
            push(
                Shape::Plane {
                    point: Vector3::new(0.0, 0.0, rng.random_range(40.0..60.0)),
                    normal: -Vector3::z(),
                },
                random_material(&mut rng, style, 8.0),
            );
            for i in 0..n_objects {
                let material = random_material(&mut rng, style, 1.5);
                let side = if i % 2 == 0 { -1.0 } else { 1.0 };
                let z = rng.random_range(4.0..35.0);
                if rng.random_bool(0.5) {
                    let half = Vector3::new(
                        rng.random_range(2.0..5.0),
                        rng.random_range(3.0..8.0),
                        rng.random_range(2.0..6.0),
                    );
                    let center = Vector3::new(side * (rng.random_range(5.0..8.0) + half.x), eye - half.y, z);
                    push(Shape::Cuboid { center, half, rotation: yaw(rng.random_range(-0.2..0.2)) }, material);
                } else if rng.random_bool(0.6) {
                    let half = Vector3::new(0.9, 0.7, 2.1);
                    let center = Vector3::new(side * rng.random_range(2.0..4.0), eye - half.y, z);
                    push(Shape::Cuboid { center, half, rotation: yaw(rng.random_range(-0.1..0.1)) }, material);
                } else {
                    let radius = rng.random_range(0.8..2.0);
                    let center = Vector3::new(side * rng.random_range(4.5..7.0), eye - radius - 1.5, z);
                    push(Shape::Sphere { center, radius }, material);
                }
            }
        }
    }
    Ok(Scene::new(surfaces, config.depth_range))
}

/// Bounded random walk with mean reversion towards the home pose. Corridor
/// and outdoor layouts add a forward drift.
pub fn trajectory(config: &SceneConfig) -> Result<Vec<Pose>> {
    config.validate()?;
    let mut rng = rng_for(config.seed, "trajectory", 0);
    let forward = match config.layout {
        Layout::Room => 0.0,
        Layout::Corridor => 0.6,
        Layout::OutdoorStrip => 0.8,
    } * config.max_step_translation;
    let max_t = config.max_step_translation;
    let max_r = config.max_step_rotation_deg.to_radians();
    let mut position = Vector3::<f64>::zeros();
    let mut home = Vector3::<f64>::zeros();
    let mut velocity = Vector3::<f64>::zeros();
    let mut orientation = Rotation3::identity();
    let mut angular = Vector3::<f64>::zeros();
    let mut poses = Vec::with_capacity(config.frames);
    for _ in 0..config.frames {
        let rotation = orientation.inverse().into_inner();
        poses.push(Pose {
            rotation,
            translation: -(rotation * position),
        });

        let noise: Vector3<f64> = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * (0.5 * max_t);
        let mut step = 0.6 * velocity + noise - 0.15 * (position - home);
        step.z += forward;
        if step.norm() > max_t {
            step *= max_t / step.norm();
        }
        velocity = step;
        position += step;
        home.z += forward;

        let noise: Vector3<f64> = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * (0.5 * max_r);
        let mut turn = 0.5 * angular + noise - 0.2 * orientation.scaled_axis();
        turn.z *= 0.5;
        if turn.norm() > max_r {
            turn *= max_r / turn.norm();
        }
        angular = turn;
        orientation = Rotation3::new(turn) * orientation;
    }
    Ok(poses)
}

/// Render a whole sequence. Frames are rendered in parallel; the result does
/// not depend on the thread count.
pub fn generate_scene(config: &SceneConfig) -> Result<Vec<RenderedFrame>> {
    let scene = build_scene(config)?;
    let poses = trajectory(config)?;
    let k = config.intrinsics();
    Ok(poses.par_iter().map(|pose| scene.render(&k, pose)).collect())
}

/// Sliding windows of three frames with relative poses into the centre frame.
pub fn make_triplets(frames: &[RenderedFrame]) -> Result<Vec<FrameTriplet>> {
    if frames.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 frames to form a triplet, got {}",
            frames.len()
        )));
    }
    Ok(frames
        .windows(3)
        .map(|w| FrameTriplet {
            pose_prev: Pose::relative(&w[0].pose, &w[1].pose),
            pose_next: Pose::relative(&w[2].pose, &w[1].pose),
            prev: w[0].clone(),
            target: w[1].clone(),
            next: w[2].clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{bilinear_sample, project, reconstruct};
    use approx::assert_relative_eq;

    fn plane_scene(z: f64) -> Scene {
        Scene::new(
            vec![Surface {
                shape: Shape::Plane {
                    point: Vector3::new(0.0, 0.0, z),
                    normal: -Vector3::z(),
                },
                material: Material::flat(0.5),
            }],
            (0.1, 100.0),
        )
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let k = Intrinsics::centered(24, 16, 0.8);
        let f = plane_scene(2.0).render(&k, &Pose::identity());
        assert!(f.depth.data().iter().all(|&d| (d - 2.0).abs() < 1e-12));
    }

    #[test]
    fn sphere_on_axis_is_nearest_at_image_centre() {
        let (d, r) = (3.0, 0.5);
        let scene = Scene::new(
            vec![
                Surface {
                    shape: Shape::Sphere {
                        center: Vector3::new(0.0, 0.0, d),
                        radius: r,
                    },
                    material: Material::flat(0.7),
                },
                plane_scene(10.0).surfaces.remove(0),
            ],
            (0.1, 100.0),
        );
        let k = Intrinsics::new(20.0, 20.0, 10.0, 8.0, 21, 17).unwrap();
        let f = scene.render(&k, &Pose::identity());
        assert_relative_eq!(f.depth.at(0, 8, 10), d - r, epsilon = 1e-12);
        assert_relative_eq!(f.depth.min(), d - r, epsilon = 1e-12);
    }

    #[test]
    fn cuboid_and_shell_hits() {
        let o = Vector3::zeros();
        let d = Vector3::z();
        let cube = Shape::Cuboid {
            center: Vector3::new(0.0, 0.0, 5.0),
            half: Vector3::new(1.0, 1.0, 1.0),
            rotation: Matrix3::identity(),
        };
        let (t, n) = cube.intersect(&o, &d, 0.0).unwrap();
        assert_relative_eq!(t, 4.0);
        assert_relative_eq!(n, -Vector3::z());
        let rotated = Shape::Cuboid {
            center: Vector3::new(0.0, 0.0, 5.0),
            half: Vector3::new(1.0, 1.0, 1.0),
            rotation: yaw(std::f64::consts::FRAC_PI_4),
        };
        let (t, _) = rotated.intersect(&o, &d, 0.0).unwrap();
        assert_relative_eq!(t, 5.0 - 2f64.sqrt(), epsilon = 1e-12);
        let shell = Shape::Shell {
            min: Vector3::new(-1.0, -1.0, -1.0),
            max: Vector3::new(1.0, 1.0, 3.0),
        };
        let (t, n) = shell.intersect(&o, &d, 0.0).unwrap();
        assert_relative_eq!(t, 3.0);
        assert_relative_eq!(n, -Vector3::z());
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        for layout in Layout::ALL {
            let mut cfg = SceneConfig::new(7, layout);
            cfg.width = 32;
            cfg.height = 32;
            cfg.frames = 4;
            let a = generate_scene(&cfg).unwrap();
            let b = generate_scene(&cfg).unwrap();
            assert_eq!(a, b);
            let (lo, hi) = cfg.depth_range;
            for f in &a {
                assert!(f.depth.min() >= lo && f.depth.max() <= hi);
                assert!(f.image.is_finite() && f.image.min() >= 0.0 && f.image.max() <= 1.0);
                f.pose.validate().unwrap();
            }
        }
    }

    #[test]
    fn trajectory_respects_step_bounds() {
        for layout in Layout::ALL {
            let mut cfg = SceneConfig::new(3, layout);
            cfg.frames = 200;
            let poses = trajectory(&cfg).unwrap();
            for w in poses.windows(2) {
                let rel = Pose::relative(&w[1], &w[0]);
                let c0 = -(w[0].rotation.transpose() * w[0].translation);
                let c1 = -(w[1].rotation.transpose() * w[1].translation);
                assert!((c1 - c0).norm() <= 0.05 + 1e-12);
                let angle = ((rel.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
                assert!(angle.to_degrees() <= 2.0 + 1e-9, "{layout}: {}", angle.to_degrees());
            }
        }
    }

    #[test]
    fn triplet_counts_and_static_camera() {
        let k = Intrinsics::centered(8, 8, 1.0);
        let frame = plane_scene(2.0).render(&k, &Pose::identity());
        assert!(make_triplets(&vec![frame.clone(); 2]).is_err());
        assert_eq!(make_triplets(&vec![frame.clone(); 3]).unwrap().len(), 1);
        let t = make_triplets(&vec![frame; 5]).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t[0].pose_prev.approx_eq(&Pose::identity(), 1e-12));
        assert!(t[0].pose_next.approx_eq(&Pose::identity(), 1e-12));
    }

    #[test]
    fn triplet_relative_poses_are_consistent() {
        let mut cfg = SceneConfig::new(5, Layout::Room);
        cfg.width = 16;
        cfg.height = 16;
        cfg.frames = 5;
        let frames = generate_scene(&cfg).unwrap();
        for t in make_triplets(&frames).unwrap() {
            let composed = t.pose_prev.compose(&t.target.pose);
            assert!(composed.approx_eq(&t.prev.pose, 1e-6));
        }
    }

    #[test]
    fn ground_truth_warp_reconstructs_target() {
        let mut cfg = SceneConfig::new(11, Layout::Room);
        cfg.frames = 3;
        let frames = generate_scene(&cfg).unwrap();
        let t = &make_triplets(&frames).unwrap()[0];
        let k = t.target.intrinsics;
        let rec = reconstruct(&t.next.image, &t.target.depth, &k, &t.pose_next).unwrap();
        let (coords, _) = project(rec.transformed(), &k);
        let (src_depth, _) = bilinear_sample(&t.next.depth, &coords);
        let n = k.width * k.height;
        let (mut err, mut count) = (0.0, 0usize);
        for i in 0..n {
            let q = rec.transformed()[i].z;
            if !rec.mask[i] || (src_depth[i] - q).abs() > 0.01 * q {
                continue;
            }
            for c in 0..3 {
                err += (rec.image.data()[c * n + i] - t.target.image.data()[c * n + i]).abs();
            }
            count += 1;
        }
        assert!(count > n / 2);
        let mean = err / (3 * count) as f64;
        assert!(mean < 1e-2, "warp error {mean}");
    }
}
