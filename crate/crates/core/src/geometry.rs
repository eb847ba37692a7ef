//! Pinhole camera, rigid transforms and differentiable view synthesis.
//!
//! Pixel centres sit at integer coordinates: pixel `(x, y)` covers
//! `[x - 0.5, x + 0.5] x [y - 0.5, y + 0.5]`. The renderer in
//! [`crate::scenegen`] uses the same convention, so warping a rendered frame
//! with its ground-truth depth and pose lands on the other frame's pixels.

use nalgebra::{Matrix3, Point2, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Front-of-camera cutoff in meters.
pub const MIN_VIEW_DEPTH: f64 = 1e-3;

/// Coordinates this close to an integer are snapped onto it, absorbing the
/// round-off of `K` followed by `K^-1`.
const SNAP_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image centre, focal length
    /// `focal_scale * width`.
    pub fn centered(width: usize, height: usize, focal_scale: f64) -> Self {
        let f = focal_scale * width as f64;
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K^-1 [x y 1]^T`: the ray through pixel `(x, y)` with unit z.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Intrinsics of the left-right mirrored image.
    pub fn flipped_horizontal(&self) -> Self {
        Self {
            cx: self.width as f64 - 1.0 - self.cx,
            ..*self
        }
    }
}

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Exponential map of a 6-vector: translation followed by axis-angle rotation.
    pub fn from_twist(translation: Vector3<f64>, axis_angle: Vector3<f64>) -> Self {
        Self {
            rotation: rotation_from_axis_angle(axis_angle),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if orth <= 1e-6 && (det - 1.0).abs() <= 1e-6 && self.translation.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "pose rotation is not in SO(3): |R^T R - I| = {orth:e}, det = {det}"
            )))
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Relative pose mapping camera-`from` coordinates into camera-`to`
    /// coordinates, for world-to-camera poses: `g_to * g_from^-1`.
    pub fn relative(to: &Pose, from: &Pose) -> Self {
        to.compose(&from.inverse())
    }

    /// Conjugation by the x-mirror, matching a horizontally flipped image pair.
    pub fn mirrored_x(&self) -> Self {
        let s = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        Self {
            rotation: s * self.rotation * s,
            translation: s * self.translation,
        }
    }

    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        (self.rotation - other.rotation).abs().max() <= tol
            && (self.translation - other.translation).abs().max() <= tol
    }
}

pub fn rotation_from_axis_angle(w: Vector3<f64>) -> Matrix3<f64> {
    let angle = w.norm();
    if angle == 0.0 {
        return Matrix3::identity();
    }
    Rotation3::from_axis_angle(&Unit::new_normalize(w), angle).into_inner()
}

#[inline]
fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Partial derivatives of `exp([w]x)` with respect to each component of `w`.
pub fn rotation_axis_angle_jacobian(w: Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = w.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta2 < 1e-16 {
        return basis.map(|e| hat(&e));
    }
    let r = rotation_from_axis_angle(w);
    let i_minus_r = Matrix3::identity() - r;
    basis.map(|e| {
        let wi = w.dot(&e);
        let inner = w.cross(&(i_minus_r * e));
        ((hat(&w) * wi + hat(&inner)) / theta2) * r
    })
}

/// Homogeneous pixel coordinates of every pixel, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn homogeneous(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        (0..self.height).flat_map(move |y| {
            (0..self.width).map(move |x| Vector3::new(x as f64, y as f64, 1.0))
        })
    }
}

/// `K^-1 x̄ d(x)` for every pixel.
pub fn backproject(grid: PixelGrid, depth: &Tensor, k: &Intrinsics) -> Result<Vec<Vector3<f64>>> {
    if depth.channels() != 1 || depth.height() != grid.height || depth.width() != grid.width {
        return Err(Error::ShapeMismatch(format!(
            "depth {:?} vs grid {}x{}",
            depth.shape(),
            grid.width,
            grid.height
        )));
    }
    let kinv = k
        .matrix()
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("singular intrinsics".into()))?;
    grid.homogeneous()
        .zip(depth.data())
        .map(|(xh, &d)| {
            if d > 0.0 && d.is_finite() {
                Ok(kinv * xh * d)
            } else {
                Err(Error::InvalidInput(format!(
                    "non-positive depth {d} at pixel ({}, {})",
                    xh.x, xh.y
                )))
            }
        })
        .collect()
}

pub fn transform(pose: &Pose, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| pose.apply(p)).collect()
}

/// Perspective projection. Points with `Z <= MIN_VIEW_DEPTH` get a false mask
/// entry and NaN coordinates.
pub fn project(points: &[Vector3<f64>], k: &Intrinsics) -> (Vec<Point2<f64>>, Vec<bool>) {
    points
        .iter()
        .map(|p| {
            if p.z > MIN_VIEW_DEPTH {
                (
                    Point2::new(
                        snap(k.fx * p.x / p.z + k.cx),
                        snap(k.fy * p.y / p.z + k.cy),
                    ),
                    true,
                )
            } else {
                (Point2::new(f64::NAN, f64::NAN), false)
            }
        })
        .unzip()
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_TOLERANCE {
        r
    } else {
        v
    }
}

/// Bilinear stencil at a continuous coordinate.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    x0: usize,
    y0: usize,
    ax: f64,
    ay: f64,
}

fn stencil(u: f64, v: f64, width: usize, height: usize) -> Option<Stencil> {
    if !(u.is_finite() && v.is_finite()) {
        return None;
    }
    let (wm, hm) = (width as f64 - 1.0, height as f64 - 1.0);
    if u < 0.0 || v < 0.0 || u > wm || v > hm {
        return None;
    }
    let x0 = (u.floor() as usize).min(width.saturating_sub(2));
    let y0 = (v.floor() as usize).min(height.saturating_sub(2));
    Some(Stencil {
        x0,
        y0,
        ax: u - x0 as f64,
        ay: v - y0 as f64,
    })
}

/// Samples of one channel plus their partials in u and v.
#[inline]
fn sample_plane(plane: &[f64], width: usize, s: &Stencil) -> (f64, f64, f64) {
    let i00 = s.y0 * width + s.x0;
    let (p00, p10) = (plane[i00], plane[(i00 + 1).min(plane.len() - 1)]);
    let (p01, p11) = if s.ay == 0.0 && i00 + width >= plane.len() {
        (p00, p10)
    } else {
        (plane[i00 + width], plane[(i00 + width + 1).min(plane.len() - 1)])
    };
    // Convex form so that samples at either end of a cell are exact.
    let top = (1.0 - s.ax) * p00 + s.ax * p10;
    let bottom = (1.0 - s.ax) * p01 + s.ax * p11;
    let value = (1.0 - s.ay) * top + s.ay * bottom;
    let du = (1.0 - s.ay) * (p10 - p00) + s.ay * (p11 - p01);
    let dv = bottom - top;
    (value, du, dv)
}

/// Bilinear interpolation of `image` at `coords`.
///
/// Values come back channel-major (`values[c * n + i]`). Samples whose
/// four-neighbourhood leaves `[0, W-1] x [0, H-1]` are 0 with a false mask.
pub fn bilinear_sample(image: &Tensor, coords: &[Point2<f64>]) -> (Vec<f64>, Vec<bool>) {
    let n = coords.len();
    let (w, h) = (image.width(), image.height());
    let mut values = vec![0.0; image.channels() * n];
    let mut mask = vec![false; n];
    for (i, c) in coords.iter().enumerate() {
        if let Some(s) = stencil(c.x, c.y, w, h) {
            mask[i] = true;
            for ch in 0..image.channels() {
                values[ch * n + i] = sample_plane(image.plane(ch), w, &s).0;
            }
        }
    }
    (values, mask)
}

/// Partials of [`bilinear_sample`] with respect to the coordinates:
/// `(d/du, d/dv)`, channel-major, zero where masked.
pub fn bilinear_sample_coord_grad(image: &Tensor, coords: &[Point2<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = coords.len();
    let (w, h) = (image.width(), image.height());
    let mut du = vec![0.0; image.channels() * n];
    let mut dv = vec![0.0; image.channels() * n];
    for (i, c) in coords.iter().enumerate() {
        if let Some(s) = stencil(c.x, c.y, w, h) {
            for ch in 0..image.channels() {
                let (_, gu, gv) = sample_plane(image.plane(ch), w, &s);
                du[ch * n + i] = gu;
                dv[ch * n + i] = gv;
            }
        }
    }
    (du, dv)
}

/// Adjoint of [`bilinear_sample`] with respect to the image: scatters
/// channel-major `grad_values` back onto a `channels x height x width` grid.
pub fn bilinear_sample_image_grad(
    grad_values: &[f64],
    coords: &[Point2<f64>],
    channels: usize,
    height: usize,
    width: usize,
) -> Tensor {
    let n = coords.len();
    let mut out = Tensor::zeros(channels, height, width);
    for (i, c) in coords.iter().enumerate() {
        let Some(s) = stencil(c.x, c.y, width, height) else {
            continue;
        };
        let x1 = (s.x0 + 1).min(width - 1);
        let y1 = (s.y0 + 1).min(height - 1);
        let taps = [
            (s.y0, s.x0, (1.0 - s.ax) * (1.0 - s.ay)),
            (s.y0, x1, s.ax * (1.0 - s.ay)),
            (y1, s.x0, (1.0 - s.ax) * s.ay),
            (y1, x1, s.ax * s.ay),
        ];
        for ch in 0..channels {
            let g = grad_values[ch * n + i];
            for &(y, x, wgt) in &taps {
                if wgt != 0.0 {
                    let idx = out.index(ch, y, x);
                    out.data_mut()[idx] += g * wgt;
                }
            }
        }
    }
    out
}

/// `I_tau(pi(g K^-1 x̄ d(x)))` together with everything needed to
/// differentiate it.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Reconstructed target image, zero where invalid.
    pub image: Tensor,
    /// In front of the camera and inside the source image.
    pub mask: Vec<bool>,
    points: Vec<Vector3<f64>>,
    transformed: Vec<Vector3<f64>>,
    grad_u: Vec<f64>,
    grad_v: Vec<f64>,
    rotation: Matrix3<f64>,
    intrinsics: Intrinsics,
}

impl Reconstruction {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Camera-`t` points `K^-1 x̄ d(x)`.
    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Points after the rigid motion into camera `tau`.
    pub fn transformed(&self) -> &[Vector3<f64>] {
        &self.transformed
    }

    #[inline]
    fn projection_grad(&self, q: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let k = &self.intrinsics;
        let iz = 1.0 / q.z;
        let du = Vector3::new(k.fx * iz, 0.0, -k.fx * q.x * iz * iz);
        let dv = Vector3::new(0.0, k.fy * iz, -k.fy * q.y * iz * iz);
        (du, dv)
    }

    /// `dÎ_c(x) / dd(x)`; each output pixel depends only on its own depth.
    pub fn depth_jacobian(&self) -> Tensor {
        let (c, h, w) = self.image.shape();
        let n = h * w;
        let mut jac = Tensor::zeros(c, h, w);
        for i in 0..n {
            if !self.mask[i] {
                continue;
            }
            let q = &self.transformed[i];
            let d = self.points[i].z;
            // dQ/dd = R * ray, ray = P / d.
            let dq = self.rotation * (self.points[i] / d);
            let (gu, gv) = self.projection_grad(q);
            let (du_dd, dv_dd) = (gu.dot(&dq), gv.dot(&dq));
            for ch in 0..c {
                jac.data_mut()[ch * n + i] =
                    self.grad_u[ch * n + i] * du_dd + self.grad_v[ch * n + i] * dv_dd;
            }
        }
        jac
    }

    /// Chain `upstream = dL/dÎ` through the warp into `dL/dd`.
    pub fn depth_gradient(&self, upstream: &Tensor) -> Tensor {
        let jac = self.depth_jacobian();
        let (c, h, w) = jac.shape();
        let n = h * w;
        let mut out = Tensor::zeros(1, h, w);
        for ch in 0..c {
            for i in 0..n {
                out.data_mut()[i] += jac.data()[ch * n + i] * upstream.data()[ch * n + i];
            }
        }
        out
    }

    /// Chain `upstream = dL/dÎ` into the rotation matrix entries and translation.
    pub fn pose_gradient(&self, upstream: &Tensor) -> (Matrix3<f64>, Vector3<f64>) {
        let (c, h, w) = self.image.shape();
        let n = h * w;
        let mut g_rot = Matrix3::zeros();
        let mut g_t = Vector3::zeros();
        for i in 0..n {
            if !self.mask[i] {
                continue;
            }
            let (gu, gv) = self.projection_grad(&self.transformed[i]);
            let mut gq = Vector3::zeros();
            for ch in 0..c {
                let up = upstream.data()[ch * n + i];
                gq += (gu * self.grad_u[ch * n + i] + gv * self.grad_v[ch * n + i]) * up;
            }
            g_t += gq;
            g_rot += gq * self.points[i].transpose();
        }
        (g_rot, g_t)
    }
}

/// Reconstruct the target frame by sampling `source` at the pixels where the
/// target's back-projected depth lands after the rigid motion `pose`
/// (target camera to source camera).
pub fn reconstruct(
    source: &Tensor,
    depth: &Tensor,
    k: &Intrinsics,
    pose: &Pose,
) -> Result<Reconstruction> {
    if depth.height() != source.height() || depth.width() != source.width() {
        return Err(Error::ShapeMismatch(format!(
            "depth {:?} vs source image {:?}",
            depth.shape(),
            source.shape()
        )));
    }
    let grid = PixelGrid::new(depth.width(), depth.height());
    let points = backproject(grid, depth, k)?;
    let transformed = transform(pose, &points);
    let (coords, front) = project(&transformed, k);
    let (values, inside) = bilinear_sample(source, &coords);
    let (grad_u, grad_v) = bilinear_sample_coord_grad(source, &coords);
    let mask: Vec<bool> = front.iter().zip(&inside).map(|(&a, &b)| a && b).collect();
    let image = Tensor::from_vec(source.channels(), source.height(), source.width(), values)?;
    Ok(Reconstruction {
        image,
        mask,
        points,
        transformed,
        grad_u,
        grad_v,
        rotation: pose.rotation,
        intrinsics: *k,
    })
}
