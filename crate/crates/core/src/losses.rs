//! Training objectives with analytic gradients with respect to the predicted
//! depth: the supervised normalised L1 for ScaffNet and the four-term
//! unsupervised objective for FusionNet.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{reconstruct, Intrinsics, Pose, Reconstruction};
use crate::sampling::SparseDepthMap;
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_ph: f64,
    pub w_co: f64,
    pub w_st: f64,
    pub w_sz: f64,
    pub w_sm: f64,
    pub w_tp: f64,
}

impl LossWeights {
    /// Outdoor lidar-style data.
    pub fn scanline() -> Self {
        Self {
            w_ph: 1.0,
            w_co: 0.2,
            w_st: 0.4,
            w_sz: 0.1,
            w_sm: 0.01,
            w_tp: 0.1,
        }
    }

    /// Indoor data with tracked corners: stronger sparse and smoothness terms.
    pub fn corner() -> Self {
        Self {
            w_sz: 1.0,
            w_sm: 0.4,
            ..Self::scanline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("w_ph", self.w_ph),
            ("w_co", self.w_co),
            ("w_st", self.w_st),
            ("w_sz", self.w_sz),
            ("w_sm", self.w_sm),
            ("w_tp", self.w_tp),
        ];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidInput(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::scanline()
    }
}

/// A scalar loss and its gradient with respect to one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ensure_single_channel(t: &Tensor, what: &str) -> Result<()> {
    if t.channels() != 1 {
        return Err(Error::ShapeMismatch(format!("{what} must have one channel, got {}", t.channels())));
    }
    Ok(())
}

/// Mean over all pixels of `|pred - gt| / gt`.
pub fn supervised_l0(pred: &Tensor, gt: &Tensor) -> Result<LossGrad> {
    pred.ensure_shape(gt, "prediction vs ground truth")?;
    if gt.is_empty() {
        return Err(Error::InvalidInput("empty depth map".into()));
    }
    if let Some(bad) = gt.data().iter().find(|&&g| !(g > 0.0)) {
        return Err(Error::InvalidInput(format!("ground-truth depth must be positive, found {bad}")));
    }
    let n = gt.len() as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(pred.channels(), pred.height(), pred.width());
    for ((g_out, &p), &g) in grad.data_mut().iter_mut().zip(pred.data()).zip(gt.data()) {
        value += (p - g).abs() / g;
        *g_out = sign(p - g) / (g * n);
    }
    Ok(LossGrad { value: value / n, grad })
}

/// 3x3 box mean of one plane, averaging only the in-bounds neighbours.
fn box_mean(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += plane[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

/// Adjoint of [`box_mean`].
fn box_mean_adjoint(g: &[f64], h: usize, w: usize) -> Vec<f64> {
    let count = |y: usize, x: usize| {
        let ny = (y + 2).min(h) - y.saturating_sub(1);
        let nx = (x + 2).min(w) - x.saturating_sub(1);
        (ny * nx) as f64
    };
    let scaled: Vec<f64> = (0..h * w).map(|i| g[i] / count(i / w, i % w)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += scaled[yy * w + xx];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

struct SsimStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    num_l: Vec<f64>,
    num_c: Vec<f64>,
    den_l: Vec<f64>,
    den_c: Vec<f64>,
}

fn ssim_stats(a: &[f64], b: &[f64], h: usize, w: usize) -> SsimStats {
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = box_mean(a, h, w);
    let mu_b = box_mean(b, h, w);
    let e_aa = box_mean(&sq(a, a), h, w);
    let e_bb = box_mean(&sq(b, b), h, w);
    let e_ab = box_mean(&sq(a, b), h, w);
    let n = h * w;
    let (mut num_l, mut num_c, mut den_l, mut den_c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let var_a = e_aa[i] - mu_a[i] * mu_a[i];
        let var_b = e_bb[i] - mu_b[i] * mu_b[i];
        let cov = e_ab[i] - mu_a[i] * mu_b[i];
        num_l[i] = 2.0 * mu_a[i] * mu_b[i] + SSIM_C1;
        num_c[i] = 2.0 * cov + SSIM_C2;
        den_l[i] = mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + SSIM_C1;
        den_c[i] = var_a + var_b + SSIM_C2;
    }
    SsimStats {
        mu_a,
        mu_b,
        num_l,
        num_c,
        den_l,
        den_c,
    }
}

/// Per-pixel, per-channel SSIM over 3x3 windows.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_shape(b, "ssim operands")?;
    let (c, h, w) = a.shape();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let s = ssim_stats(a.plane(ch), b.plane(ch), h, w);
        for (i, o) in out.plane_mut(ch).iter_mut().enumerate() {
            *o = s.num_l[i] * s.num_c[i] / (s.den_l[i] * s.den_c[i]);
        }
    }
    Ok(out)
}

/// Gradient with respect to `a` of `sum(upstream * ssim(a, b))`.
pub fn ssim_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    a.ensure_shape(b, "ssim operands")?;
    a.ensure_shape(upstream, "ssim upstream")?;
    let (c, h, w) = a.shape();
    let n = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let (pa, pb, up) = (a.plane(ch), b.plane(ch), upstream.plane(ch));
        let s = ssim_stats(pa, pb, h, w);
        // Partials with respect to the window statistics mu_a, E[a^2], E[ab].
        let (mut g_mu, mut g_aa, mut g_ab) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let den = s.den_l[i] * s.den_c[i];
            let val = s.num_l[i] * s.num_c[i] / den;
            let d_var_a = -val / s.den_c[i];
            let d_cov = 2.0 * s.num_l[i] / den;
            let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
            let d_mu = 2.0 * mb * s.num_c[i] / den - val * 2.0 * ma / s.den_l[i] - 2.0 * ma * d_var_a - mb * d_cov;
            g_mu[i] = up[i] * d_mu;
            g_aa[i] = up[i] * d_var_a;
            g_ab[i] = up[i] * d_cov;
        }
        let (g_mu, g_aa, g_ab) = (
            box_mean_adjoint(&g_mu, h, w),
            box_mean_adjoint(&g_aa, h, w),
            box_mean_adjoint(&g_ab, h, w),
        );
        for (i, o) in out.plane_mut(ch).iter_mut().enumerate() {
            *o = g_mu[i] + 2.0 * pa[i] * g_aa[i] + pb[i] * g_ab[i];
        }
    }
    Ok(out)
}

/// Photometric loss value and its gradient with respect to each reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotometricLoss {
    pub value: f64,
    pub grads: Vec<Tensor>,
    pub valid_pixels: usize,
}

/// Average over source frames, valid pixels and colour channels of
/// `w_co |Î - I| + w_st (1 - SSIM(Î, I))`.
///
/// Each view is a reconstructed image with its per-pixel validity mask.
pub fn photometric_loss(target: &Tensor, views: &[(&Tensor, &[bool])], w_co: f64, w_st: f64) -> Result<PhotometricLoss> {
    let (c, h, w) = target.shape();
    let n = h * w;
    for (img, mask) in views {
        img.ensure_shape(target, "reconstruction vs target")?;
        if mask.len() != n {
            return Err(Error::ShapeMismatch(format!("mask has {} entries for {n} pixels", mask.len())));
        }
    }
    let valid_pixels: usize = views.iter().map(|(_, m)| m.iter().filter(|&&v| v).count()).sum();
    if valid_pixels == 0 {
        return Err(Error::DegenerateWarp);
    }
    let norm = 1.0 / (valid_pixels * c) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(views.len());
    for (img, mask) in views {
        let sim = if w_st != 0.0 { Some(ssim(img, target)?) } else { None };
        let mut g = Tensor::zeros(c, h, w);
        let mut up = Tensor::zeros(c, h, w);
        for ch in 0..c {
            for i in 0..n {
                if !mask[i] {
                    continue;
                }
                let k = ch * n + i;
                let diff = img.data()[k] - target.data()[k];
                value += w_co * diff.abs();
                g.data_mut()[k] = w_co * sign(diff) * norm;
                if let Some(s) = &sim {
                    value += w_st * (1.0 - s.data()[k]);
                    up.data_mut()[k] = -w_st * norm;
                }
            }
        }
        if sim.is_some() {
            g.add_assign(&ssim_backward(img, target, &up)?);
        }
        grads.push(g);
    }
    Ok(PhotometricLoss {
        value: value * norm,
        grads,
        valid_pixels,
    })
}

/// Mean of `|d - z|` over the sparse domain.
pub fn sparse_consistency_loss(depth: &Tensor, sparse: &SparseDepthMap) -> Result<LossGrad> {
    ensure_single_channel(depth, "depth")?;
    depth.ensure_shape(sparse.values(), "depth vs sparse depth")?;
    let count = sparse.count();
    if count == 0 {
        return Err(Error::InvalidInput("sparse depth map has no measurements".into()));
    }
    let n = count as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(1, depth.height(), depth.width());
    for i in sparse.indices() {
        let diff = depth.data()[i] - sparse.values().data()[i];
        value += diff.abs();
        grad.data_mut()[i] = sign(diff) / n;
    }
    Ok(LossGrad { value: value / n, grad })
}

/// Edge-aware weights `exp(-mean_c |dI|)` for forward differences along x and y.
pub fn smoothness_weights(image: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = image.shape();
    let mut lx = Tensor::zeros(1, h, w);
    let mut ly = Tensor::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                if x + 1 < w {
                    gx += (image.at(ch, y, x + 1) - image.at(ch, y, x)).abs();
                }
                if y + 1 < h {
                    gy += (image.at(ch, y + 1, x) - image.at(ch, y, x)).abs();
                }
            }
            lx.set(0, y, x, (-gx / c as f64).exp());
            ly.set(0, y, x, (-gy / c as f64).exp());
        }
    }
    (lx, ly)
}

/// Mean over all pixels of `lambda_x |d_x depth| + lambda_y |d_y depth|`.
pub fn smoothness_loss(depth: &Tensor, image: &Tensor) -> Result<LossGrad> {
    ensure_single_channel(depth, "depth")?;
    if depth.height() != image.height() || depth.width() != image.width() {
        return Err(Error::ShapeMismatch(format!("depth {:?} vs image {:?}", depth.shape(), image.shape())));
    }
    let (_, h, w) = depth.shape();
    let (lx, ly) = smoothness_weights(image);
    let n = (h * w) as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(1, h, w);
    let g = grad.data_mut();
    let d = depth.data();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let diff = d[i + 1] - d[i];
                let l = lx.data()[i];
                value += l * diff.abs();
                g[i + 1] += l * sign(diff) / n;
                g[i] -= l * sign(diff) / n;
            }
            if y + 1 < h {
                let diff = d[i + w] - d[i];
                let l = ly.data()[i];
                value += l * diff.abs();
                g[i + w] += l * sign(diff) / n;
                g[i] -= l * sign(diff) / n;
            }
        }
    }
    Ok(LossGrad { value: value / n, grad })
}

/// Where the prediction explains the image worse than the topology estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMask {
    /// 1 where `delta > delta0` and every reconstruction is valid, else 0.
    pub w: Tensor,
    /// Photometric discrepancy of the prediction, averaged over channels and views.
    pub delta: Tensor,
    /// The same for the topology estimate.
    pub delta0: Tensor,
}

impl PriorMask {
    pub fn coverage(&self) -> f64 {
        self.w.mean()
    }
}

fn mean_discrepancy(target: &Tensor, views: &[(&Tensor, &[bool])]) -> Result<(Tensor, Vec<bool>)> {
    let (c, h, w) = target.shape();
    let n = h * w;
    let mut delta = Tensor::zeros(1, h, w);
    let mut valid = vec![true; n];
    for (img, mask) in views {
        img.ensure_shape(target, "reconstruction vs target")?;
        if mask.len() != n {
            return Err(Error::ShapeMismatch(format!("mask has {} entries for {n} pixels", mask.len())));
        }
        for i in 0..n {
            valid[i] &= mask[i];
            let mut s = 0.0;
            for ch in 0..c {
                s += (target.data()[ch * n + i] - img.data()[ch * n + i]).abs();
            }
            delta.data_mut()[i] += s / (c * views.len()) as f64;
        }
    }
    Ok((delta, valid))
}

pub fn prior_mask(target: &Tensor, views: &[(&Tensor, &[bool])], views0: &[(&Tensor, &[bool])]) -> Result<PriorMask> {
    if views.is_empty() || views.len() != views0.len() {
        return Err(Error::InvalidInput(format!(
            "prior mask needs matching non-empty view lists, got {} and {}",
            views.len(),
            views0.len()
        )));
    }
    let (delta, valid) = mean_discrepancy(target, views)?;
    let (delta0, valid0) = mean_discrepancy(target, views0)?;
    let mut w = Tensor::zeros(1, target.height(), target.width());
    for (i, o) in w.data_mut().iter_mut().enumerate() {
        if valid[i] && valid0[i] && delta.data()[i] > delta0.data()[i] {
            *o = 1.0;
        }
    }
    Ok(PriorMask { w, delta, delta0 })
}

/// `sum W |d - d0| / sum W`, or 0 on an empty mask. `d0` is a constant target.
pub fn topology_prior_loss(depth: &Tensor, d0: &Tensor, mask: &Tensor) -> Result<LossGrad> {
    ensure_single_channel(depth, "depth")?;
    depth.ensure_shape(d0, "depth vs topology estimate")?;
    depth.ensure_shape(mask, "depth vs prior mask")?;
    let total: f64 = mask.data().iter().sum();
    let mut grad = Tensor::zeros(1, depth.height(), depth.width());
    if total == 0.0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let mut value = 0.0;
    for i in 0..depth.len() {
        let m = mask.data()[i];
        if m == 0.0 {
            continue;
        }
        let diff = depth.data()[i] - d0.data()[i];
        value += m * diff.abs();
        grad.data_mut()[i] = m * sign(diff) / total;
    }
    Ok(LossGrad { value: value / total, grad })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ph: f64,
    pub sz: f64,
    pub sm: f64,
    pub tp: f64,
}

/// Per-term values and weights of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Supervised term; only set for ScaffNet training.
    pub l0: Option<f64>,
    pub l_ph: f64,
    pub l_sz: f64,
    pub l_sm: f64,
    pub l_tp: f64,
    pub total: f64,
    /// Fraction of pixels selected by the prior mask.
    pub w_coverage: f64,
    pub tp_active: bool,
}

impl LossReport {
    pub fn supervised(l0: f64) -> Self {
        Self {
            l0: Some(l0),
            total: l0,
            ..Self::default()
        }
    }
}

pub fn total_loss(parts: LossParts, weights: &LossWeights, step: u64, tp_start_step: u64) -> LossReport {
    let tp_active = step >= tp_start_step;
    let tp = if tp_active { weights.w_tp * parts.tp } else { 0.0 };
    LossReport {
        l0: None,
        l_ph: parts.ph,
        l_sz: parts.sz,
        l_sm: parts.sm,
        l_tp: parts.tp,
        total: weights.w_ph * parts.ph + weights.w_sz * parts.sz + weights.w_sm * parts.sm + tp,
        w_coverage: 0.0,
        tp_active,
    }
}

/// One adjacent frame with the relative pose from the target camera to it.
#[derive(Clone, Copy, Debug)]
pub struct SourceView<'a> {
    pub image: &'a Tensor,
    pub pose: Pose,
}

/// Everything the unsupervised objective needs besides the prediction.
#[derive(Clone, Copy, Debug)]
pub struct UnsupervisedInputs<'a> {
    pub target: &'a Tensor,
    pub sources: &'a [SourceView<'a>],
    pub intrinsics: &'a Intrinsics,
    pub sparse: &'a SparseDepthMap,
    /// Frozen topology estimate.
    pub d0: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct UnsupervisedLoss {
    pub report: LossReport,
    pub grad_depth: Tensor,
    /// `(dL/dR, dL/dt)` for each source pose.
    pub grad_poses: Vec<(Matrix3<f64>, Vector3<f64>)>,
    pub mask: PriorMask,
}

/// The full weighted objective and its gradient with respect to the depth and
/// the source poses. The prior mask is piecewise constant and carries no gradient.
pub fn unsupervised_loss(
    inputs: &UnsupervisedInputs<'_>,
    depth: &Tensor,
    weights: &LossWeights,
    step: u64,
    tp_start_step: u64,
) -> Result<UnsupervisedLoss> {
    ensure_single_channel(depth, "depth")?;
    if inputs.sources.is_empty() {
        return Err(Error::InvalidInput("at least one source view is required".into()));
    }
    let recs: Vec<Reconstruction> = inputs
        .sources
        .iter()
        .map(|s| reconstruct(s.image, depth, inputs.intrinsics, &s.pose))
        .collect::<Result<_>>()?;
    let recs0: Vec<Reconstruction> = inputs
        .sources
        .iter()
        .map(|s| reconstruct(s.image, inputs.d0, inputs.intrinsics, &s.pose))
        .collect::<Result<_>>()?;
    let views: Vec<(&Tensor, &[bool])> = recs.iter().map(|r| (&r.image, r.mask.as_slice())).collect();
    let views0: Vec<(&Tensor, &[bool])> = recs0.iter().map(|r| (&r.image, r.mask.as_slice())).collect();

    let ph = photometric_loss(inputs.target, &views, weights.w_co, weights.w_st)?;
    let sz = sparse_consistency_loss(depth, inputs.sparse)?;
    let sm = smoothness_loss(depth, inputs.target)?;
    let mask = prior_mask(inputs.target, &views, &views0)?;
    let tp = topology_prior_loss(depth, inputs.d0, &mask.w)?;

    let parts = LossParts {
        ph: ph.value,
        sz: sz.value,
        sm: sm.value,
        tp: tp.value,
    };
    let mut report = total_loss(parts, weights, step, tp_start_step);
    report.w_coverage = mask.coverage();

    let mut grad_depth = Tensor::zeros(1, depth.height(), depth.width());
    let mut grad_poses = Vec::with_capacity(recs.len());
    for (rec, g_img) in recs.iter().zip(&ph.grads) {
        let mut up = g_img.clone();
        up.scale(weights.w_ph);
        grad_depth.add_assign(&rec.depth_gradient(&up));
        grad_poses.push(rec.pose_gradient(&up));
    }
    let mut add = |g: &Tensor, w: f64| {
        for (o, v) in grad_depth.data_mut().iter_mut().zip(g.data()) {
            *o += w * v;
        }
    };
    add(&sz.grad, weights.w_sz);
    add(&sm.grad, weights.w_sm);
    if report.tp_active {
        add(&tp.grad, weights.w_tp);
    }
    Ok(UnsupervisedLoss {
        report,
        grad_depth,
        grad_poses,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(lo..hi))
    }

    /// Norm-wise relative error between an analytic and a numeric gradient.
    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    fn numeric_grad(x: &Tensor, step: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += step;
                let mut m = x.clone();
                m.data_mut()[i] -= step;
                (f(&p) - f(&m)) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn supervised_l0_examples() {
        let g = Tensor::filled(1, 3, 4, 2.0);
        assert_eq!(supervised_l0(&g, &g).unwrap().value, 0.0);
        assert_eq!(supervised_l0(&g.map(|v| 2.0 * v), &g).unwrap().value, 1.0);
        assert!((supervised_l0(&g.map(|v| v + 0.5), &g).unwrap().value - 0.25).abs() < 1e-15);
        let mut bad = g.clone();
        bad.set(0, 0, 0, 0.0);
        assert!(supervised_l0(&g, &bad).is_err());
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random(&mut rng, 3, 6, 7, 0.0, 1.0);
        let b = random(&mut rng, 3, 6, 7, 0.0, 1.0);
        assert!(ssim(&a, &a).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let ca = Tensor::filled(1, 4, 4, 0.2);
        let cb = Tensor::filled(1, 4, 4, 0.8);
        let expected = (2.0 * 0.2 * 0.8 + SSIM_C1) / (0.2f64.powi(2) + 0.8f64.powi(2) + SSIM_C1);
        for v in ssim(&ca, &cb).unwrap().data() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 2, 5, 6, 0.0, 1.0);
        let b = random(&mut rng, 2, 5, 6, 0.0, 1.0);
        let up = random(&mut rng, 2, 5, 6, -1.0, 1.0);
        let f = |x: &Tensor| ssim(x, &b).unwrap().data().iter().zip(up.data()).map(|(s, u)| s * u).sum::<f64>();
        let analytic = ssim_backward(&a, &b, &up).unwrap();
        let numeric = numeric_grad(&a, 1e-6, f);
        assert!(rel_err(analytic.data(), &numeric) < 1e-6);
    }

    #[test]
    fn photometric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random(&mut rng, 3, 6, 6, 0.1, 0.8);
        let mask = vec![true; 36];
        let v = [(&t, mask.as_slice())];
        assert_eq!(photometric_loss(&t, &v, 0.2, 0.4).unwrap().value, 0.0);
        let shifted = t.map(|x| x + 0.1);
        let v = [(&shifted, mask.as_slice()), (&shifted, mask.as_slice())];
        let one = photometric_loss(&t, &v, 1.0, 0.0).unwrap().value;
        assert!((one - 0.1).abs() < 1e-12);
        let two = photometric_loss(&t, &v, 2.0, 0.0).unwrap().value;
        assert!((two - 2.0 * one).abs() < 1e-15);
        let none = vec![false; 36];
        assert!(matches!(
            photometric_loss(&t, &[(&shifted, none.as_slice())], 1.0, 0.0),
            Err(Error::DegenerateWarp)
        ));
    }

    #[test]
    fn sparse_consistency_examples() {
        let mut z = Tensor::zeros(1, 3, 3);
        z.set(0, 0, 0, 2.0);
        z.set(0, 2, 1, 3.0);
        let sparse = SparseDepthMap::from_values(z.clone()).unwrap();
        assert_eq!(sparse_consistency_loss(&z, &sparse).unwrap().value, 0.0);
        assert!((sparse_consistency_loss(&z.map(|v| v + 1.0), &sparse).unwrap().value - 1.0).abs() < 1e-15);
        let mut d = z.clone();
        d.set(0, 0, 0, 2.2);
        d.set(0, 2, 1, 2.6);
        assert!((sparse_consistency_loss(&d, &sparse).unwrap().value - 0.3).abs() < 1e-12);
        let empty = SparseDepthMap::from_values(Tensor::zeros(1, 3, 3)).unwrap();
        assert!(sparse_consistency_loss(&d, &empty).is_err());
    }

    #[test]
    fn smoothness_examples() {
        let img = Tensor::filled(3, 5, 6, 0.5);
        assert_eq!(smoothness_loss(&Tensor::filled(1, 5, 6, 3.0), &img).unwrap().value, 0.0);
        let ramp = Tensor::from_fn(1, 5, 6, |_, _, x| x as f64);
        // Forward differences: the last column contributes nothing.
        let v = smoothness_loss(&ramp, &img).unwrap().value;
        assert!((v - 5.0 / 6.0).abs() < 1e-12);
        let edge = Tensor::from_fn(3, 5, 6, |_, _, x| if x < 3 { 0.0 } else { 1e6 });
        let (lx, _) = smoothness_weights(&edge);
        assert_eq!(lx.at(0, 2, 2), 0.0);
        assert_eq!(lx.at(0, 2, 1), 1.0);
    }

    #[test]
    fn prior_mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random(&mut rng, 3, 4, 4, 0.0, 1.0);
        let r = random(&mut rng, 3, 4, 4, 0.0, 1.0);
        let m = vec![true; 16];
        let same = prior_mask(&t, &[(&r, &m)], &[(&r, &m)]).unwrap();
        assert_eq!(same.coverage(), 0.0);
        let mut worse = r.clone();
        let bumped = worse.at(0, 1, 2) + if t.at(0, 1, 2) > r.at(0, 1, 2) { -0.01 } else { 0.01 };
        worse.set(0, 1, 2, bumped);
        let one = prior_mask(&t, &[(&worse, &m)], &[(&r, &m)]).unwrap();
        assert_eq!(one.w.data().iter().sum::<f64>(), 1.0);
        assert_eq!(one.w.at(0, 1, 2), 1.0);
    }

    #[test]
    fn topology_prior_examples() {
        let d0 = Tensor::filled(1, 4, 4, 2.0);
        let ones = Tensor::filled(1, 4, 4, 1.0);
        assert_eq!(topology_prior_loss(&d0, &d0, &ones).unwrap().value, 0.0);
        let d = d0.map(|v| v + 0.3);
        assert_eq!(topology_prior_loss(&d, &d0, &Tensor::zeros(1, 4, 4)).unwrap().value, 0.0);
        assert!((topology_prior_loss(&d, &d0, &ones).unwrap().value - 0.3).abs() < 1e-12);
        let half = Tensor::from_fn(1, 4, 4, |_, y, _| if y < 2 { 1.0 } else { 0.0 });
        assert!((topology_prior_loss(&d, &d0, &half).unwrap().value - 0.3).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights {
            w_ph: 1.0,
            w_sz: 0.1,
            w_sm: 0.01,
            w_tp: 0.1,
            ..LossWeights::scanline()
        };
        let parts = LossParts {
            ph: 0.2,
            sz: 0.5,
            sm: 1.0,
            tp: 0.4,
        };
        let r = total_loss(parts, &w, 10, 10);
        assert!((r.total - 0.3).abs() < 1e-12);
        let early = total_loss(parts, &w, 9, 10);
        assert!(!early.tp_active);
        assert!((early.total - 0.26).abs() < 1e-12);
        assert_eq!(total_loss(LossParts::default(), &w, 20, 10).total, 0.0);
        assert!(LossWeights { w_sm: -1.0, ..w }.validate().is_err());
        assert_eq!(LossWeights::corner().w_sz, 1.0);
    }

    fn warp_instance(seed: u64) -> (Tensor, Vec<Tensor>, Vec<Pose>, Intrinsics, SparseDepthMap, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (16, 16);
        let k = Intrinsics::centered(w, h, rng.random_range(0.8..1.2));
        let tex = |rng: &mut ChaCha8Rng| {
            let (fx, fy, ph) = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random_range(0.0..6.0));
            Tensor::from_fn(3, h, w, move |c, y, x| 0.5 + 0.35 * ((x as f64) * fx + (y as f64) * fy + ph + c as f64).sin())
        };
        let target = tex(&mut rng);
        let sources = vec![tex(&mut rng), tex(&mut rng)];
        let poses = (0..2)
            .map(|_| {
                Pose::from_twist(
                    Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
                    Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)),
                )
            })
            .collect();
        let (a, b) = (rng.random_range(0.1..0.3), rng.random_range(-0.2..0.2));
        let depth = Tensor::from_fn(1, h, w, |_, y, x| 2.0 + a * (x as f64 * 0.3).sin() + b * (y as f64 * 0.2).cos());
        let d0 = depth.map(|v| v * 1.05 + 0.02);
        let idx: Vec<usize> = (0..12).map(|_| rng.random_range(0..h * w)).collect();
        let gt = depth.map(|v| v + 0.1);
        let sparse = SparseDepthMap::from_indices(&gt, idx).unwrap();
        (target, sources, poses, k, sparse, depth, d0)
    }

    #[test]
    fn unsupervised_gradients_match_finite_differences() {
        for seed in 0..4 {
            let (target, sources, poses, k, sparse, depth, d0) = warp_instance(seed);
            let views: Vec<SourceView> = sources.iter().zip(&poses).map(|(image, &pose)| SourceView { image, pose }).collect();
            let inputs = UnsupervisedInputs {
                target: &target,
                sources: &views,
                intrinsics: &k,
                sparse: &sparse,
                d0: &d0,
            };
            let w = LossWeights::corner();
            let out = unsupervised_loss(&inputs, &depth, &w, 1, 0).unwrap();
            // Hold the prior mask fixed, as the analytic gradient does.
            let mask = out.mask.w.clone();
            let f = |d: &Tensor| {
                let recs: Vec<_> = views.iter().map(|s| reconstruct(s.image, d, &k, &s.pose).unwrap()).collect();
                let v: Vec<(&Tensor, &[bool])> = recs.iter().map(|r| (&r.image, r.mask.as_slice())).collect();
                w.w_ph * photometric_loss(&target, &v, w.w_co, w.w_st).unwrap().value
                    + w.w_sz * sparse_consistency_loss(d, &sparse).unwrap().value
                    + w.w_sm * smoothness_loss(d, &target).unwrap().value
                    + w.w_tp * topology_prior_loss(d, &d0, &mask).unwrap().value
            };
            let numeric = numeric_grad(&depth, 1e-6, f);
            let err = rel_err(out.grad_depth.data(), &numeric);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn losses_are_non_negative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random(&mut rng, 3, 6, 6, 0.0, 1.0);
            let r = random(&mut rng, 3, 6, 6, 0.0, 1.0);
            let m: Vec<bool> = (0..36).map(|i| i % 7 != 0).collect();
            prop_assert!(photometric_loss(&t, &[(&r, &m)], 0.2, 0.4).unwrap().value >= 0.0);
            let d = random(&mut rng, 1, 6, 6, 0.5, 5.0);
            let g = random(&mut rng, 1, 6, 6, 0.5, 5.0);
            prop_assert!(supervised_l0(&d, &g).unwrap().value >= 0.0);
            prop_assert!(smoothness_loss(&d, &t).unwrap().value >= 0.0);
            let w = Tensor::from_fn(1, 6, 6, |_, _, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            prop_assert!(topology_prior_loss(&d, &g, &w).unwrap().value >= 0.0);
        }

        #[test]
        fn prior_mask_is_rescaling_invariant(seed in 0u64..10_000, s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random(&mut rng, 3, 5, 5, 0.0, 1.0);
            let a = random(&mut rng, 3, 5, 5, 0.0, 1.0);
            let b = random(&mut rng, 3, 5, 5, 0.0, 1.0);
            let m = vec![true; 25];
            let base = prior_mask(&t, &[(&a, &m)], &[(&b, &m)]).unwrap();
            let scale = |x: &Tensor| x.map(|v| v * s);
            let (ts, as_, bs) = (scale(&t), scale(&a), scale(&b));
            let scaled = prior_mask(&ts, &[(&as_, &m)], &[(&bs, &m)]).unwrap();
            prop_assert_eq!(base.w, scaled.w);
        }
    }
}
