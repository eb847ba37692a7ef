//! Sparse depth from dense ground truth: Harris corners thinned by k-means,
//! lidar-like scanlines, or uniform random pixels.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Depth on a pixel subset. `values` is zero exactly where `valid` is false.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthMap {
    values: Tensor,
    valid: Vec<bool>,
}

impl SparseDepthMap {
    /// Keep `dense` at the listed pixel indices.
    pub fn from_indices(dense: &Tensor, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        if dense.channels() != 1 {
            return Err(Error::ShapeMismatch("dense depth must have one channel".into()));
        }
        let mut values = Tensor::zeros(1, dense.height(), dense.width());
        let mut valid = vec![false; dense.len()];
        for i in indices {
            let d = dense.data()[i];
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidInput(format!("non-positive depth {d} at pixel {i}")));
            }
            values.data_mut()[i] = d;
            valid[i] = true;
        }
        Ok(Self { values, valid })
    }

    /// Interpret positive entries of a one-channel map as measurements.
    pub fn from_values(values: Tensor) -> Result<Self> {
        if values.channels() != 1 {
            return Err(Error::ShapeMismatch("sparse depth must have one channel".into()));
        }
        if values.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("sparse depth must be finite and non-negative".into()));
        }
        let valid = values.data().iter().map(|&v| v > 0.0).collect();
        Ok(Self { values, valid })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.valid.len() as f64
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }

    /// Two-channel network input: depth and validity.
    pub fn to_input(&self) -> Tensor {
        let mask = self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 });
        let data = self.values.data().iter().copied().chain(mask).collect();
        Tensor::from_vec(2, self.height(), self.width(), data).expect("sizes agree")
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_values(self.values.flip_horizontal()).expect("flip keeps values valid")
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        Self::from_values(self.values.crop(top, left, height, width)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SamplingStrategy {
    HarrisKmeans {
        points: usize,
        #[serde(default = "default_kappa")]
        kappa: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    Scanline {
        points: usize,
        #[serde(default = "default_dropout")]
        dropout: f64,
        #[serde(default = "default_angular_jitter")]
        angular_jitter_deg: f64,
    },
    Uniform {
        points: usize,
    },
}

fn default_kappa() -> f64 {
    0.04
}
fn default_sigma() -> f64 {
    1.0
}
fn default_dropout() -> f64 {
    0.2
}
fn default_angular_jitter() -> f64 {
    0.5
}

impl SamplingStrategy {
    pub fn corners(points: usize) -> Self {
        Self::HarrisKmeans {
            points,
            kappa: default_kappa(),
            sigma: default_sigma(),
        }
    }

    pub fn scanlines(points: usize) -> Self {
        Self::Scanline {
            points,
            dropout: default_dropout(),
            angular_jitter_deg: default_angular_jitter(),
        }
    }

    pub fn points(&self) -> usize {
        match *self {
            Self::HarrisKmeans { points, .. } | Self::Scanline { points, .. } | Self::Uniform { points } => points,
        }
    }

    pub fn with_points(&self, points: usize) -> Self {
        let mut s = self.clone();
        match &mut s {
            Self::HarrisKmeans { points: p, .. } | Self::Scanline { points: p, .. } | Self::Uniform { points: p } => {
                *p = points
            }
        }
        s
    }

    /// Point count giving `density` on a `width x height` grid.
    pub fn points_for_density(density: f64, width: usize, height: usize) -> usize {
        ((density * (width * height) as f64).round() as usize).max(1)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::HarrisKmeans { .. } => "harris-kmeans",
            Self::Scanline { .. } => "scanline",
            Self::Uniform { .. } => "uniform",
        }
    }
}

/// Sobel gradients with replicated borders.
fn sobel(img: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (img.height(), img.width());
    let p = img.plane(0);
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        p[yy * w + xx]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Separable Gaussian blur with replicated borders, radius `ceil(3 sigma)`.
fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| {
                    let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                    k * data[y * w + xx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| {
                    let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                    k * tmp[yy * w + x]
                })
                .sum();
        }
    }
    out
}

/// Harris corner response `det(M) - kappa * trace(M)^2` of a grayscale image,
/// with Sobel gradients and a Gaussian window of width `sigma`.
pub fn harris_response(image: &Tensor, kappa: f64, sigma: f64) -> Result<Tensor> {
    if image.channels() != 1 {
        return Err(Error::ShapeMismatch("harris_response expects a grayscale image".into()));
    }
    if !image.is_finite() {
        return Err(Error::InvalidInput("image contains non-finite values".into()));
    }
    let (h, w) = (image.height(), image.width());
    let (gx, gy) = sobel(image);
    let xx: Vec<f64> = gx.iter().map(|g| g * g).collect();
    let yy: Vec<f64> = gy.iter().map(|g| g * g).collect();
    let xy: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
    let (sxx, syy, sxy) = (
        gaussian_blur(&xx, h, w, sigma),
        gaussian_blur(&yy, h, w, sigma),
        gaussian_blur(&xy, h, w, sigma),
    );
    let r = (0..h * w)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - kappa * tr * tr
        })
        .collect();
    Tensor::from_vec(1, h, w, r)
}

/// Pixels whose response is a strict-positive 3x3 local maximum, strongest first.
pub fn corner_candidates(response: &Tensor) -> Vec<(usize, usize, f64)> {
    let (h, w) = (response.height(), response.width());
    let r = response.plane(0);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = r[y * w + x];
            if v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nbhd: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let u = r[yy as usize * w + xx as usize];
                    // Ties go to the first pixel in raster order.
                    if u > v || (u == v && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'nbhd;
                    }
                }
            }
            if is_max {
                out.push((x, y, v));
            }
        }
    }
    sort_by_score(&mut out);
    out
}

fn sort_by_score(v: &mut [(usize, usize, f64)]) {
    v.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansSelection {
    /// Selected `(x, y)` positions, all drawn from the input.
    pub points: Vec<(usize, usize)>,
    /// How many fewer than `k` points were available.
    pub shortfall: usize,
}

const KMEANS_MAX_ITERS: usize = 50;
const KMEANS_TOLERANCE_PX: f64 = 0.5;

/// Spread `k` picks over the candidates: Lloyd's algorithm on pixel
/// coordinates with k-means++ seeding, then each centroid takes its nearest
/// not-yet-taken candidate. Scores are carried for interface symmetry with
/// the detector but do not influence the clustering.
pub fn kmeans_subsample(points: &[(usize, usize, f64)], k: usize, seed: u64) -> Result<KmeansSelection> {
    if k == 0 {
        return Err(Error::InvalidInput("k-means needs k >= 1".into()));
    }
    if points.len() <= k {
        return Ok(KmeansSelection {
            points: points.iter().map(|p| (p.0, p.1)).collect(),
            shortfall: k - points.len(),
        });
    }
    let coords: Vec<[f64; 2]> = points.iter().map(|p| [p.0 as f64, p.1 as f64]).collect();
    let dist2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut rng = rng_for(seed, "kmeans", 0);

    let mut centroids = vec![coords[rng.random_range(0..coords.len())]];
    let mut nearest: Vec<f64> = coords.iter().map(|c| dist2(c, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = nearest.len() - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..coords.len())
        };
        let c = coords[pick];
        for (n, p) in nearest.iter_mut().zip(&coords) {
            *n = n.min(dist2(p, &c));
        }
        centroids.push(c);
    }

    let mut assign = vec![0usize; coords.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        for (a, p) in assign.iter_mut().zip(&coords) {
            *a = (0..k)
                .min_by(|&i, &j| dist2(p, &centroids[i]).total_cmp(&dist2(p, &centroids[j])))
                .expect("k >= 1");
        }
        let mut sums = vec![[0.0, 0.0, 0.0]; k];
        for (a, p) in assign.iter().zip(&coords) {
            sums[*a][0] += p[0];
            sums[*a][1] += p[1];
            sums[*a][2] += 1.0;
        }
        let mut moved: f64 = 0.0;
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                let next = [s[0] / s[2], s[1] / s[2]];
                moved = moved.max(dist2(c, &next).sqrt());
                *c = next;
            }
        }
        if moved < KMEANS_TOLERANCE_PX {
            break;
        }
    }

    let mut taken = vec![false; coords.len()];
    let selected = centroids
        .iter()
        .map(|c| {
            let i = (0..coords.len())
                .filter(|&i| !taken[i])
                .min_by(|&i, &j| dist2(&coords[i], c).total_cmp(&dist2(&coords[j], c)))
                .expect("more candidates than centroids");
            taken[i] = true;
            (points[i].0, points[i].1)
        })
        .collect();
    Ok(KmeansSelection {
        points: selected,
        shortfall: 0,
    })
}

/// Lidar-like rows in the lower half of the image. Each of `lines` rows sits
/// at a random height inside its own band, optionally tilted by up to
/// `angular_jitter_deg`; then exactly `round(dropout * count)` of the covered
/// pixels are removed at random.
pub fn sample_scanlines(
    depth: &Tensor,
    lines: usize,
    dropout: f64,
    angular_jitter_deg: f64,
    seed: u64,
) -> Result<SparseDepthMap> {
    if lines == 0 {
        return Err(Error::InvalidInput("scanline sampling needs at least one line".into()));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::InvalidInput(format!("dropout must lie in [0, 1), got {dropout}")));
    }
    let (h, w) = (depth.height(), depth.width());
    let mut rng = rng_for(seed, "scanlines", 0);
    let region = (h / 2).max(lines).min(h);
    let top = h - region;
    let band = region as f64 / lines as f64;
    let mut covered = vec![false; h * w];
    for l in 0..lines {
        let lo = top as f64 + l as f64 * band;
        let row = (lo + rng.random_range(0.0..band)).floor().min((h - 1) as f64);
        let slope = if angular_jitter_deg > 0.0 {
            rng.random_range(-angular_jitter_deg..angular_jitter_deg).to_radians().tan()
        } else {
            0.0
        };
        for x in 0..w {
            let y = (row + slope * (x as f64 - (w as f64 - 1.0) / 2.0)).round();
            let y = y.clamp(top as f64, (h - 1) as f64) as usize;
            covered[y * w + x] = true;
        }
    }
    let mut kept: Vec<usize> = (0..h * w).filter(|&i| covered[i]).collect();
    let drop = (dropout * kept.len() as f64).round() as usize;
    let keep = kept.len() - drop;
    let chosen = index::sample(&mut rng, kept.len(), keep);
    let mut picked: Vec<usize> = chosen.into_iter().map(|i| kept[i]).collect();
    picked.sort_unstable();
    kept = picked;
    SparseDepthMap::from_indices(depth, kept)
}

fn uniform_indices(n_pixels: usize, points: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    index::sample(rng, n_pixels, points.min(n_pixels)).into_vec()
}

/// Sparse measurements following `strategy`, with `points` retained pixels
/// (fewer only if the image offers too few corners).
pub fn make_sparse(
    depth: &Tensor,
    image: Option<&Tensor>,
    strategy: &SamplingStrategy,
    seed: u64,
) -> Result<SparseDepthMap> {
    let (h, w) = (depth.height(), depth.width());
    let n = strategy.points();
    if n == 0 || n > h * w {
        return Err(Error::InvalidInput(format!(
            "point count {n} must lie in [1, {}]",
            h * w
        )));
    }
    match *strategy {
        SamplingStrategy::Uniform { .. } => {
            let mut rng = rng_for(seed, "uniform", 0);
            SparseDepthMap::from_indices(depth, uniform_indices(h * w, n, &mut rng))
        }
        SamplingStrategy::Scanline {
            dropout,
            angular_jitter_deg,
            ..
        } => {
            let per_line = w as f64 * (1.0 - dropout);
            let lines = ((n as f64 / per_line).ceil() as usize).max(1);
            let full = sample_scanlines(depth, lines, dropout, angular_jitter_deg, seed)?;
            let mut idx: Vec<usize> = full.indices().collect();
            if idx.len() > n {
                let mut rng = rng_for(seed, "scanline-trim", 0);
                let mut keep = index::sample(&mut rng, idx.len(), n).into_vec();
                keep.sort_unstable();
                idx = keep.into_iter().map(|i| idx[i]).collect();
            }
            SparseDepthMap::from_indices(depth, idx)
        }
        SamplingStrategy::HarrisKmeans { kappa, sigma, .. } => {
            let image = image.ok_or_else(|| {
                Error::InvalidInput("harris-kmeans sampling requires an image".into())
            })?;
            if image.height() != h || image.width() != w {
                return Err(Error::ShapeMismatch(format!(
                    "image {:?} vs depth {:?}",
                    image.shape(),
                    depth.shape()
                )));
            }
            let response = harris_response(&image.to_gray(), kappa, sigma)?;
            let mut candidates = corner_candidates(&response);
            if candidates.len() < n {
                // Top up with the strongest remaining pixels.
                let mut is_candidate = vec![false; h * w];
                for c in &candidates {
                    is_candidate[c.1 * w + c.0] = true;
                }
                let mut rest: Vec<(usize, usize, f64)> = (0..h * w)
                    .filter(|&i| !is_candidate[i])
                    .map(|i| (i % w, i / w, response.data()[i]))
                    .collect();
                sort_by_score(&mut rest);
                candidates.extend(rest.into_iter().take(n - candidates.len()));
            }
            let picked = kmeans_subsample(&candidates, n, seed)?;
            SparseDepthMap::from_indices(depth, picked.points.iter().map(|&(x, y)| y * w + x))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(1, h, w, |_, y, x| 1.0 + 0.01 * (y * w + x) as f64)
    }

    #[test]
    fn constant_image_has_zero_response() {
        let r = harris_response(&Tensor::filled(1, 12, 12, 0.4), 0.04, 1.0).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    /// Eigenvalues of the 2x2 structure tensor, computed independently.
    fn eigen_response(sxx: f64, syy: f64, sxy: f64, kappa: f64) -> f64 {
        let m = nalgebra::Matrix2::new(sxx, sxy, sxy, syy);
        let e = m.symmetric_eigenvalues();
        e[0] * e[1] - kappa * (e[0] + e[1]).powi(2)
    }

    #[test]
    fn step_edge_is_not_a_corner() {
        let img = Tensor::from_fn(1, 20, 20, |_, _, x| if x < 10 { 0.0 } else { 1.0 });
        let r = harris_response(&img, 0.04, 1.0).unwrap();
        for y in 4..16 {
            for x in 8..12 {
                assert!(r.at(0, y, x) <= 1e-12);
            }
        }
        // One gradient direction: lambda2 = 0, so R = -kappa * lambda1^2.
        assert!(eigen_response(4.0, 0.0, 0.0, 0.04) <= 0.0);
    }

    #[test]
    fn square_corners_win() {
        let img = Tensor::from_fn(1, 32, 32, |_, y, x| {
            if (8..24).contains(&x) && (8..24).contains(&y) {
                1.0
            } else {
                0.0
            }
        });
        let r = harris_response(&img, 0.04, 1.0).unwrap();
        // Brute-force eigenvalue evaluation of the same structure tensor.
        let (gx, gy) = sobel(&img);
        let blur = |v: Vec<f64>| gaussian_blur(&v, 32, 32, 1.0);
        let sxx = blur(gx.iter().map(|g| g * g).collect());
        let syy = blur(gy.iter().map(|g| g * g).collect());
        let sxy = blur(gx.iter().zip(&gy).map(|(a, b)| a * b).collect());
        for i in 0..32 * 32 {
            let e = eigen_response(sxx[i], syy[i], sxy[i], 0.04);
            assert!((e - r.data()[i]).abs() <= 1e-9 * (1.0 + e.abs()));
        }
        let top: Vec<_> = corner_candidates(&r).into_iter().take(4).collect();
        let corners = [(8.0, 8.0), (23.0, 8.0), (8.0, 23.0), (23.0, 23.0)];
        for c in corners {
            assert!(
                top.iter().any(|p| (p.0 as f64 - c.0).abs() <= 1.5 && (p.1 as f64 - c.1).abs() <= 1.5),
                "no response near {c:?}: {top:?}"
            );
        }
    }

    #[test]
    fn kmeans_with_k_equal_to_count_returns_input() {
        let pts: Vec<_> = (0..7).map(|i| (i * 3, i * 2 % 5, 1.0)).collect();
        let sel = kmeans_subsample(&pts, 7, 1).unwrap();
        let mut got = sel.points.clone();
        got.sort();
        let mut want: Vec<_> = pts.iter().map(|p| (p.0, p.1)).collect();
        want.sort();
        assert_eq!(got, want);
        assert_eq!(sel.shortfall, 0);
        assert_eq!(kmeans_subsample(&pts, 10, 1).unwrap().shortfall, 3);
    }

    #[test]
    fn kmeans_finds_each_tight_cluster() {
        let mut pts = vec![];
        for i in 0..6 {
            pts.push((10 + i % 3, 10 + i / 3, 1.0));
            pts.push((50 + i % 3, 40 + i / 3, 1.0));
        }
        // Exhaustive 2-partition oracle: the optimal split separates the clusters.
        let n = pts.len();
        let sse = |mask: u32| -> f64 {
            let mut total = 0.0;
            for side in [0, 1] {
                let grp: Vec<_> = (0..n).filter(|&i| ((mask >> i) & 1) == side).collect();
                if grp.is_empty() {
                    continue;
                }
                let mx = grp.iter().map(|&i| pts[i].0 as f64).sum::<f64>() / grp.len() as f64;
                let my = grp.iter().map(|&i| pts[i].1 as f64).sum::<f64>() / grp.len() as f64;
                total += grp
                    .iter()
                    .map(|&i| (pts[i].0 as f64 - mx).powi(2) + (pts[i].1 as f64 - my).powi(2))
                    .sum::<f64>();
            }
            total
        };
        let best = (1..(1u32 << n) - 1).min_by(|&a, &b| sse(a).total_cmp(&sse(b))).unwrap();
        let best_groups: Vec<bool> = (0..n).map(|i| (best >> i) & 1 == 1).collect();
        assert!((0..n).all(|i| best_groups[i] == best_groups[i % 2]));
        for seed in 0..5 {
            let sel = kmeans_subsample(&pts, 2, seed).unwrap();
            let near_a = sel.points.iter().filter(|p| p.0 < 30).count();
            assert_eq!(near_a, 1, "seed {seed}: {:?}", sel.points);
        }
        assert_eq!(kmeans_subsample(&pts, 2, 9).unwrap(), kmeans_subsample(&pts, 2, 9).unwrap());
    }

    #[test]
    fn scanline_examples() {
        let d = ramp(120, 160);
        let s = sample_scanlines(&d, 4, 0.0, 0.0, 3).unwrap();
        assert_eq!(s.count(), 4 * 160);
        assert!((s.density() - 4.0 * 160.0 / (160.0 * 120.0)).abs() < 1e-12);
        assert!(s.indices().all(|i| i / 160 >= 60));

        let every = sample_scanlines(&d, 60, 0.0, 0.0, 3).unwrap();
        assert!(every.indices().count() == 60 * 160);
        assert!((60..120).all(|y| (0..160).all(|x| every.valid()[y * 160 + x])));

        let dropped = sample_scanlines(&d, 4, 0.2, 0.0, 3).unwrap();
        assert_eq!(dropped.count(), 4 * 160 - 128);
    }

    #[test]
    fn make_sparse_density_targets() {
        let d = ramp(240, 320);
        let img = Tensor::from_fn(3, 240, 320, |c, y, x| {
            0.5 + 0.4 * ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.25).cos())
        });
        let s = make_sparse(&d, Some(&img), &SamplingStrategy::corners(375), 1).unwrap();
        assert!((s.density() - 0.0049).abs() <= 0.1 * 0.0049, "density {}", s.density());
        let s = make_sparse(&d, None, &SamplingStrategy::scanlines(1000), 1).unwrap();
        assert_eq!(s.count(), 1000);
        assert!(make_sparse(&d, None, &SamplingStrategy::corners(375), 1).is_err());

        let small = ramp(6, 5);
        let all = make_sparse(&small, None, &SamplingStrategy::Uniform { points: 30 }, 1).unwrap();
        assert!(all.valid().iter().all(|&v| v));
    }

    #[test]
    fn void_scale_density() {
        let d = ramp(480, 640);
        let s = make_sparse(&d, None, &SamplingStrategy::Uniform { points: 1500 }, 4).unwrap();
        assert!((s.density() - 0.005).abs() <= 0.1 * 0.005);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn retained_values_equal_ground_truth(seed in 0u64..1000, n in 1usize..200, kind in 0usize..3) {
            let d = Tensor::from_fn(1, 24, 32, |_, y, x| 0.5 + ((x * 7 + y * 3) % 11) as f64);
            let img = Tensor::from_fn(3, 24, 32, |_, y, x| ((x / 4 + y / 4) % 2) as f64);
            let strategy = match kind {
                0 => SamplingStrategy::corners(n),
                1 => SamplingStrategy::scanlines(n),
                _ => SamplingStrategy::Uniform { points: n },
            };
            let s = make_sparse(&d, Some(&img), &strategy, seed).unwrap();
            for i in 0..d.len() {
                prop_assert_eq!(s.valid()[i], s.values().data()[i] > 0.0);
                if s.valid()[i] {
                    prop_assert_eq!(s.values().data()[i], d.data()[i]);
                }
            }
            prop_assert!(s.count() <= n);
            prop_assert_eq!(&s, &make_sparse(&d, Some(&img), &strategy, seed).unwrap());
        }

        #[test]
        fn density_grows_with_point_count(seed in 0u64..1000, n in 1usize..300) {
            let d = ramp(24, 32);
            let img = Tensor::from_fn(3, 24, 32, |_, y, x| ((x * x + y) % 7) as f64 / 7.0);
            for strategy in [SamplingStrategy::corners(n), SamplingStrategy::Uniform { points: n }] {
                let a = make_sparse(&d, Some(&img), &strategy, seed).unwrap();
                let b = make_sparse(&d, Some(&img), &strategy.with_points(n + 20), seed).unwrap();
                prop_assert!(b.density() > a.density());
            }
        }
    }
}
