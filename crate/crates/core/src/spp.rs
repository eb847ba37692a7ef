//! Spatial pyramid pooling over sparse depth: stride-1 max pools at several
//! window sizes, stacked with the raw input and re-weighted pointwise by three
//! 1x1 convolutions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Conv2d, ParamLayout, Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SppConfig {
    pub kernel_sizes: Vec<usize>,
    pub conv_channels: [usize; 3],
}

impl SppConfig {
    /// Pools sized for lidar scanlines.
    pub fn scanline() -> Self {
        Self {
            kernel_sizes: vec![5, 7, 9, 11],
            conv_channels: [32, 32, 32],
        }
    }

    /// One more, larger pool for the sparser corner points.
    pub fn corner() -> Self {
        Self {
            kernel_sizes: vec![5, 7, 9, 11, 13],
            conv_channels: [32, 32, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_kernels(&self.kernel_sizes)?;
        if self.conv_channels.contains(&0) {
            return Err(Error::InvalidInput("SPP conv channels must be positive".into()));
        }
        Ok(())
    }

    /// Channels of the stacked pyramid.
    pub fn pyramid_channels(&self) -> usize {
        2 * (1 + self.kernel_sizes.len())
    }

    pub fn out_channels(&self) -> usize {
        self.conv_channels[2]
    }
}

fn validate_kernels(kernels: &[usize]) -> Result<()> {
    for k in kernels {
        if *k < 3 || k % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "pool sizes must be odd and at least 3, got {k}"
            )));
        }
    }
    if kernels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(format!(
            "pool sizes must be strictly increasing, got {kernels:?}"
        )));
    }
    Ok(())
}

/// Parse `5,7,9,11` style lists.
pub fn parse_kernel_list(s: &str) -> Result<Vec<usize>> {
    let kernels = s
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::InvalidInput(format!("invalid pool size `{t}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_kernels(&kernels)?;
    Ok(kernels)
}

fn check_sparse_input(input: &Tensor) -> Result<()> {
    if input.channels() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "sparse input must have 2 channels (depth, validity), got {}",
            input.channels()
        )));
    }
    let n = input.plane_len();
    let (z, m) = (input.plane(0), input.plane(1));
    for i in 0..n {
        let ok = z[i].is_finite() && z[i] >= 0.0 && (m[i] == 0.0 || m[i] == 1.0) && ((z[i] > 0.0) == (m[i] == 1.0));
        if !ok {
            return Err(Error::InvalidInput(format!(
                "sparse input inconsistent at pixel {i}: depth {}, validity {}",
                z[i], m[i]
            )));
        }
    }
    Ok(())
}

/// Stride-1 "same" max pool with zero padding, separable into rows and columns.
pub fn max_pool_same(plane: &[f64], height: usize, width: usize, kernel: usize) -> Vec<f64> {
    let r = kernel / 2;
    let mut rows = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(width - 1);
            // Zero padding: out-of-image taps contribute 0.
            let pad = if x < r || x + r >= width { 0.0 } else { f64::NEG_INFINITY };
            rows[y * width + x] = row[lo..=hi].iter().copied().fold(pad, f64::max);
        }
    }
    let mut out = vec![0.0; plane.len()];
    for x in 0..width {
        for y in 0..height {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(height - 1);
            let pad = if y < r || y + r >= height { 0.0 } else { f64::NEG_INFINITY };
            out[y * width + x] = (lo..=hi).map(|yy| rows[yy * width + x]).fold(pad, f64::max);
        }
    }
    out
}

/// Raw input followed by one max-pooled copy of both channels per kernel size.
pub fn pool_pyramid(input: &Tensor, kernel_sizes: &[usize]) -> Result<Tensor> {
    check_sparse_input(input)?;
    validate_kernels(kernel_sizes)?;
    let (h, w) = (input.height(), input.width());
    let mut data = input.data().to_vec();
    for &k in kernel_sizes {
        for c in 0..2 {
            data.extend(max_pool_same(input.plane(c), h, w, k));
        }
    }
    Tensor::from_vec(2 * (1 + kernel_sizes.len()), h, w, data)
}

/// The three pointwise layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SppFuse {
    pub config: SppConfig,
    pub convs: [Conv2d; 3],
}

impl SppFuse {
    pub fn declare(layout: &mut ParamLayout, prefix: &str, config: &SppConfig) -> Self {
        let [c1, c2, c3] = config.conv_channels;
        let inp = config.pyramid_channels();
        let convs = [
            layout.conv(&format!("{prefix}.conv1"), inp, c1, 1, 1, LEAKY_SLOPE),
            layout.conv(&format!("{prefix}.conv2"), c1, c2, 1, 1, LEAKY_SLOPE),
            layout.conv(&format!("{prefix}.output_ssp"), c2, c3, 1, 1, LEAKY_SLOPE),
        ];
        Self {
            config: config.clone(),
            convs,
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum()
    }

    /// Fuse a pyramid already on the tape.
    pub fn fuse(&self, tape: &mut Tape<'_>, pyramid: Var) -> Result<Var> {
        let c = tape.value(pyramid).channels();
        if c != self.convs[0].in_channels {
            return Err(Error::ShapeMismatch(format!(
                "pyramid has {c} channels, SPP expects {}",
                self.convs[0].in_channels
            )));
        }
        let mut x = pyramid;
        for conv in &self.convs {
            x = tape.conv2d(x, *conv);
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        Ok(x)
    }

    /// Pool the sparse input (a constant: pooling needs no gradient) and fuse.
    pub fn forward(&self, tape: &mut Tape<'_>, sparse_input: &Tensor) -> Result<Var> {
        let pyramid = pool_pyramid(sparse_input, &self.config.kernel_sizes)?;
        let p = tape.input(pyramid);
        self.fuse(tape, p)
    }
}
