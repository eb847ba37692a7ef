//! ScaffNet (sparse points to dense topology), FusionNet (image-guided
//! refinement through a per-pixel scale and residual) and a small pose
//! regressor.
//!
//! Up-convolutions are nearest-neighbour upsampling by 2 followed by a 3x3
//! convolution, which has the same parameter count as a 3x3 transposed
//! convolution and no checkerboard artefacts.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_axis_angle_jacobian, Pose};
use crate::graph::{softplus_inverse, Conv2d, Init, ParamLayout, ParamStore, Tape, Var};
use crate::spp::{SppConfig, SppFuse};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;
/// Both encoders have five stride-2 stages.
pub const RESOLUTION_MULTIPLE: usize = 32;
/// Added after the softplus so predicted depth stays strictly positive.
pub const MIN_OUTPUT_DEPTH: f64 = 1e-3;

pub fn check_resolution(width: usize, height: usize) -> Result<()> {
    if width % RESOLUTION_MULTIPLE == 0 && height % RESOLUTION_MULTIPLE == 0 && width > 0 && height > 0 {
        Ok(())
    } else {
        Err(Error::resolution(width, height, RESOLUTION_MULTIPLE))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Channel widths of the reference architecture.
    Full,
    /// A quarter of the reference widths.
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "tiny" => Ok(Self::Tiny),
            _ => Err(Error::InvalidInput(format!("unknown preset `{s}` (expected full or tiny)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaffNetConfig {
    /// `None` feeds the raw two-channel input straight to the encoder.
    pub spp: Option<SppConfig>,
    pub encoder: [usize; 5],
    pub decoder: [usize; 5],
    /// Output bias is set so an untrained network predicts this depth.
    pub init_depth: f64,
}

impl ScaffNetConfig {
    pub fn preset(preset: Preset, spp: Option<SppConfig>) -> Self {
        match preset {
            Preset::Full => Self {
                spp,
                encoder: [32, 64, 96, 128, 196],
                decoder: [128, 96, 64, 64, 32],
                init_depth: 2.0,
            },
            Preset::Tiny => Self {
                spp: spp.map(|mut s| {
                    s.conv_channels = [8, 8, 8];
                    s
                }),
                encoder: [8, 16, 24, 32, 49],
                decoder: [32, 24, 16, 16, 8],
                init_depth: 2.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(spp) = &self.spp {
            spp.validate()?;
        }
        if self.encoder.contains(&0) || self.decoder.contains(&0) {
            return Err(Error::InvalidInput("ScaffNet channel counts must be positive".into()));
        }
        if !(self.init_depth > MIN_OUTPUT_DEPTH) {
            return Err(Error::InvalidInput("init_depth must exceed the output floor".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(ScaffNet::new(self.clone())?.param_count())
    }
}

/// Encoder stage plus the matching decoder stage widths, as used by both networks.
#[derive(Clone, Debug, PartialEq)]
struct UpBlock {
    up: Conv2d,
    fuse: Conv2d,
}

impl UpBlock {
    fn forward(&self, tape: &mut Tape<'_>, x: Var, skips: &[Var]) -> Var {
        let u = tape.upsample_nearest(x, 2);
        let u = tape.conv2d(u, self.up);
        let u = tape.leaky_relu(u, LEAKY_SLOPE);
        let mut parts = vec![u];
        parts.extend_from_slice(skips);
        let c = tape.concat(&parts);
        let c = tape.conv2d(c, self.fuse);
        tape.leaky_relu(c, LEAKY_SLOPE)
    }
}

fn encoder_stage(tape: &mut Tape<'_>, x: Var, conv: Conv2d) -> Var {
    let y = tape.conv2d(x, conv);
    tape.leaky_relu(y, LEAKY_SLOPE)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaffNet {
    pub config: ScaffNetConfig,
    layout: ParamLayout,
    spp: Option<SppFuse>,
    encoder: [Conv2d; 5],
    blocks: [UpBlock; 4],
    deconv1: Conv2d,
    output: Conv2d,
}

impl ScaffNet {
    pub fn new(config: ScaffNetConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let spp = config.spp.as_ref().map(|c| SppFuse::declare(&mut layout, "spp", c));
        let input_channels = config.spp.as_ref().map_or(2, SppConfig::out_channels);
        let e = config.encoder;
        let d = config.decoder;
        let s = LEAKY_SLOPE;
        let encoder = [
            layout.conv("encoder.conv1", input_channels, e[0], 5, 2, s),
            layout.conv("encoder.conv2", e[0], e[1], 3, 2, s),
            layout.conv("encoder.conv3", e[1], e[2], 3, 2, s),
            layout.conv("encoder.conv4", e[2], e[3], 3, 2, s),
            layout.conv("encoder.latent", e[3], e[4], 3, 2, s),
        ];
        let mut blocks = Vec::new();
        let mut prev = e[4];
        for (level, (&width, &skip)) in [5, 4, 3, 2].iter().zip(d[..4].iter().zip([e[3], e[2], e[1], e[0]].iter())) {
            let up = layout.conv(&format!("decoder.deconv{level}"), prev, width, 3, 1, s);
            let fuse = layout.conv(&format!("decoder.conv{level}"), width + skip, width, 3, 1, s);
            blocks.push(UpBlock { up, fuse });
            prev = width;
        }
        let deconv1 = layout.conv("decoder.deconv1", prev, d[4], 3, 1, s);
        let output = layout.conv("decoder.output", d[4], 1, 3, 1, 1.0);
        layout.spec_mut(output.bias).init =
            Init::Values(vec![softplus_inverse(config.init_depth - MIN_OUTPUT_DEPTH)]);
        Ok(Self {
            config,
            layout,
            spp,
            encoder,
            blocks: blocks.try_into().expect("four decoder blocks"),
            deconv1,
            output,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        self.layout.init(rng)
    }

    pub fn param_count(&self) -> usize {
        self.layout.num_scalars()
    }

    /// Dense depth from the two-channel sparse input `[z, validity]`.
    pub fn forward(&self, tape: &mut Tape<'_>, sparse_input: &Tensor) -> Result<Var> {
        if sparse_input.channels() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "ScaffNet expects a 2-channel sparse input, got {}",
                sparse_input.channels()
            )));
        }
        check_resolution(sparse_input.width(), sparse_input.height())?;
        let x = match &self.spp {
            Some(spp) => spp.forward(tape, sparse_input)?,
            None => tape.input(sparse_input.clone()),
        };
        let mut skips = Vec::with_capacity(5);
        let mut h = x;
        for conv in self.encoder {
            h = encoder_stage(tape, h, conv);
            skips.push(h);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, h, &[skips[3 - i]]);
        }
        let u = tape.upsample_nearest(h, 2);
        let u = tape.conv2d(u, self.deconv1);
        let u = tape.leaky_relu(u, LEAKY_SLOPE);
        let y = tape.conv2d(u, self.output);
        let y = tape.softplus(y);
        Ok(tape.affine(y, 1.0, MIN_OUTPUT_DEPTH))
    }

    pub fn predict(&self, params: &ParamStore, sparse_input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(params);
        let out = self.forward(&mut tape, sparse_input)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    /// `d = alpha * d0 + beta`.
    ScaleResidual,
    /// Depth regressed directly (softplus), with `d0` only as an input.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionNetConfig {
    pub image_encoder: [usize; 5],
    pub depth_encoder: [usize; 5],
    pub decoder: [usize; 4],
    pub head: OutputHead,
    /// Final depth is clamped to this range.
    pub depth_range: (f64, f64),
    /// Output bias of the direct head.
    pub init_depth: f64,
}

impl FusionNetConfig {
    pub fn preset(preset: Preset, depth_range: (f64, f64)) -> Self {
        let (image_encoder, depth_encoder, decoder) = match preset {
            Preset::Full => ([48, 96, 192, 384, 384], [16, 32, 64, 128, 128], [256, 128, 128, 64]),
            Preset::Tiny => ([12, 24, 48, 96, 96], [4, 8, 16, 32, 32], [64, 32, 32, 16]),
        };
        Self {
            image_encoder,
            depth_encoder,
            decoder,
            head: OutputHead::ScaleResidual,
            depth_range,
            init_depth: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_encoder.contains(&0) || self.depth_encoder.contains(&0) || self.decoder.contains(&0) {
            return Err(Error::InvalidInput("FusionNet channel counts must be positive".into()));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::InvalidInput(format!("invalid depth range [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(FusionNet::new(self.clone())?.param_count())
    }
}

/// Tape handles of one FusionNet evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// Final clamped depth.
    pub depth: Var,
    /// Full-resolution scale and residual; absent for the direct head.
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
    /// The topology estimate as fed to the network.
    pub d0: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet {
    pub config: FusionNetConfig,
    layout: ParamLayout,
    image: [Conv2d; 5],
    depth: [Conv2d; 5],
    blocks: [UpBlock; 3],
    deconv2: Conv2d,
    head: Conv2d,
}

impl FusionNet {
    pub fn new(config: FusionNetConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let s = LEAKY_SLOPE;
        let branch = |layout: &mut ParamLayout, tag: &str, input: usize, c: [usize; 5]| -> [Conv2d; 5] {
            [
                layout.conv(&format!("encoder.conv1_{tag}"), input, c[0], 5, 2, s),
                layout.conv(&format!("encoder.conv2_{tag}"), c[0], c[1], 3, 2, s),
                layout.conv(&format!("encoder.conv3_{tag}"), c[1], c[2], 3, 2, s),
                layout.conv(&format!("encoder.conv4_{tag}"), c[2], c[3], 3, 2, s),
                layout.conv(&format!("encoder.latent_{tag}"), c[3], c[4], 3, 2, s),
            ]
        };
        let (ie, de, d) = (config.image_encoder, config.depth_encoder, config.decoder);
        let image = branch(&mut layout, "image", 3, ie);
        let depth = branch(&mut layout, "depth", 2, de);

        // deconv5/conv5, deconv4/conv4, deconv3/conv3; conv3 narrows to the
        // width of deconv2.
        let mut blocks = Vec::new();
        let mut prev = ie[4] + de[4];
        let outs = [d[0], d[1], d[3]];
        for (i, level) in [5, 4, 3].into_iter().enumerate() {
            let skip = ie[3 - i] + de[3 - i];
            let up = layout.conv(&format!("decoder.deconv{level}"), prev, d[i], 3, 1, s);
            let fuse = layout.conv(&format!("decoder.conv{level}"), d[i] + skip, outs[i], 3, 1, s);
            blocks.push(UpBlock { up, fuse });
            prev = outs[i];
        }
        let deconv2 = layout.conv("decoder.deconv2", prev, d[3], 3, 1, s);
        let head_channels = match config.head {
            OutputHead::ScaleResidual => 2,
            OutputHead::Direct => 1,
        };
        let head = layout.conv("decoder.conv2", d[3] + ie[0] + de[0], head_channels, 3, 1, 1.0);
        match config.head {
            OutputHead::ScaleResidual => {
                // Start exactly at the topology estimate: alpha = 1, beta = 0.
                layout.spec_mut(head.weight).init = Init::Zeros;
                layout.spec_mut(head.bias).init = Init::Values(vec![1.0, 0.0]);
            }
            OutputHead::Direct => {
                layout.spec_mut(head.bias).init =
                    Init::Values(vec![softplus_inverse(config.init_depth - MIN_OUTPUT_DEPTH)]);
            }
        }
        Ok(Self {
            config,
            layout,
            image,
            depth,
            blocks: blocks.try_into().expect("three decoder blocks"),
            deconv2,
            head,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        self.layout.init(rng)
    }

    pub fn param_count(&self) -> usize {
        self.layout.num_scalars()
    }

    /// Refine `d0` given the image and the sparse depth `z` (one channel, 0 = absent).
    pub fn forward(&self, tape: &mut Tape<'_>, image: &Tensor, sparse: &Tensor, d0: &Tensor) -> Result<FusionOutput> {
        self.forward_impl(tape, image, sparse, d0, false)
    }

    /// As [`FusionNet::forward`], but `d0` is a tape variable so its gradient
    /// can be passed on to ScaffNet for joint finetuning.
    pub fn forward_with_d0_grad(
        &self,
        tape: &mut Tape<'_>,
        image: &Tensor,
        sparse: &Tensor,
        d0: &Tensor,
    ) -> Result<FusionOutput> {
        self.forward_impl(tape, image, sparse, d0, true)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape<'_>,
        image: &Tensor,
        sparse: &Tensor,
        d0: &Tensor,
        d0_grad: bool,
    ) -> Result<FusionOutput> {
        if image.channels() != 3 || sparse.channels() != 1 || d0.channels() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "FusionNet expects image/sparse/d0 with 3/1/1 channels, got {}/{}/{}",
                image.channels(),
                sparse.channels(),
                d0.channels()
            )));
        }
        if !(image.height() == sparse.height()
            && image.width() == sparse.width()
            && image.height() == d0.height()
            && image.width() == d0.width())
        {
            return Err(Error::ShapeMismatch(format!(
                "image {:?}, sparse {:?} and d0 {:?} differ in size",
                image.shape(),
                sparse.shape(),
                d0.shape()
            )));
        }
        check_resolution(image.width(), image.height())?;

        let img = tape.input(image.clone());
        let zv = tape.input(sparse.clone());
        let d0v = if d0_grad { tape.variable(d0.clone()) } else { tape.input(d0.clone()) };
        let dep = tape.concat(&[zv, d0v]);
        let mut img_skips = Vec::with_capacity(5);
        let mut dep_skips = Vec::with_capacity(5);
        let (mut hi, mut hd) = (img, dep);
        for (ci, cd) in self.image.iter().zip(&self.depth) {
            hi = encoder_stage(tape, hi, *ci);
            hd = encoder_stage(tape, hd, *cd);
            img_skips.push(hi);
            dep_skips.push(hd);
        }
        let mut h = tape.concat(&[hi, hd]);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, h, &[img_skips[3 - i], dep_skips[3 - i]]);
        }
        let u = tape.upsample_nearest(h, 2);
        let u = tape.conv2d(u, self.deconv2);
        let u = tape.leaky_relu(u, LEAKY_SLOPE);
        let u = tape.concat(&[u, img_skips[0], dep_skips[0]]);
        let half = tape.conv2d(u, self.head);
        let full = tape.upsample_nearest(half, 2);
        let (lo, hi_range) = self.config.depth_range;
        Ok(match self.config.head {
            OutputHead::ScaleResidual => {
                let alpha = tape.slice_channels(full, 0, 1);
                let beta = tape.slice_channels(full, 1, 1);
                let scaled = tape.mul(alpha, d0v);
                let d = tape.add(scaled, beta);
                FusionOutput {
                    depth: tape.clamp(d, lo, hi_range),
                    alpha: Some(alpha),
                    beta: Some(beta),
                    d0: d0v,
                }
            }
            OutputHead::Direct => {
                let d = tape.softplus(full);
                let d = tape.affine(d, 1.0, MIN_OUTPUT_DEPTH);
                FusionOutput {
                    depth: tape.clamp(d, lo, hi_range),
                    alpha: None,
                    beta: None,
                    d0: d0v,
                }
            }
        })
    }

    pub fn predict(&self, params: &ParamStore, image: &Tensor, sparse: &Tensor, d0: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(params);
        let out = self.forward(&mut tape, image, sparse, d0)?;
        Ok(tape.value(out.depth).clone())
    }
}

/// `clamp(alpha * d0 + beta, lo, hi)` outside of any tape.
pub fn compose_depth(alpha: &Tensor, beta: &Tensor, d0: &Tensor, range: (f64, f64)) -> Result<Tensor> {
    alpha.ensure_shape(d0, "alpha vs d0")?;
    beta.ensure_shape(d0, "beta vs d0")?;
    Ok(Tensor::from_fn(1, d0.height(), d0.width(), |_, y, x| {
        (alpha.at(0, y, x) * d0.at(0, y, x) + beta.at(0, y, x)).clamp(range.0, range.1)
    }))
}

/// Two-frame encoder regressing a relative pose.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseNet {
    layout: ParamLayout,
    convs: [Conv2d; 4],
    head: Conv2d,
}

/// Pose outputs are scaled down so that small initial weights give small motions.
pub const POSE_OUTPUT_SCALE: f64 = 0.01;

impl Default for PoseNet {
    fn default() -> Self {
        Self::new()
    }
}

impl PoseNet {
    pub fn new() -> Self {
        let mut layout = ParamLayout::new();
        let s = LEAKY_SLOPE;
        let convs = [
            layout.conv("pose.conv1", 6, 16, 3, 2, s),
            layout.conv("pose.conv2", 16, 32, 3, 2, s),
            layout.conv("pose.conv3", 32, 64, 3, 2, s),
            layout.conv("pose.conv4", 64, 64, 3, 2, s),
        ];
        let head = layout.conv("pose.output", 64, 6, 1, 1, 1.0);
        Self { layout, convs, head }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        self.layout.init(rng)
    }

    pub fn param_count(&self) -> usize {
        self.layout.num_scalars()
    }

    /// The raw 6-vector `[t, w]` on the tape (shape 6x1x1).
    pub fn forward(&self, tape: &mut Tape<'_>, target: &Tensor, source: &Tensor) -> Result<Var> {
        target.ensure_shape(source, "pose network frames")?;
        let x = tape.input(Tensor::concat(&[target, source])?);
        let mut h = x;
        for conv in self.convs {
            h = encoder_stage(tape, h, conv);
        }
        let y = tape.conv2d(h, self.head);
        let y = tape.global_avg_pool(y);
        Ok(tape.affine(y, POSE_OUTPUT_SCALE, 0.0))
    }

    pub fn predict(&self, params: &ParamStore, target: &Tensor, source: &Tensor) -> Result<Pose> {
        let mut tape = Tape::new(params);
        let v = self.forward(&mut tape, target, source)?;
        Ok(twist_to_pose(tape.value(v)))
    }
}

pub fn twist_to_pose(twist: &Tensor) -> Pose {
    let d = twist.data();
    Pose::from_twist(Vector3::new(d[0], d[1], d[2]), Vector3::new(d[3], d[4], d[5]))
}

/// Chain gradients with respect to a pose's rotation matrix and translation
/// back to its 6-vector twist.
pub fn twist_gradient(twist: &Tensor, grad_rotation: &Matrix3<f64>, grad_translation: &Vector3<f64>) -> Tensor {
    let d = twist.data();
    let jac = rotation_axis_angle_jacobian(Vector3::new(d[3], d[4], d[5]));
    let mut g = vec![grad_translation.x, grad_translation.y, grad_translation.z];
    g.extend(jac.iter().map(|j| j.component_mul(grad_rotation).sum()));
    Tensor::from_vec(6, 1, 1, g).expect("six entries")
}
