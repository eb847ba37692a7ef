//! Minimal reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records the forward pass of one sample. Parameters live in an
//! immutable [`ParamStore`] shared by all tapes, so forward passes are pure and
//! several samples can be differentiated concurrently; gradients come back as
//! a [`Gradients`] buffer aligned with the store.
//!
//! Convolutions are lowered to GEMM through an im2col buffer that is rebuilt
//! during the backward pass rather than kept alive on the tape.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named, flat parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, param: Param) -> Result<ParamId> {
        let expected: usize = param.shape.iter().product();
        if expected != param.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{}` has shape {:?} but {} values",
                param.name,
                param.shape,
                param.data.len()
            )));
        }
        if self.index.contains_key(&param.name) {
            return Err(Error::InvalidInput(format!(
                "duplicate parameter name `{}`",
                param.name
            )));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    #[inline]
    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for &d in &p.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in &p.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            grads: self.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += other`, element by element.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// How a parameter is initialised.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform He initialisation for a leaky-ReLU of the given slope.
    HeUniform { fan_in: usize, slope: f64 },
    Zeros,
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Declares the parameters of a network in canonical order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamId {
        let id = ParamId(self.specs.len());
        self.specs.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
        id
    }

    /// Declare a `k x k` convolution with bias.
    pub fn conv(
        &mut self,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        slope: f64,
    ) -> Conv2d {
        let fan_in = in_channels * kernel * kernel;
        let weight = self.declare(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            Init::HeUniform { fan_in, slope },
        );
        let bias = self.declare(format!("{name}.bias"), vec![out_channels], Init::Zeros);
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec_mut(&mut self, id: ParamId) -> &mut ParamSpec {
        &mut self.specs[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.specs
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for spec in &self.specs {
            let n: usize = spec.shape.iter().product();
            let data = match &spec.init {
                Init::HeUniform { fan_in, slope } => {
                    let bound = (6.0 / ((1.0 + slope * slope) * (*fan_in).max(1) as f64)).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Values(v) => v.clone(),
            };
            store
                .push(Param {
                    name: spec.name.clone(),
                    shape: spec.shape.clone(),
                    data,
                })
                .expect("layout specs are consistent");
        }
        store
    }

    /// Rebuild a store from named arrays, validating names and shapes against the layout.
    pub fn load(&self, params: &[Param]) -> Result<ParamStore> {
        let by_name: HashMap<&str, &Param> = params.iter().map(|p| (p.name.as_str(), p)).collect();
        if by_name.len() != self.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                self.specs.len(),
                by_name.len()
            )));
        }
        let mut store = ParamStore::new();
        for spec in &self.specs {
            let p = by_name.get(spec.name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter array `{}`", spec.name))
            })?;
            if p.shape != spec.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name, p.shape, spec.shape
                )));
            }
            store.push((*p).clone())?;
        }
        Ok(store)
    }
}

/// Convolution layer handle: "same" padding, optional stride.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        tape.conv2d(x, *self)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: usize, conv: Conv2d },
    LeakyRelu { x: usize, slope: f64 },
    Softplus { x: usize },
    Affine { x: usize, scale: f64 },
    Concat { parts: Vec<usize> },
    Upsample { x: usize, factor: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Slice { x: usize, start: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    GlobalAvgPool { x: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass.
pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
pub struct Backward {
    pub params: Gradients,
    nodes: Vec<Option<Tensor>>,
}

impl Backward {
    /// Gradient reaching a node created with [`Tape::variable`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Backward::wrt`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, conv: Conv2d) -> Var {
        let input = &self.nodes[x.0].value;
        assert_eq!(
            input.channels(),
            conv.in_channels,
            "conv expects {} input channels",
            conv.in_channels
        );
        let out = conv_forward(
            input,
            self.params.data(conv.weight),
            self.params.data(conv.bias),
            conv,
        );
        self.push(out, Op::Conv { x: x.0, conv }, true)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.nodes[x.0]
            .value
            .map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x.0);
        self.push(out, Op::LeakyRelu { x: x.0, slope }, rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(softplus);
        let rg = self.rg(x.0);
        self.push(out, Op::Softplus { x: x.0 }, rg)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| scale * v + shift);
        let rg = self.rg(x.0);
        self.push(out, Op::Affine { x: x.0, scale }, rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let out = Tensor::concat(&tensors).expect("concat of tensors with equal spatial size");
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let out = upsample_nearest(&self.nodes[x.0].value, factor);
        let rg = self.rg(x.0);
        self.push(out, Op::Upsample { x: x.0, factor }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Add { a: a.0, b: b.0 }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x * y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = &self.nodes[x.0].value;
        assert!(start + len <= src.channels(), "channel slice out of range");
        let n = src.plane_len();
        let out = Tensor::from_vec(
            len,
            src.height(),
            src.width(),
            src.data()[start * n..(start + len) * n].to_vec(),
        )
        .expect("slice length matches");
        let rg = self.rg(x.0);
        self.push(out, Op::Slice { x: x.0, start }, rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.clamp(lo, hi));
        let rg = self.rg(x.0);
        self.push(out, Op::Clamp { x: x.0, lo, hi }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let n = src.plane_len() as f64;
        let out = Tensor::from_fn(src.channels(), 1, 1, |c, _, _| {
            src.plane(c).iter().sum::<f64>() / n
        });
        let rg = self.rg(x.0);
        self.push(out, Op::GlobalAvgPool { x: x.0 }, rg)
    }

    /// Back-propagate `seed` (dL/d`output`) through the tape.
    pub fn backward(&self, output: Var, seed: Tensor) -> Backward {
        self.backward_many(vec![(output, seed)])
    }

    /// Back-propagate several seeds at once; gradients of shared ancestors add up.
    pub fn backward_many(&self, seeds: Vec<(Var, Tensor)>) -> Backward {
        let mut param_grads = self.params.zero_gradients();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, seed) in seeds {
            assert!(
                seed.same_shape(&self.nodes[v.0].value),
                "seed shape must match output"
            );
            accumulate(&mut grads[v.0], seed);
        }

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match (&node.op, &grads[i]) {
                (Op::Leaf, _) | (_, None) => continue,
                (_, Some(_)) => grads[i].take().unwrap(),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, conv } => {
                    let input = &self.nodes[*x].value;
                    let gx = conv_backward(
                        input,
                        self.params.data(conv.weight),
                        *conv,
                        &g,
                        &mut param_grads,
                        self.rg(*x),
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    if self.rg(*x) {
                        let input = &self.nodes[*x].value;
                        let gx = g.zip_map(input, |gv, v| if v > 0.0 { gv } else { slope * gv });
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::Softplus { x } => {
                    if self.rg(*x) {
                        let input = &self.nodes[*x].value;
                        let gx = g.zip_map(input, |gv, v| gv * sigmoid(v));
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::Affine { x, scale } => {
                    if self.rg(*x) {
                        accumulate(&mut grads[*x], g.map(|gv| gv * scale));
                    }
                }
                Op::Concat { parts } => {
                    let n = g.plane_len();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p].value.channels();
                        if self.rg(p) {
                            let part = Tensor::from_vec(
                                c,
                                g.height(),
                                g.width(),
                                g.data()[offset * n..(offset + c) * n].to_vec(),
                            )
                            .unwrap();
                            accumulate(&mut grads[p], part);
                        }
                        offset += c;
                    }
                }
                Op::Upsample { x, factor } => {
                    if self.rg(*x) {
                        let src = &self.nodes[*x].value;
                        let mut gx = Tensor::zeros(src.channels(), src.height(), src.width());
                        for c in 0..g.channels() {
                            for y in 0..g.height() {
                                for xx in 0..g.width() {
                                    let i = gx.index(c, y / factor, xx / factor);
                                    gx.data_mut()[i] += g.at(c, y, xx);
                                }
                            }
                        }
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::Mul { a, b } => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    if self.rg(*a) {
                        accumulate(&mut grads[*a], g.zip_map(vb, |gv, y| gv * y));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[*b], g.zip_map(va, |gv, x| gv * x));
                    }
                }
                Op::Slice { x, start } => {
                    if self.rg(*x) {
                        let src = &self.nodes[*x].value;
                        let mut gx = Tensor::zeros(src.channels(), src.height(), src.width());
                        let n = src.plane_len();
                        gx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if self.rg(*x) {
                        let input = &self.nodes[*x].value;
                        let gx = g.zip_map(input, |gv, v| {
                            if v >= *lo && v <= *hi {
                                gv
                            } else {
                                0.0
                            }
                        });
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if self.rg(*x) {
                        let src = &self.nodes[*x].value;
                        let n = src.plane_len() as f64;
                        let gx = Tensor::from_fn(src.channels(), src.height(), src.width(), |c, _, _| {
                            g.at(c, 0, 0) / n
                        });
                        accumulate(&mut grads[*x], gx);
                    }
                }
            }
        }
        // Only variable leaves keep their gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        Backward {
            params: param_grads,
            nodes: grads,
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inverse needs a positive argument");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    Tensor::from_fn(
        x.channels(),
        x.height() * factor,
        x.width() * factor,
        |c, y, xx| x.at(c, y / factor, xx / factor),
    )
}

fn conv_geometry(input: &Tensor, conv: Conv2d) -> (usize, usize, usize) {
    let pad = conv.kernel / 2;
    let out_h = (input.height() + 2 * pad - conv.kernel) / conv.stride + 1;
    let out_w = (input.width() + 2 * pad - conv.kernel) / conv.stride + 1;
    (pad, out_h, out_w)
}

fn is_pointwise(conv: Conv2d) -> bool {
    conv.kernel == 1 && conv.stride == 1
}

fn im2col(input: &Tensor, conv: Conv2d, pad: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let k = conv.kernel;
    let s = conv.stride;
    let (h, w) = (input.height() as isize, input.width() as isize);
    let p = out_h * out_w;
    let mut cols = vec![0.0; input.channels() * k * k * p];
    for ci in 0..input.channels() {
        let plane = input.plane(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..out_h {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                    let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], target: &mut Tensor, conv: Conv2d, pad: usize, out_h: usize, out_w: usize) {
    let k = conv.kernel;
    let s = conv.stride;
    let (h, w) = (target.height() as isize, target.width() as isize);
    let p = out_h * out_w;
    for ci in 0..target.channels() {
        let plane = target.plane_mut(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..out_h {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = iy as usize * w as usize;
                    for ox in 0..out_w {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w {
                            plane[base + ix as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes buffers whose extents cover every strided
    // access of an m x k by k x n product; `c` is row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(input: &Tensor, weight: &[f64], bias: &[f64], conv: Conv2d) -> Tensor {
    let (pad, out_h, out_w) = conv_geometry(input, conv);
    let p = out_h * out_w;
    let kk = conv.in_channels * conv.kernel * conv.kernel;
    let mut out = Tensor::zeros(conv.out_channels, out_h, out_w);
    {
        let data = out.data_mut();
        for (co, chunk) in data.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
    }
    if is_pointwise(conv) {
        gemm(
            conv.out_channels,
            kk,
            p,
            weight,
            kk,
            1,
            input.data(),
            p,
            1,
            1.0,
            out.data_mut(),
        );
    } else {
        let cols = im2col(input, conv, pad, out_h, out_w);
        gemm(
            conv.out_channels,
            kk,
            p,
            weight,
            kk,
            1,
            &cols,
            p,
            1,
            1.0,
            out.data_mut(),
        );
    }
    out
}

fn conv_backward(
    input: &Tensor,
    weight: &[f64],
    conv: Conv2d,
    grad_out: &Tensor,
    param_grads: &mut Gradients,
    input_requires_grad: bool,
) -> Option<Tensor> {
    let (pad, out_h, out_w) = conv_geometry(input, conv);
    let p = out_h * out_w;
    let kk = conv.in_channels * conv.kernel * conv.kernel;
    let g = grad_out.data();

    {
        let gb = param_grads.get_mut(conv.bias);
        for (co, chunk) in g.chunks(p).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
    }

    let owned_cols;
    let cols: &[f64] = if is_pointwise(conv) {
        input.data()
    } else {
        owned_cols = im2col(input, conv, pad, out_h, out_w);
        &owned_cols
    };

    // dW[co, j] += sum_p g[co, p] * cols[j, p]
    gemm(
        conv.out_channels,
        p,
        kk,
        g,
        p,
        1,
        cols,
        1,
        p,
        1.0,
        param_grads.get_mut(conv.weight),
    );

    if !input_requires_grad {
        return None;
    }
    // dcols[j, p] = sum_co W[co, j] * g[co, p]
    let mut dcols = vec![0.0; kk * p];
    gemm(kk, conv.out_channels, p, weight, 1, kk, g, p, 1, 0.0, &mut dcols);
    if is_pointwise(conv) {
        return Some(Tensor::from_vec(input.channels(), input.height(), input.width(), dcols).unwrap());
    }
    let mut gx = Tensor::zeros(input.channels(), input.height(), input.width());
    col2im(&dcols, &mut gx, conv, pad, out_h, out_w);
    Some(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution, used as an oracle for the GEMM path.
    fn naive_conv(input: &Tensor, w: &[f64], b: &[f64], conv: Conv2d) -> Tensor {
        let (pad, oh, ow) = conv_geometry(input, conv);
        let k = conv.kernel;
        Tensor::from_fn(conv.out_channels, oh, ow, |co, oy, ox| {
            let mut acc = b[co];
            for ci in 0..conv.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - pad as isize;
                        let ix = (ox * conv.stride + kx) as isize - pad as isize;
                        if iy >= 0
                            && ix >= 0
                            && (iy as usize) < input.height()
                            && (ix as usize) < input.width()
                        {
                            acc += w[((co * conv.in_channels + ci) * k + ky) * k + kx]
                                * input.at(ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gemm_conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s) in &[(1, 1), (3, 1), (3, 2), (5, 2)] {
            let mut layout = ParamLayout::new();
            let conv = layout.conv("c", 3, 4, k, s, 0.1);
            let mut store = layout.init(&mut rng);
            store.iter_mut().nth(1).unwrap().data = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(&mut rng, 3, 8, 6);
            let fast = conv_forward(&x, store.data(conv.weight), store.data(conv.bias), conv);
            let slow = naive_conv(&x, store.data(conv.weight), store.data(conv.bias), conv);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn stride_two_halves_even_resolution() {
        let mut layout = ParamLayout::new();
        let c5 = layout.conv("a", 1, 1, 5, 2, 0.1);
        let c3 = layout.conv("b", 1, 1, 3, 2, 0.1);
        let store = layout.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(1, 32, 64));
        let y = tape.conv2d(x, c5);
        let z = tape.conv2d(y, c3);
        assert_eq!(tape.value(y).shape(), (1, 16, 32));
        assert_eq!(tape.value(z).shape(), (1, 8, 16));
    }

    /// Central-difference check of every op's backward rule on a small graph.
    #[test]
    fn tape_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layout = ParamLayout::new();
        let c1 = layout.conv("c1", 2, 3, 3, 2, 0.1);
        let c2 = layout.conv("c2", 5, 2, 3, 1, 0.1);
        let c3 = layout.conv("c3", 2, 2, 1, 1, 0.1);
        let mut store = layout.init(&mut rng);
        for p in store.iter_mut() {
            if p.name.ends_with("bias") {
                p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        let x0 = random_tensor(&mut rng, 2, 8, 8);
        let side = random_tensor(&mut rng, 2, 8, 8);
        let probe = random_tensor(&mut rng, 2, 8, 8);

        let run = |store: &ParamStore, x: &Tensor| -> (f64, Gradients, Tensor) {
            let mut tape = Tape::new(store);
            let xv = tape.variable(x.clone());
            let h = tape.conv2d(xv, c1);
            let h = tape.leaky_relu(h, 0.1);
            let h = tape.upsample_nearest(h, 2);
            let s = tape.input(side.clone());
            let h = tape.concat(&[h, s]);
            let h = tape.conv2d(h, c2);
            let h = tape.softplus(h);
            let a = tape.slice_channels(h, 0, 1);
            let b = tape.slice_channels(h, 1, 1);
            let m = tape.mul(a, b);
            let m = tape.affine(m, 1.7, 0.2);
            let m = tape.add(m, a);
            let m = tape.clamp(m, -100.0, 100.0);
            let both = tape.concat(&[m, b]);
            let out = tape.conv2d(both, c3);
            let pooled = tape.global_avg_pool(out);
            let loss: f64 = tape
                .value(out)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + 3.0 * tape.value(pooled).data().iter().sum::<f64>();
            let seed_out = probe.clone();
            let seed_pool = Tensor::filled(2, 1, 1, 3.0);
            let bw = tape.backward_many(vec![(out, seed_out), (pooled, seed_pool)]);
            let gx = bw.wrt(xv).unwrap().clone();
            (loss, bw.params, gx)
        };

        let (_, gp, gx) = run(&store, &x0);
        let h = 1e-6;
        // Parameters.
        for pid in 0..store.len() {
            for j in 0..store.get(ParamId(pid)).data.len() {
                let mut plus = store.clone();
                plus.iter_mut().nth(pid).unwrap().data[j] += h;
                let mut minus = store.clone();
                minus.iter_mut().nth(pid).unwrap().data[j] -= h;
                let fd = (run(&plus, &x0).0 - run(&minus, &x0).0) / (2.0 * h);
                let an = gp.get(ParamId(pid))[j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "param {pid}[{j}]: fd {fd} vs analytic {an}"
                );
            }
        }
        // Input.
        for j in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[j] += h;
            let mut minus = x0.clone();
            minus.data_mut()[j] -= h;
            let fd = (run(&store, &plus).0 - run(&store, &minus).0) / (2.0 * h);
            let an = gx.data()[j];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "x[{j}]: {fd} vs {an}");
        }
    }

    #[test]
    fn hash_changes_with_any_value() {
        let mut layout = ParamLayout::new();
        layout.conv("c", 1, 1, 1, 1, 0.1);
        let store = layout.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mut other = store.clone();
        other.iter_mut().next().unwrap().data[0] += 1e-12;
        assert_ne!(store.hash(), other.hash());
        assert_eq!(store.hash(), store.clone().hash());
    }

    #[test]
    fn load_rejects_wrong_shapes_and_missing_names() {
        let mut layout = ParamLayout::new();
        layout.conv("c", 2, 3, 3, 1, 0.1);
        let store = layout.init(&mut ChaCha8Rng::seed_from_u64(0));
        let params: Vec<Param> = store.iter().cloned().collect();
        assert_eq!(layout.load(&params).unwrap(), store);
        let mut bad = params.clone();
        bad[0].shape = vec![3, 2, 9];
        assert!(layout.load(&bad).is_err());
        assert!(layout.load(&params[..1]).is_err());
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for &y in &[1e-3, 0.5, 2.0, 10.0, 50.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-9);
        }
    }
}
