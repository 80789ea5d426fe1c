//! Two residual conv encoders (one per stain) and a linear+softmax head over
//! the averaged features, with hand-written reverse-mode gradients.
//!
//! Each encoder is: 3x3 stem conv + ReLU, then one residual block per stage
//! (3x3 stride-2 conv, ReLU, 3x3 conv, plus a 1x1 stride-2 projection
//! shortcut, ReLU after the sum), then global average pooling. Parameters of
//! a model part live in one flat `Vec<f64>`; layers address it by offset.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::ssl_losses::{FeaturePair, HeSample, LabelDistribution};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_channels: usize,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            input_channels: 1,
            stem_width: 16,
            stage_widths: vec![16, 32, 64, 128],
            feature_dim: 128,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 1 {
            return Err(Error::Config(format!(
                "encoders take single-channel stain images, got input_channels = {}",
                self.input_channels
            )));
        }
        if self.stem_width == 0 || self.stage_widths.iter().any(|w| *w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let last = self.stage_widths.last().copied().unwrap_or(self.stem_width);
        if self.feature_dim != last {
            return Err(Error::Config(format!(
                "feature_dim {} must equal the last stage width {last}",
                self.feature_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    w_off: usize,
    b_off: usize,
}

impl Conv {
    fn fan_in(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    shortcut: Conv,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stem: Conv,
    blocks: Vec<Block>,
    len: usize,
}

fn layout(spec: &EncoderSpec) -> Layout {
    let mut off = 0;
    let mut conv = |in_c, out_c, k, stride, pad| {
        let w_off = off;
        let b_off = w_off + out_c * in_c * k * k;
        off = b_off + out_c;
        Conv { in_c, out_c, k, stride, pad, w_off, b_off }
    };
    let stem = conv(spec.input_channels, spec.stem_width, 3, 1, 1);
    let mut blocks = Vec::new();
    let mut c = spec.stem_width;
    for &w in &spec.stage_widths {
        let conv1 = conv(c, w, 3, 2, 1);
        let conv2 = conv(w, w, 3, 1, 1);
        let shortcut = conv(c, w, 1, 2, 0);
        blocks.push(Block { conv1, conv2, shortcut });
        c = w;
    }
    Layout { stem, blocks, len: off }
}

/// Channel-major activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

fn im2col(conv: &Conv, x: &Activation) -> (Vec<f64>, usize, usize) {
    let oh = conv.out_dim(x.h);
    let ow = conv.out_dim(x.w);
    let p = oh * ow;
    let kk = conv.k;
    let mut cols = vec![0.0; conv.fan_in() * p];
    for c in 0..conv.in_c {
        let plane = &x.data[c * x.h * x.w..(c + 1) * x.h * x.w];
        for ky in 0..kk {
            for kx in 0..kk {
                let row = (c * kk + ky) * kk + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    for ox in 0..ow {
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im_add(conv: &Conv, dcols: &[f64], oh: usize, ow: usize, dx: &mut Activation) {
    let p = oh * ow;
    let kk = conv.k;
    for c in 0..conv.in_c {
        for ky in 0..kk {
            for kx in 0..kk {
                let row = (c * kk + ky) * kk + kx;
                let src = &dcols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= dx.h as isize {
                        continue;
                    }
                    let base = c * dx.h * dx.w + iy as usize * dx.w;
                    for ox in 0..ow {
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if ix >= 0 && ix < dx.w as isize {
                            dx.data[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes buffers of at least the addressed extents;
    // `c` is a distinct mutable slice laid out row-major with n columns.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(conv: &Conv, params: &[f64], x: &Activation) -> Activation {
    let (cols, oh, ow) = im2col(conv, x);
    let p = oh * ow;
    let kdim = conv.fan_in();
    let w = &params[conv.w_off..conv.w_off + conv.out_c * kdim];
    let mut out = vec![0.0; conv.out_c * p];
    gemm(conv.out_c, kdim, p, w, kdim as isize, 1, &cols, p as isize, 1, 0.0, &mut out);
    for o in 0..conv.out_c {
        let b = params[conv.b_off + o];
        for v in &mut out[o * p..(o + 1) * p] {
            *v += b;
        }
    }
    Activation { c: conv.out_c, h: oh, w: ow, data: out }
}

/// Accumulates parameter gradients and, when `dx` is given, the input gradient.
fn conv_backward(conv: &Conv, params: &[f64], x: &Activation, d_out: &[f64], grads: &mut [f64], dx: Option<&mut Activation>) {
    let (cols, oh, ow) = im2col(conv, x);
    let p = oh * ow;
    let kdim = conv.fan_in();
    {
        let gw = &mut grads[conv.w_off..conv.w_off + conv.out_c * kdim];
        // dW += dY (out_c x p) * cols^T (p x kdim)
        gemm(conv.out_c, p, kdim, d_out, p as isize, 1, &cols, 1, p as isize, 1.0, gw);
    }
    for o in 0..conv.out_c {
        grads[conv.b_off + o] += d_out[o * p..(o + 1) * p].iter().sum::<f64>();
    }
    if let Some(dx) = dx {
        let w = &params[conv.w_off..conv.w_off + conv.out_c * kdim];
        let mut dcols = vec![0.0; kdim * p];
        // dcols = W^T (kdim x out_c) * dY (out_c x p)
        gemm(kdim, conv.out_c, p, w, 1, kdim as isize, d_out, p as isize, 1, 0.0, &mut dcols);
        col2im_add(conv, &dcols, oh, ow, dx);
    }
}

fn relu_in_place(a: &mut Activation) {
    for v in &mut a.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn check_finite(a: &Activation, layer: impl FnOnce() -> String) -> Result<()> {
    if a.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFault { layer: layer() })
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    /// Post-ReLU output of conv1.
    a1: Activation,
    /// Post-ReLU block output.
    out: Activation,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Activation,
    stem: Activation,
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    layout: Layout,
    pub params: Vec<f64>,
}

impl Encoder {
    pub fn new(spec: &EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layout = layout(spec);
        let mut params = vec![0.0; layout.len];
        let mut init = |conv: &Conv| {
            let std = (2.0 / conv.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut params[conv.w_off..conv.b_off] {
                *w = normal.sample(rng);
            }
        };
        init(&layout.stem);
        for b in &layout.blocks {
            init(&b.conv1);
            init(&b.conv2);
            init(&b.shortcut);
        }
        Ok(Self {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    pub fn from_params(spec: &EncoderSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = layout(spec);
        if params.len() != layout.len {
            return Err(Error::InvalidInput(format!(
                "encoder expects {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    pub fn forward(&self, input: &[f64], height: usize, width: usize, name: &str) -> Result<(Vec<f64>, EncoderCache)> {
        if input.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "encoder input has {} values for {height}x{width}",
                input.len()
            )));
        }
        let x = Activation { c: 1, h: height, w: width, data: input.to_vec() };
        let mut stem = conv_forward(&self.layout.stem, &self.params, &x);
        relu_in_place(&mut stem);
        check_finite(&stem, || format!("{name}.stem"))?;
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for (i, b) in self.layout.blocks.iter().enumerate() {
            let inp = blocks.last().map(|c: &BlockCache| &c.out).unwrap_or(&stem);
            let mut a1 = conv_forward(&b.conv1, &self.params, inp);
            relu_in_place(&mut a1);
            check_finite(&a1, || format!("{name}.stage{}.conv1", i + 1))?;
            let mut out = conv_forward(&b.conv2, &self.params, &a1);
            let sc = conv_forward(&b.shortcut, &self.params, inp);
            for (o, s) in out.data.iter_mut().zip(&sc.data) {
                *o += s;
            }
            relu_in_place(&mut out);
            check_finite(&out, || format!("{name}.stage{}.out", i + 1))?;
            blocks.push(BlockCache { a1, out });
        }
        let last = blocks.last().map(|c| &c.out).unwrap_or(&stem);
        let hw = (last.h * last.w) as f64;
        let features = last
            .data
            .chunks_exact(last.h * last.w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        Ok((features, EncoderCache { input: x, stem, blocks }))
    }

    /// Backpropagates `d_features` and adds parameter gradients into `grads`.
    pub fn backward(&self, cache: &EncoderCache, d_features: &[f64], grads: &mut [f64]) {
        let last = cache.blocks.last().map(|c| &c.out).unwrap_or(&cache.stem);
        let plane = last.h * last.w;
        let mut d = Activation {
            c: last.c,
            h: last.h,
            w: last.w,
            data: vec![0.0; last.data.len()],
        };
        for (ch, &g) in d_features.iter().enumerate() {
            let v = g / plane as f64;
            for x in &mut d.data[ch * plane..(ch + 1) * plane] {
                *x = v;
            }
        }
        for (i, b) in self.layout.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let inp = if i == 0 { &cache.stem } else { &cache.blocks[i - 1].out };
            // ReLU after the residual sum
            for (g, o) in d.data.iter_mut().zip(&bc.out.data) {
                if *o <= 0.0 {
                    *g = 0.0;
                }
            }
            let mut d_a1 = Activation { c: bc.a1.c, h: bc.a1.h, w: bc.a1.w, data: vec![0.0; bc.a1.data.len()] };
            conv_backward(&b.conv2, &self.params, &bc.a1, &d.data, grads, Some(&mut d_a1));
            for (g, a) in d_a1.data.iter_mut().zip(&bc.a1.data) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            let mut d_in = Activation { c: inp.c, h: inp.h, w: inp.w, data: vec![0.0; inp.data.len()] };
            conv_backward(&b.shortcut, &self.params, inp, &d.data, grads, Some(&mut d_in));
            conv_backward(&b.conv1, &self.params, inp, &d_a1.data, grads, Some(&mut d_in));
            d = d_in;
        }
        for (g, o) in d.data.iter_mut().zip(&cache.stem.data) {
            if *o <= 0.0 {
                *g = 0.0;
            }
        }
        conv_backward(&self.layout.stem, &self.params, &cache.input, &d.data, grads, None);
    }
}

/// `softmax(W^T f + b)` with `W` stored D x C row-major, followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub params: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(feature_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / feature_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut params = vec![0.0; feature_dim * num_classes + num_classes];
        for w in &mut params[..feature_dim * num_classes] {
            *w = normal.sample(rng);
        }
        Self { feature_dim, num_classes, params }
    }

    pub fn zeros(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            num_classes,
            params: vec![0.0; feature_dim * num_classes + num_classes],
        }
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let c = self.num_classes;
        let mut out = self.params[self.feature_dim * c..].to_vec();
        for (i, &f) in features.iter().enumerate() {
            let row = &self.params[i * c..(i + 1) * c];
            for (o, w) in out.iter_mut().zip(row) {
                *o += f * w;
            }
        }
        out
    }

    /// Returns dL/d(features) and accumulates head gradients.
    pub fn backward(&self, features: &[f64], d_logits: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let c = self.num_classes;
        let mut d_features = vec![0.0; self.feature_dim];
        for (i, &f) in features.iter().enumerate() {
            let row = &self.params[i * c..(i + 1) * c];
            let grow = &mut grads[i * c..(i + 1) * c];
            let mut acc = 0.0;
            for j in 0..c {
                grow[j] += f * d_logits[j];
                acc += row[j] * d_logits[j];
            }
            d_features[i] = acc;
        }
        for j in 0..c {
            grads[self.feature_dim * c + j] += d_logits[j];
        }
        d_features
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// dL/d(logits) from dL/d(probabilities).
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(d_probs).map(|(p, g)| p * (g - dot)).collect()
}

/// Parameter gradients for every part of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGrads {
    pub enc_h: Vec<f64>,
    pub enc_e: Vec<f64>,
    pub head: Vec<f64>,
}

impl DualGrads {
    pub fn zeros_for(model: &DualEncoder) -> Self {
        Self {
            enc_h: vec![0.0; model.enc_h.params.len()],
            enc_e: vec![0.0; model.enc_e.params.len()],
            head: vec![0.0; model.head.params.len()],
        }
    }

    pub fn add_assign(&mut self, other: &DualGrads) {
        for (a, b) in [(&mut self.enc_h, &other.enc_h), (&mut self.enc_e, &other.enc_e), (&mut self.head, &other.head)] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.enc_h.iter().chain(&self.enc_e).chain(&self.head).all(|v| v.is_finite())
    }
}

/// Output of a forward pass that retains what backward needs.
#[derive(Debug, Clone)]
pub struct DualForward {
    pub pair: FeaturePair,
    pub pred: LabelDistribution,
    cache_h: EncoderCache,
    cache_e: EncoderCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    EncH,
    EncE,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub enc_h: Encoder,
    pub enc_e: Encoder,
    pub head: ClassifierHead,
}

/// Serializable parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelState {
    pub spec: EncoderSpec,
    pub num_classes: usize,
    pub enc_h: Vec<f64>,
    pub enc_e: Vec<f64>,
    pub head: Vec<f64>,
}

impl DualEncoder {
    /// Seeded He-style initialization; each part draws from its own stream.
    pub fn new(spec: &EncoderSpec, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let enc_h = Encoder::new(spec, &mut rng::stream(seed, &[rng::op::INIT, 0]))?;
        let enc_e = Encoder::new(spec, &mut rng::stream(seed, &[rng::op::INIT, 1]))?;
        let head = ClassifierHead::new(spec.feature_dim, num_classes, &mut rng::stream(seed, &[rng::op::INIT, 2]));
        Ok(Self { enc_h, enc_e, head })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    pub fn spec(&self) -> &EncoderSpec {
        self.enc_h.spec()
    }

    pub fn params_mut(&mut self, part: Part) -> &mut [f64] {
        match part {
            Part::EncH => &mut self.enc_h.params,
            Part::EncE => &mut self.enc_e.params,
            Part::Head => &mut self.head.params,
        }
    }

    pub fn params(&self, part: Part) -> &[f64] {
        match part {
            Part::EncH => &self.enc_h.params,
            Part::EncE => &self.enc_e.params,
            Part::Head => &self.head.params,
        }
    }

    pub fn forward(&self, x: &HeSample) -> Result<DualForward> {
        let (f_h, cache_h) = self.enc_h.forward(&x.h, x.height, x.width, "enc_h")?;
        let (f_e, cache_e) = self.enc_e.forward(&x.e, x.height, x.width, "enc_e")?;
        let pred = self.classify(&f_h, &f_e)?;
        Ok(DualForward {
            pair: FeaturePair { f_h, f_e },
            pred,
            cache_h,
            cache_e,
        })
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, x: &HeSample) -> Result<(FeaturePair, LabelDistribution)> {
        let out = self.forward(x)?;
        Ok((out.pair, out.pred))
    }

    fn classify(&self, f_h: &[f64], f_e: &[f64]) -> Result<LabelDistribution> {
        let avg: Vec<f64> = f_h.iter().zip(f_e).map(|(a, b)| 0.5 * (a + b)).collect();
        let logits = self.head.logits(&avg);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault { layer: "head".into() });
        }
        LabelDistribution::new(softmax(&logits)).map_err(|_| Error::NumericFault { layer: "head.softmax".into() })
    }

    /// Backpropagates dL/d(pred) plus any extra dL/d(f_h), dL/d(f_e) (for
    /// the contrastive term) and accumulates into `grads`.
    pub fn backward(&self, fwd: &DualForward, d_pred: &[f64], d_f_h_extra: &[f64], d_f_e_extra: &[f64], grads: &mut DualGrads) {
        let d_logits = softmax_backward(fwd.pred.probs(), d_pred);
        let avg: Vec<f64> = fwd.pair.f_h.iter().zip(&fwd.pair.f_e).map(|(a, b)| 0.5 * (a + b)).collect();
        let d_avg = self.head.backward(&avg, &d_logits, &mut grads.head);
        let d_f_h: Vec<f64> = d_avg.iter().zip(d_f_h_extra).map(|(a, x)| 0.5 * a + x).collect();
        let d_f_e: Vec<f64> = d_avg.iter().zip(d_f_e_extra).map(|(a, x)| 0.5 * a + x).collect();
        if d_f_h.iter().any(|v| *v != 0.0) {
            self.enc_h.backward(&fwd.cache_h, &d_f_h, &mut grads.enc_h);
        }
        if d_f_e.iter().any(|v| *v != 0.0) {
            self.enc_e.backward(&fwd.cache_e, &d_f_e, &mut grads.enc_e);
        }
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            spec: self.spec().clone(),
            num_classes: self.num_classes(),
            enc_h: self.enc_h.params.clone(),
            enc_e: self.enc_e.params.clone(),
            head: self.head.params.clone(),
        }
    }

    pub fn from_state(state: &ModelState) -> Result<Self> {
        let enc_h = Encoder::from_params(&state.spec, state.enc_h.clone())?;
        let enc_e = Encoder::from_params(&state.spec, state.enc_e.clone())?;
        let expected = state.spec.feature_dim * state.num_classes + state.num_classes;
        if state.head.len() != expected {
            return Err(Error::InvalidInput(format!(
                "head expects {expected} parameters, got {}",
                state.head.len()
            )));
        }
        Ok(Self {
            enc_h,
            enc_e,
            head: ClassifierHead {
                feature_dim: state.spec.feature_dim,
                num_classes: state.num_classes,
                params: state.head.clone(),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay_per_epoch: f64,
    pub rms_decay: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay_per_epoch: 0.97,
            rms_decay: 0.99,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.lr_decay_per_epoch > 0.0
            && self.lr_decay_per_epoch <= 1.0
            && (0.0..1.0).contains(&self.rms_decay)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }

    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        self.learning_rate * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

/// RMSProp: `s = rho s + (1 - rho) g^2; w -= lr g / (sqrt(s) + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub config: OptimizerConfig,
    pub sq_enc_h: Vec<f64>,
    pub sq_enc_e: Vec<f64>,
    pub sq_head: Vec<f64>,
}

impl RmsProp {
    pub fn new(config: OptimizerConfig, model: &DualEncoder) -> Self {
        Self {
            config,
            sq_enc_h: vec![0.0; model.enc_h.params.len()],
            sq_enc_e: vec![0.0; model.enc_e.params.len()],
            sq_head: vec![0.0; model.head.params.len()],
        }
    }

    pub fn step(&mut self, model: &mut DualEncoder, grads: &DualGrads, lr: f64) {
        let rho = self.config.rms_decay;
        let eps = self.config.epsilon;
        let update = |w: &mut [f64], s: &mut [f64], g: &[f64]| {
            for i in 0..w.len() {
                s[i] = rho * s[i] + (1.0 - rho) * g[i] * g[i];
                w[i] -= lr * g[i] / (s[i].sqrt() + eps);
            }
        };
        update(&mut model.enc_h.params, &mut self.sq_enc_h, &grads.enc_h);
        update(&mut model.enc_e.params, &mut self.sq_enc_e, &grads.enc_e);
        update(&mut model.head.params, &mut self.sq_head, &grads.head);
    }
}
