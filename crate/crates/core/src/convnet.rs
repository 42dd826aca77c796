//! Small convolutional regressors: forward, backpropagation and plain SGD.
//!
//! Only the fixed topologies the tracker needs are supported: same-padded
//! odd square kernels, stride one, no pooling, one sample at a time.
//!
//! Convolutions run as one GEMM per kernel offset over a zero-padded
//! "wide row" layout: the output row pitch equals the padded input pitch,
//! so every shifted input view is a plain strided matrix and no im2col
//! buffer is needed. Columns past the valid width are scratch.

use crate::error::{Result, SdtError};
use crate::image::HeatMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Channel-major stack of equally sized maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMaps {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width || height == 0 || width == 0 {
            return Err(SdtError::Shape(format!(
                "{} values for {channels}x{height}x{width} maps",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_planes(height: usize, width: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        let channels = planes.len();
        let mut data = Vec::with_capacity(channels * height * width);
        for p in planes {
            if p.len() != height * width {
                return Err(SdtError::Shape(format!("plane of {} values, expected {}", p.len(), height * width)));
            }
            data.extend(p);
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// New stack holding the listed channels, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureMaps {
        let mut data = Vec::with_capacity(indices.len() * self.plane_len());
        for &i in indices {
            data.extend_from_slice(self.channel(i));
        }
        FeatureMaps { channels: indices.len(), height: self.height, width: self.width, data }
    }

    pub fn scaled(&self, k: f64) -> FeatureMaps {
        FeatureMaps { data: self.data.iter().map(|v| v * k).collect(), ..self.clone() }
    }

    pub fn to_heatmap(&self, c: usize) -> HeatMap {
        HeatMap::new(self.width, self.height, self.channel(c).to_vec()).expect("finite maps")
    }
}

/// `C = alpha * A * B + beta * C` on strided views of flat buffers.
///
/// Offsets and strides are in elements; every touched index is checked
/// against the slice bounds before the kernel runs.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], usize, usize, usize),
    b: (&[f64], usize, usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |off: usize, rows: usize, rs: usize, cols: usize, cs: usize| off + (rows - 1) * rs + (cols - 1) * cs;
    assert!(k > 0);
    assert!(last(a.1, m, a.2, k, a.3) < a.0.len(), "gemm: A out of bounds");
    assert!(last(b.1, k, b.2, n, b.3) < b.0.len(), "gemm: B out of bounds");
    assert!(last(c.1, m, c.2, n, c.3) < c.0.len(), "gemm: C out of bounds");
    // SAFETY: all accessed elements were bounds-checked above; C does not
    // alias A or B because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr().add(a.1),
            a.2 as isize,
            a.3 as isize,
            b.0.as_ptr().add(b.1),
            b.2 as isize,
            b.3 as isize,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2 as isize,
            c.3 as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Zero-padded copy of an input stack in wide-row layout.
#[derive(Debug, Clone)]
pub struct PaddedInput {
    /// padded row pitch
    pitch: usize,
    /// elements per padded channel including tail slack
    stride: usize,
    data: Vec<f64>,
}

impl PaddedInput {
    fn new(input: &FeatureMaps, pad: usize, kernel: usize) -> Self {
        let pitch = input.width + 2 * pad;
        let stride = (input.height + 2 * pad) * pitch + kernel - 1;
        let mut data = vec![0.0; input.channels * stride];
        for c in 0..input.channels {
            let src = input.channel(c);
            for y in 0..input.height {
                let dst = c * stride + (y + pad) * pitch + pad;
                data[dst..dst + input.width].copy_from_slice(&src[y * input.width..(y + 1) * input.width]);
            }
        }
        Self { pitch, stride, data }
    }
}

/// Same-padded stride-one convolution with an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    padding: usize,
    activation: Activation,
    /// `(out, in, ky, kx)` row-major
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    padded: PaddedInput,
    preact: FeatureMaps,
    pub output: FeatureMaps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &ConvLayer) -> Self {
        Self { weights: vec![0.0; layer.weights.len()], bias: vec![0.0; layer.bias.len()] }
    }
}

impl ConvLayer {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, activation: Activation) -> Result<Self> {
        if kernel % 2 == 0 || in_channels == 0 || out_channels == 0 {
            return Err(SdtError::Config(format!(
                "conv layer {in_channels}->{out_channels} with kernel {kernel}"
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            padding: kernel / 2,
            activation,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        })
    }

    /// Zero-mean Gaussian weights, zero bias.
    pub fn init_gaussian(&mut self, std: f64, rng: &mut ChaCha8Rng) {
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut self.weights {
            *w = normal.sample(rng);
        }
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn weight_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel + ky) * self.kernel + kx
    }

    fn check_input(&self, input: &FeatureMaps) -> Result<()> {
        if input.channels != self.in_channels {
            return Err(SdtError::Config(format!(
                "layer expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &FeatureMaps) -> Result<FeatureMaps> {
        Ok(self.forward_cached(input)?.output)
    }

    pub fn forward_cached(&self, input: &FeatureMaps) -> Result<LayerCache> {
        self.check_input(input)?;
        let (h, w) = (input.height, input.width);
        let k = self.kernel;
        let padded = PaddedInput::new(input, self.padding, k);
        let pitch = padded.pitch;
        let nq = h * pitch;
        let kk = k * k;
        let mut wide = vec![0.0; self.out_channels * nq];
        for ky in 0..k {
            for kx in 0..k {
                gemm(
                    self.out_channels,
                    self.in_channels,
                    nq,
                    1.0,
                    (&self.weights, ky * k + kx, self.in_channels * kk, kk),
                    (&padded.data, ky * pitch + kx, padded.stride, 1),
                    1.0,
                    (&mut wide, 0, nq, 1),
                );
            }
        }
        let mut preact = FeatureMaps::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let b = self.bias[o];
            let dst = preact.channel_mut(o);
            for y in 0..h {
                let src = &wide[o * nq + y * pitch..o * nq + y * pitch + w];
                for (d, s) in dst[y * w..(y + 1) * w].iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let output = match self.activation {
            Activation::Identity => preact.clone(),
            Activation::Relu => FeatureMaps { data: preact.data.iter().map(|v| v.max(0.0)).collect(), ..preact.clone() },
        };
        Ok(LayerCache { padded, preact, output })
    }

    /// Accumulates parameter gradients into `grads` and, when asked, returns
    /// the gradient with respect to the layer input.
    pub fn backward(
        &self,
        cache: &LayerCache,
        grad_output: &FeatureMaps,
        grads: &mut LayerGrads,
        want_input_grad: bool,
    ) -> Option<FeatureMaps> {
        let (h, w) = (cache.preact.height, cache.preact.width);
        let k = self.kernel;
        let kk = k * k;
        let pitch = cache.padded.pitch;
        let nq = h * pitch;
        let mut wide = vec![0.0; self.out_channels * nq];
        for o in 0..self.out_channels {
            let g = grad_output.channel(o);
            let pre = cache.preact.channel(o);
            let mut bias_acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let d = match self.activation {
                        Activation::Identity => g[i],
                        Activation::Relu => {
                            if pre[i] > 0.0 {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                    };
                    wide[o * nq + y * pitch + x] = d;
                    bias_acc += d;
                }
            }
            grads.bias[o] += bias_acc;
        }
        for ky in 0..k {
            for kx in 0..k {
                gemm(
                    self.out_channels,
                    nq,
                    self.in_channels,
                    1.0,
                    (&wide, 0, nq, 1),
                    (&cache.padded.data, ky * pitch + kx, 1, cache.padded.stride),
                    1.0,
                    (&mut grads.weights, ky * k + kx, self.in_channels * kk, kk),
                );
            }
        }
        if !want_input_grad {
            return None;
        }
        let stride = cache.padded.stride;
        let mut dpad = vec![0.0; self.in_channels * stride];
        for ky in 0..k {
            for kx in 0..k {
                gemm(
                    self.in_channels,
                    self.out_channels,
                    nq,
                    1.0,
                    (&self.weights, ky * k + kx, kk, self.in_channels * kk),
                    (&wide, 0, nq, 1),
                    1.0,
                    (&mut dpad, ky * pitch + kx, stride, 1),
                );
            }
        }
        let p = self.padding;
        let mut dx = FeatureMaps::zeros(self.in_channels, h, w);
        for c in 0..self.in_channels {
            let dst = dx.channel_mut(c);
            for y in 0..h {
                let s = c * stride + (y + p) * pitch + p;
                dst[y * w..(y + 1) * w].copy_from_slice(&dpad[s..s + w]);
            }
        }
        Some(dx)
    }

    /// SGD update; weight decay `beta` contributes `2 * beta * W` to the
    /// kernel gradient only.
    fn step(&mut self, grads: &LayerGrads, lr: f64, beta: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            *w -= lr * (g + 2.0 * beta * *w);
        }
        for (b, g) in self.bias.iter_mut().zip(&grads.bias) {
            *b -= lr * g;
        }
    }

    fn sq_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// Per-sample training objective on a single output map.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// `sum (M - T)^2`
    Squared,
    /// `sum mask * Tru(M - T)^2` with `Tru(e) = |e|` when
    /// `|e| > epsilon / (k + mu * phi)` and zero otherwise.
    Truncated(TruncatedLoss),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedLoss {
    pub epsilon: f64,
    pub k: f64,
    pub mu: f64,
    /// per-pixel weight (foreground labels or their complement)
    pub mask: Vec<f64>,
    /// per-pixel sensitivity term of the threshold
    pub phi: Vec<f64>,
}

impl TruncatedLoss {
    #[inline]
    pub fn threshold(&self, i: usize) -> f64 {
        self.epsilon / (self.k + self.mu * self.phi[i])
    }
}

/// `Tru(e)` for a given threshold.
#[inline]
pub fn truncate(e: f64, threshold: f64) -> f64 {
    if e.abs() <= threshold {
        0.0
    } else {
        e.abs()
    }
}

impl Loss {
    /// Loss value and gradient with respect to the output map.
    pub fn evaluate(&self, output: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(output.len(), target.len());
        let mut value = 0.0;
        let mut grad = vec![0.0; output.len()];
        match self {
            Loss::Squared => {
                for (i, (m, t)) in output.iter().zip(target).enumerate() {
                    let e = m - t;
                    value += e * e;
                    grad[i] = 2.0 * e;
                }
            }
            Loss::Truncated(tl) => {
                assert_eq!(tl.mask.len(), output.len());
                for (i, (m, t)) in output.iter().zip(target).enumerate() {
                    let e = m - t;
                    let tr = truncate(e, tl.threshold(i));
                    if tr > 0.0 {
                        value += tl.mask[i] * tr * tr;
                        grad[i] = 2.0 * tl.mask[i] * e;
                    }
                }
            }
        }
        (value, grad)
    }
}

/// Schedule for gradient training of a head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss: Loss,
}

impl TrainSpec {
    pub fn squared(iterations: usize, learning_rate: f64) -> Self {
        Self { iterations, learning_rate, weight_decay: 0.0, loss: Loss::Squared }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(SdtError::Config(format!("bad train spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub layer1: LayerGrads,
    pub layer2: LayerGrads,
}

impl HeadGrads {
    pub fn add(&mut self, other: &HeadGrads) {
        for (a, b) in [(&mut self.layer1, &other.layer1), (&mut self.layer2, &other.layer2)] {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

/// Two-layer regressor: `k1 x k1` conv + ReLU, then `k2 x k2` conv to one map.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadNet {
    pub layer1: ConvLayer,
    pub layer2: ConvLayer,
    seed: u64,
}

const NET_MAGIC: &[u8; 4] = b"SDTN";
const NET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct NetHeader {
    version: u32,
    seed: u64,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    activation: Activation,
}

impl HeadNet {
    pub fn new(in_channels: usize, hidden: usize, k1: usize, k2: usize, init_std: f64, seed: u64) -> Result<Self> {
        let mut layer1 = ConvLayer::new(in_channels, hidden, k1, Activation::Relu)?;
        let mut layer2 = ConvLayer::new(hidden, 1, k2, Activation::Identity)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        layer1.init_gaussian(init_std, &mut rng);
        layer2.init_gaussian(init_std, &mut rng);
        Ok(Self { layer1, layer2, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn in_channels(&self) -> usize {
        self.layer1.in_channels
    }

    pub fn forward(&self, input: &FeatureMaps) -> Result<HeatMap> {
        let h = self.layer1.forward(input)?;
        let out = self.layer2.forward(&h)?;
        Ok(out.to_heatmap(0))
    }

    fn forward_cached(&self, input: &FeatureMaps) -> Result<(LayerCache, LayerCache)> {
        let c1 = self.layer1.forward_cached(input)?;
        let c2 = self.layer2.forward_cached(&c1.output)?;
        Ok((c1, c2))
    }

    fn zero_grads(&self) -> HeadGrads {
        HeadGrads { layer1: LayerGrads::zeros_like(&self.layer1), layer2: LayerGrads::zeros_like(&self.layer2) }
    }

    /// Loss and parameter gradients for one `(input, target)` pair.
    pub fn loss_and_grads(&self, input: &FeatureMaps, target: &HeatMap, loss: &Loss) -> Result<(f64, HeadGrads)> {
        let (c1, c2) = self.forward_cached(input)?;
        let out = c2.output.channel(0);
        if out.len() != target.values().len() {
            return Err(SdtError::Shape(format!(
                "output {}x{} vs target {}x{}",
                c2.output.width,
                c2.output.height,
                target.width(),
                target.height()
            )));
        }
        let (value, g) = loss.evaluate(out, target.values());
        let mut grads = self.zero_grads();
        let gout = FeatureMaps::new(1, c2.output.height, c2.output.width, g)?;
        let dh = self.layer2.backward(&c2, &gout, &mut grads.layer2, true).expect("input grad requested");
        self.layer1.backward(&c1, &dh, &mut grads.layer1, false);
        Ok((value, grads))
    }

    /// `||W||_F^2` over both kernels (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.layer1.sq_norm() + self.layer2.sq_norm()
    }

    pub fn apply(&mut self, grads: &HeadGrads, lr: f64, weight_decay: f64) {
        self.layer1.step(&grads.layer1, lr, weight_decay);
        self.layer2.step(&grads.layer2, lr, weight_decay);
    }

    /// One SGD step; returns the objective before the step.
    pub fn backward_and_step(&mut self, input: &FeatureMaps, target: &HeatMap, spec: &TrainSpec) -> Result<f64> {
        spec.validate()?;
        let (data_loss, grads) = self.loss_and_grads(input, target, &spec.loss)?;
        let loss = data_loss + spec.weight_decay * self.weight_sq_norm();
        if !loss.is_finite() {
            return Err(SdtError::Divergence { iteration: 0, loss });
        }
        self.apply(&grads, spec.learning_rate, spec.weight_decay);
        Ok(loss)
    }

    /// Runs `spec.iterations` steps and returns the loss trace.
    pub fn train(&mut self, input: &FeatureMaps, target: &HeatMap, spec: &TrainSpec) -> Result<Vec<f64>> {
        let mut trace = Vec::with_capacity(spec.iterations);
        for it in 0..spec.iterations {
            let loss = self.backward_and_step(input, target, spec).map_err(|e| match e {
                SdtError::Divergence { loss, .. } => SdtError::Divergence { iteration: it, loss },
                other => other,
            })?;
            trace.push(loss);
        }
        Ok(trace)
    }

    /// Flat container: magic, header length (u32 LE), JSON header, then
    /// little-endian f64 weights and biases of each layer in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = NetHeader {
            version: NET_VERSION,
            seed: self.seed,
            layers: [&self.layer1, &self.layer2]
                .iter()
                .map(|l| LayerHeader {
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    kernel: l.kernel,
                    activation: l.activation,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(NET_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for l in [&self.layer1, &self.layer2] {
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| SdtError::Shape(format!("net container: {m}"));
        if bytes.len() < 8 || &bytes[..4] != NET_MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: NetHeader = serde_json::from_slice(body)?;
        if header.version != NET_VERSION || header.layers.len() != 2 {
            return Err(bad("unsupported version or topology"));
        }
        let mut floats = bytes[8 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut layers = Vec::new();
        for lh in &header.layers {
            let mut l = ConvLayer::new(lh.in_channels, lh.out_channels, lh.kernel, lh.activation)?;
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = floats.next().ok_or_else(|| bad("truncated weights"))?;
            }
            layers.push(l);
        }
        if floats.next().is_some() {
            return Err(bad("trailing data"));
        }
        let layer2 = layers.pop().unwrap();
        let layer1 = layers.pop().unwrap();
        Ok(Self { layer1, layer2, seed: header.seed })
    }
}

/// Dropout followed by one linear convolution to a single map; used to
/// rank input channels.
#[derive(Debug, Clone)]
pub struct SelectorNet {
    dropout_ratio: f64,
    pub conv: ConvLayer,
    training: bool,
    trained: bool,
    rng: ChaCha8Rng,
}

impl SelectorNet {
    pub fn new(in_channels: usize, kernel: usize, dropout_ratio: f64, init_std: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_ratio) {
            return Err(SdtError::Config(format!("dropout ratio {dropout_ratio}")));
        }
        let mut conv = ConvLayer::new(in_channels, 1, kernel, Activation::Identity)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        conv.init_gaussian(init_std, &mut rng);
        Ok(Self { dropout_ratio, conv, training: true, trained: false, rng })
    }

    pub fn dropout_ratio(&self) -> f64 {
        self.dropout_ratio
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    /// Marks the selector as fitted, e.g. after loading external weights.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Draws an inverted-dropout mask: kept entries scaled by `1 / (1 - p)`.
    pub fn draw_mask(&mut self, len: usize) -> Vec<f64> {
        let keep = Bernoulli::new(1.0 - self.dropout_ratio).expect("valid ratio");
        let scale = 1.0 / (1.0 - self.dropout_ratio);
        (0..len).map(|_| if keep.sample(&mut self.rng) { scale } else { 0.0 }).collect()
    }

    pub fn apply_mask(input: &FeatureMaps, mask: &[f64]) -> FeatureMaps {
        FeatureMaps { data: input.data.iter().zip(mask).map(|(x, m)| x * m).collect(), ..input.clone() }
    }

    /// Eval-mode forward (dropout is the identity).
    pub fn forward_eval(&self, input: &FeatureMaps) -> Result<HeatMap> {
        Ok(self.conv.forward(input)?.to_heatmap(0))
    }

    /// Forward in the current mode; train mode draws a fresh dropout mask.
    pub fn forward(&mut self, input: &FeatureMaps) -> Result<HeatMap> {
        if self.training && self.dropout_ratio > 0.0 {
            let mask = self.draw_mask(input.data.len());
            self.forward_eval(&Self::apply_mask(input, &mask))
        } else {
            self.forward_eval(input)
        }
    }

    /// Squared-loss gradients of the conv parameters for a given dropout mask
    /// (`None` means no dropout).
    pub fn loss_and_grads(&self, input: &FeatureMaps, target: &HeatMap, mask: Option<&[f64]>) -> Result<(f64, LayerGrads)> {
        let x = match mask {
            Some(m) => Self::apply_mask(input, m),
            None => input.clone(),
        };
        let cache = self.conv.forward_cached(&x)?;
        let (value, g) = Loss::Squared.evaluate(cache.output.channel(0), target.values());
        let gout = FeatureMaps::new(1, x.height, x.width, g)?;
        let mut grads = LayerGrads::zeros_like(&self.conv);
        self.conv.backward(&cache, &gout, &mut grads, false);
        Ok((value, grads))
    }

    /// Trains with squared loss and dropout active, then switches to eval mode.
    pub fn train(&mut self, input: &FeatureMaps, target: &HeatMap, iterations: usize, lr: f64) -> Result<Vec<f64>> {
        self.training = true;
        let mut trace = Vec::with_capacity(iterations);
        for it in 0..iterations {
            let mask = (self.dropout_ratio > 0.0).then(|| self.draw_mask(input.data.len()));
            let (loss, grads) = self.loss_and_grads(input, target, mask.as_deref())?;
            if !loss.is_finite() {
                return Err(SdtError::Divergence { iteration: it, loss });
            }
            self.conv.step(&grads, lr, 0.0);
            trace.push(loss);
        }
        self.training = false;
        self.trained = true;
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_maps(c: usize, h: usize, w: usize, seed: u64) -> FeatureMaps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMaps::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution, independent of the GEMM path.
    fn naive_conv(layer: &ConvLayer, x: &FeatureMaps) -> FeatureMaps {
        let (h, w, k, p) = (x.height(), x.width(), layer.kernel(), layer.padding() as isize);
        let mut out = FeatureMaps::zeros(layer.out_channels(), h, w);
        for o in 0..layer.out_channels() {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = layer.bias()[o];
                    for c in 0..layer.in_channels() {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += layer.weights()[layer.weight_index(o, c, ky, kx)]
                                    * x.channel(c)[sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out.channel_mut(o)[y * w + xx] = match layer.activation() {
                        Activation::Relu => acc.max(0.0),
                        Activation::Identity => acc,
                    };
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = random_maps(1, 5, 7, 3);
        let mut l = ConvLayer::new(1, 1, 1, Activation::Identity).unwrap();
        l.weights_mut()[0] = 1.0;
        assert_eq!(l.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = random_maps(3, 6, 6, 4);
        for (act, b, expect) in [(Activation::Identity, -0.25, -0.25), (Activation::Relu, -0.25, 0.0), (Activation::Relu, 0.5, 0.5)] {
            let mut l = ConvLayer::new(3, 2, 3, act).unwrap();
            l.bias_mut().iter_mut().for_each(|v| *v = b);
            assert!(l.forward(&x).unwrap().data().iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn gemm_path_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (cin, cout, k, act) in [(3, 4, 3, Activation::Relu), (2, 1, 5, Activation::Identity), (4, 3, 9, Activation::Relu)] {
            let mut l = ConvLayer::new(cin, cout, k, act).unwrap();
            l.init_gaussian(0.5, &mut rng);
            l.bias_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
            let x = random_maps(cin, 8, 8, rng.gen());
            let fast = l.forward(&x).unwrap();
            let slow = naive_conv(&l, &x);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let l = ConvLayer::new(3, 1, 3, Activation::Identity).unwrap();
        assert!(matches!(l.forward(&random_maps(2, 4, 4, 0)), Err(SdtError::Config(_))));
    }

    #[test]
    fn zero_input_zero_target_only_bias_path() {
        let mut net = HeadNet::new(2, 3, 3, 3, 0.1, 5).unwrap();
        net.layer1.bias_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        net.layer2.bias_mut()[0] = 0.05;
        let x = FeatureMaps::zeros(2, 4, 4);
        let t = HeatMap::zeros(4, 4);
        let (c1, _) = net.forward_cached(&x).unwrap();
        let out = net.forward(&x).unwrap();
        let (loss, grads) = net.loss_and_grads(&x, &t, &Loss::Squared).unwrap();
        let expect: f64 = out.values().iter().map(|v| v * v).sum();
        assert!((loss - expect).abs() < 1e-12);
        // zero input => no gradient reaches layer-1 kernels
        assert!(grads.layer1.weights.iter().all(|&g| g == 0.0));
        // layer-2 kernel gradients only see the constant ReLU(bias) hidden maps
        let hidden_active: Vec<bool> = (0..3).map(|o| c1.output.channel(o)[0] > 0.0).collect();
        assert_eq!(hidden_active, vec![true, false, true]);
        assert!(grads.layer2.bias[0] != 0.0);
    }

    #[test]
    fn repeated_steps_do_not_increase_loss() {
        let x = random_maps(2, 6, 6, 21);
        let t = HeatMap::from_fn(6, 6, |a, b| ((a + b) % 3) as f64 / 3.0);
        let mut net = HeadNet::new(2, 3, 3, 3, 0.2, 9).unwrap();
        let trace = net.train(&x, &t, &TrainSpec::squared(50, 2e-3)).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{trace:?}");
        }
        assert!(trace[49] < trace[0]);
    }

    #[test]
    fn reachable_target_is_fitted() {
        // target produced by a fixed linear conv of the input
        let x = random_maps(2, 8, 8, 31);
        let mut teacher = ConvLayer::new(2, 1, 3, Activation::Identity).unwrap();
        teacher.init_gaussian(0.3, &mut ChaCha8Rng::seed_from_u64(1));
        let t = teacher.forward(&x).unwrap().to_heatmap(0);
        let mut sel = SelectorNet::new(2, 3, 0.0, 0.01, 2).unwrap();
        let trace = sel.train(&x, &t, 400, 5e-3).unwrap();
        assert!(trace[399] < 1e-3 * trace[0], "{} -> {}", trace[0], trace[399]);
    }

    #[test]
    fn zero_iterations_leave_net_unchanged() {
        let x = random_maps(2, 6, 6, 1);
        let t = HeatMap::zeros(6, 6);
        let mut net = HeadNet::new(2, 3, 3, 3, 0.1, 4).unwrap();
        let before = net.clone();
        assert!(net.train(&x, &t, &TrainSpec::squared(0, 1e-3)).unwrap().is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn training_is_deterministic() {
        let x = random_maps(3, 6, 6, 8);
        let t = HeatMap::from_fn(6, 6, |a, _| a as f64 / 6.0);
        let run = || {
            let mut net = HeadNet::new(3, 4, 5, 3, 0.05, 77).unwrap();
            let trace = net.train(&x, &t, &TrainSpec::squared(10, 1e-3)).unwrap();
            (net.to_bytes(), trace)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let x = random_maps(2, 6, 6, 8);
        let t = HeatMap::from_fn(6, 6, |_, _| 1.0);
        let mut net = HeadNet::new(2, 3, 3, 3, 0.5, 1).unwrap();
        let err = net.train(&x, &t, &TrainSpec::squared(200, 1e3)).unwrap_err();
        assert!(matches!(err, SdtError::Divergence { .. }), "{err}");
    }

    #[test]
    fn weight_decay_only_shrinks_by_factor() {
        let x = random_maps(2, 6, 6, 2);
        let mut net = HeadNet::new(2, 3, 3, 3, 0.1, 3).unwrap();
        let before = net.clone();
        let mut grads = net.zero_grads();
        grads.layer1.bias.iter_mut().for_each(|g| *g = 0.0);
        let (lr, beta) = (0.1, 0.25);
        net.apply(&grads, lr, beta);
        for (a, b) in net.layer1.weights().iter().zip(before.layer1.weights()) {
            assert!((a - b * (1.0 - 2.0 * lr * beta)).abs() < 1e-15);
        }
        let _ = x;
    }

    #[test]
    fn serialization_is_bitwise_exact() {
        let net = HeadNet::new(5, 4, 9, 5, 0.01, 123).unwrap();
        let back = HeadNet::from_bytes(&net.to_bytes()).unwrap();
        assert_eq!(back, net);
        assert!(HeadNet::from_bytes(b"nope").is_err());
    }

    #[test]
    fn dropout_eval_is_identity_train_is_noisy() {
        let x = random_maps(4, 6, 6, 6).scaled(0.0);
        let x = FeatureMaps { data: x.data.iter().map(|_| 1.0).collect(), ..x };
        let mut sel = SelectorNet::new(4, 1, 0.3, 0.1, 1).unwrap();
        sel.conv.weights_mut().iter_mut().for_each(|w| *w = 0.25);
        sel.set_training(false);
        let a = sel.forward(&x).unwrap();
        assert!(a.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        sel.set_training(true);
        let n = 400;
        let mut mean = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let o = sel.forward(&x).unwrap();
            let m = o.sum() / 36.0;
            mean += m / n as f64;
            sq += m * m / n as f64;
        }
        // inverted scaling keeps the expectation
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!(sq - mean * mean > 0.0);
    }
}
