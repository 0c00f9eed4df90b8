//! Dense feed-forward networks with exact reverse-mode gradients with respect
//! to both parameters and inputs.
//!
//! Weights are initialised from a SplitMix64 stream: for state `s`, each draw
//! does `s += 0x9E3779B97F4A7C15` followed by the standard SplitMix64 mix, and
//! the top 53 bits give `u` in `[0, 1)`. Weight `(r, c)` of each layer, taken
//! in layer order and row-major within a layer, is `(2u - 1) * sqrt(6 / (fan_in + fan_out))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "dense-net";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
    Softmax,
}

/// SplitMix64 stream used for initialisation.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// `n_out x n_in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
    pub seed: u64,
    /// Bumped on every parameter change; caches remember the version they saw.
    version: u64,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// `activations[0]` is the input, `activations[l+1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("non-empty cache")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: Vec<LayerGrad>,
    pub input: Vec<f64>,
}

impl GradientBundle {
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.params {
            out.extend_from_slice(&g.weights);
            out.extend_from_slice(&g.bias);
        }
        out
    }

    /// Adds `other * scale` in place.
    pub fn accumulate(&mut self, other: &GradientBundle, scale: f64) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        for (x, y) in self.input.iter_mut().zip(&other.input) {
            *x += scale * y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().chain(&self.input).all(|x| x.is_finite())
    }
}

impl DenseNet {
    pub fn init(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::BadArchitecture("need at least input and output sizes".into()));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::BadArchitecture(format!(
                "{} layers but {} activations",
                dims.len() - 1,
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::BadArchitecture("zero-width layer".into()));
        }
        if activations[..activations.len() - 1].contains(&Activation::Softmax) {
            return Err(Error::BadArchitecture("softmax is only allowed on the last layer".into()));
        }
        let mut rng = SplitMix64::new(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let (n_in, n_out) = (d[0], d[1]);
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                let weights = (0..n_in * n_out)
                    .map(|_| (2.0 * rng.next_f64() - 1.0) * limit)
                    .collect();
                Layer {
                    n_in,
                    n_out,
                    weights,
                    bias: vec![0.0; n_out],
                    activation,
                }
            })
            .collect();
        Ok(Self {
            layers,
            seed,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").n_out
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.n_out));
        d
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                p.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        self.version += 1;
        Ok(())
    }

    /// Zeroes every parameter.
    pub fn zeroed(mut self) -> Self {
        let n = self.n_params();
        self.set_params_flat(&vec![0.0; n]).expect("matching size");
        self
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for l in &self.layers {
            let a = activations.last().expect("input pushed");
            let mut z: Vec<f64> = l.bias.clone();
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &l.weights[r * l.n_in..(r + 1) * l.n_in];
                *zr += row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>();
            }
            apply_activation(l.activation, &mut z);
            activations.push(z);
        }
        Ok(ForwardCache {
            version: self.version,
            activations,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.activations.pop().expect("output"))
    }

    /// Gradients of `<upstream, output>` with respect to parameters and input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<GradientBundle> {
        if cache.version != self.version || cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::StaleCache);
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut delta = upstream.to_vec();
        let mut params = Vec::with_capacity(self.layers.len());
        for (li, l) in self.layers.iter().enumerate().rev() {
            let out = &cache.activations[li + 1];
            let inp = &cache.activations[li];
            // through the activation
            match l.activation {
                Activation::Identity => {}
                Activation::Tanh => {
                    for (d, a) in delta.iter_mut().zip(out) {
                        *d *= 1.0 - a * a;
                    }
                }
                Activation::Relu => {
                    for (d, a) in delta.iter_mut().zip(out) {
                        if *a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Activation::Softmax => {
                    let dot: f64 = delta.iter().zip(out).map(|(d, s)| d * s).sum();
                    for (d, s) in delta.iter_mut().zip(out) {
                        *d = s * (*d - dot);
                    }
                }
            }
            let mut gw = vec![0.0; l.weights.len()];
            for r in 0..l.n_out {
                let dr = delta[r];
                if dr != 0.0 {
                    for c in 0..l.n_in {
                        gw[r * l.n_in + c] = dr * inp[c];
                    }
                }
            }
            let mut next = vec![0.0; l.n_in];
            for r in 0..l.n_out {
                let dr = delta[r];
                if dr != 0.0 {
                    let row = &l.weights[r * l.n_in..(r + 1) * l.n_in];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += dr * w;
                    }
                }
            }
            params.push(LayerGrad {
                weights: gw,
                bias: delta,
            });
            delta = next;
        }
        params.reverse();
        Ok(GradientBundle {
            params,
            input: delta,
        })
    }

    /// Output and input gradient of a single-output network.
    pub fn value_and_input_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let cache = self.forward(x)?;
        let v = cache.output()[0];
        let g = self.backward(&cache, &[1.0])?;
        Ok((v, g.input))
    }

    pub fn sgd_step(&mut self, grads: &GradientBundle, lr: f64) -> Result<()> {
        let g = grads.flat_params();
        let mut p = self.params_flat();
        if g.len() != p.len() {
            return Err(Error::ShapeMismatch("gradient/parameter size".into()));
        }
        for (x, d) in p.iter_mut().zip(&g) {
            *x -= lr * d;
        }
        self.set_params_flat(&p)
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dims: self.dims(),
            activations: self.activations(),
            seed: self.seed,
            params: self.params_flat(),
        }
    }

    pub fn from_checkpoint(ck: &NetCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut net = Self::init(&ck.dims, &ck.activations, ck.seed)?;
        net.set_params_flat(&ck.params)?;
        Ok(net)
    }
}

fn apply_activation(act: Activation, z: &mut [f64]) {
    match act {
        Activation::Identity => {}
        Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Softmax => {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in z.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in z.iter_mut() {
                *v /= sum;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub format: String,
    pub version: u32,
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
    pub params: Vec<f64>,
}

/// Adam moment estimates for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &GradientBundle, lr: f64) -> Result<()> {
        let g = grads.flat_params();
        if g.len() != self.m.len() || g.len() != net.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "adam state for {} params, gradient has {}",
                self.m.len(),
                g.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut p = net.params_flat();
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        net.set_params_flat(&p)
    }
}
