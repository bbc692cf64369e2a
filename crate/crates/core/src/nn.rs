//! Fully-connected rectifier networks with exact reverse-mode gradients,
//! Adam, and Polyak averaging.
//!
//! Weights are stored `fan_in x fan_out` so a batch forward pass is a single
//! `inputs · W + b` product per layer.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"MLP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputActivation {
    Linear,
    /// `center + half_width * tanh(z)` per output, mapping onto `[low, high]`.
    ScaledTanh { low: Vec<f64>, high: Vec<f64> },
}

impl OutputActivation {
    fn check(&self, out_dim: usize) -> Result<()> {
        if let OutputActivation::ScaledTanh { low, high } = self {
            if low.len() != out_dim || high.len() != out_dim {
                return Err(Error::Shape(format!(
                    "scaled-tanh range has {} / {} entries for {out_dim} outputs",
                    low.len(),
                    high.len()
                )));
            }
            if low.iter().zip(high).any(|(l, h)| !(l < h)) {
                return Err(Error::param("scaled-tanh range needs low < high"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weight.dim() == other.weight.dim() && self.bias.len() == other.bias.len()
    }
}

/// Gradient (or Adam moment) buffers shaped like an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Flattened in checkpoint order: per layer, weights row-major then biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

/// Intermediate values of a batch forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    // input to each layer; inputs[0] is the network input
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardPass {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    output: OutputActivation,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization; the last layer is further
    /// multiplied by `final_scale`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        output: OutputActivation,
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, output)?;
        let n = net.layers.len();
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let fan_in = layer.weight.nrows();
            let mut bound = 1.0 / (fan_in as f64).sqrt();
            if i + 1 == n {
                bound *= final_scale;
            }
            layer.weight.mapv_inplace(|_| rng.gen_range(-bound..=bound));
            layer.bias.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        output.check(*sizes.last().unwrap())?;
        Ok(Self {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            output,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_activation(&self) -> &OutputActivation {
        &self.output
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.layers.iter().map(|l| l.weight.nrows()).collect();
        s.push(self.output_dim());
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let input = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward_batch(input)?.output.row(0).to_vec())
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<ForwardPass> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weight) + &layer.bias;
            inputs.push(a);
            a = if i + 1 < n { z.mapv(|v| v.max(0.0)) } else { self.apply_output(&z) };
            pre.push(z);
        }
        Ok(ForwardPass {
            inputs,
            pre,
            output: a,
        })
    }

    fn apply_output(&self, z: &Array2<f64>) -> Array2<f64> {
        match &self.output {
            OutputActivation::Linear => z.clone(),
            OutputActivation::ScaledTanh { low, high } => {
                let mut out = z.clone();
                for mut row in out.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let half = 0.5 * (high[j] - low[j]);
                        *v = low[j] + half + half * v.tanh();
                    }
                }
                out
            }
        }
    }

    fn output_delta(&self, pass: &ForwardPass, upstream: ArrayView2<f64>) -> Array2<f64> {
        let z = pass.pre.last().unwrap();
        match &self.output {
            OutputActivation::Linear => upstream.to_owned(),
            OutputActivation::ScaledTanh { low, high } => {
                let mut d = upstream.to_owned();
                for (mut drow, zrow) in d.rows_mut().into_iter().zip(z.rows()) {
                    for (j, (g, zv)) in drow.iter_mut().zip(zrow).enumerate() {
                        let t = zv.tanh();
                        *g *= 0.5 * (high[j] - low[j]) * (1.0 - t * t);
                    }
                }
                d
            }
        }
    }

    fn check_upstream(&self, pass: &ForwardPass, upstream: &ArrayView2<f64>) -> Result<()> {
        if upstream.dim() != pass.output.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                pass.output.dim()
            )));
        }
        Ok(())
    }

    /// Gradients of `sum(upstream ⊙ output)` with respect to the parameters
    /// and the network input.
    pub fn backward(&self, pass: &ForwardPass, upstream: ArrayView2<f64>) -> Result<(MlpGrads, Array2<f64>)> {
        self.check_upstream(pass, &upstream)?;
        let mut delta = self.output_delta(pass, upstream);
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            grads.push(Layer {
                weight: pass.inputs[i].t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            let mut prev = delta.dot(&layer.weight.t());
            if i > 0 {
                Zip::from(&mut prev)
                    .and(&pass.pre[i - 1])
                    .for_each(|g, &z| if z <= 0.0 { *g = 0.0 });
            }
            delta = prev;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }

    /// Input gradient only, skipping the parameter-gradient products.
    pub fn input_gradient(&self, pass: &ForwardPass, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_upstream(pass, &upstream)?;
        let mut delta = self.output_delta(pass, upstream);
        for i in (0..self.layers.len()).rev() {
            let mut prev = delta.dot(&self.layers[i].weight.t());
            if i > 0 {
                Zip::from(&mut prev)
                    .and(&pass.pre[i - 1])
                    .for_each(|g, &z| if z <= 0.0 { *g = 0.0 });
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// `self <- (1 - rho) * self + rho * source`.
    pub fn polyak_update(&mut self, source: &Mlp, rho: f64) -> Result<()> {
        if !self.same_architecture(source) {
            return Err(Error::Shape("polyak update between different architectures".into()));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::param(format!("polyak rate must lie in (0, 1], got {rho}")));
        }
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            Zip::from(&mut t.weight)
                .and(&s.weight)
                .for_each(|t, &s| *t = (1.0 - rho) * *t + rho * s);
            Zip::from(&mut t.bias)
                .and(&s.bias)
                .for_each(|t, &s| *t = (1.0 - rho) * *t + rho * s);
        }
        Ok(())
    }

    /// Binary checkpoint: `MLP1`, layer-size count and sizes as `u32`, then
    /// each layer's `fan_in x fan_out` weights row-major followed by its
    /// biases, all little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let sizes = self.sizes();
        w.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for s in &sizes {
            w.write_all(&(*s as u32).to_le_bytes())?;
        }
        for layer in &self.layers {
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R, output: OutputActivation) -> Result<Self> {
        let io = |e| Error::io("<checkpoint>", e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::contract("not an MLP1 checkpoint"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let count = u32::from_le_bytes(word) as usize;
        if !(2..=64).contains(&count) {
            return Err(Error::contract(format!("implausible layer count {count}")));
        }
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut word).map_err(io)?;
            sizes.push(u32::from_le_bytes(word) as usize);
        }
        let mut net = Self::zeros(&sizes, output)?;
        let mut buf = [0u8; 8];
        for layer in &mut net.layers {
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                r.read_exact(&mut buf).map_err(io)?;
                *v = f64::from_le_bytes(buf);
                if !v.is_finite() {
                    return Err(Error::NonFinite("checkpoint parameter".into()));
                }
            }
        }
        Ok(net)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: MlpGrads,
    v: MlpGrads,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: MlpGrads::zeros_like(net),
            v: MlpGrads::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`. Non-finite gradients leave everything untouched.
    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads.layers.iter().zip(&net.layers).any(|(g, l)| !g.same_shape(l))
        {
            return Err(Error::Shape("gradient shape does not match network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient rejected by Adam".into()));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.lr;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            Zip::from(&mut layer.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .and(&g.weight)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}
