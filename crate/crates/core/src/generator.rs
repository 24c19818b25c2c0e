//! One-step generator: a small MLP trained to regress its own outputs one
//! flow step ahead.
//!
//! Each training step pushes a reference batch through the network, evaluates
//! the configured velocity at the outputs, and regresses onto the detached
//! targets `x + eta * V(x)`. The second self batch is a separate forward pass
//! whose outputs are constants, so gradients flow only through the prediction.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::batch::ParticleBatch;
use crate::distributions::{Distribution, DistributionSpec};
use crate::error::{Error, Result};
use crate::ot::SinkhornSpec;
use crate::rng::{stream, Rng};
use crate::velocity::{Guidance, SelfEstimator, VelocityField, VelocityFieldSpec, VelocityInputs};

const LAYER_NORM_EPS: f64 = 1e-5;
const ADAM_EPS: f64 = 1e-8;
/// Upper end of the training range for the guidance scale.
pub const GUIDANCE_W_MAX: f64 = 3.0;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Width of the reference sample `z`.
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Linear -> LayerNorm -> activation in every hidden layer.
    pub layer_norm: bool,
    /// `f(z) = z + net(z)`.
    pub residual: bool,
    /// One-hot class channels appended to the input.
    pub num_classes: Option<usize>,
    /// Guidance scale `w` appended to the input.
    pub guidance_input: bool,
    pub zero_init_final: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 2,
            output_dim: 2,
            hidden: vec![256; 4],
            activation: Activation::Silu,
            layer_norm: false,
            residual: false,
            num_classes: None,
            guidance_input: false,
            zero_init_final: false,
        }
    }
}

impl Architecture {
    pub fn network_input_dim(&self) -> usize {
        self.input_dim + self.num_classes.unwrap_or(0) + usize::from(self.guidance_input)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("arch", "input and output widths must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("arch.hidden", "hidden widths must be >= 1"));
        }
        if self.residual && self.input_dim != self.output_dim {
            return Err(Error::config(
                "arch.residual",
                format!(
                    "needs input_dim = output_dim, got {} and {}",
                    self.input_dim, self.output_dim
                ),
            ));
        }
        if self.num_classes == Some(0) {
            return Err(Error::config("arch.num_classes", "must be >= 1 when set"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.network_input_dim()];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<LayerNormParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub arch: Architecture,
    pub layers: Vec<DenseLayer>,
}

/// Per-sample conditioning channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditioning<'a> {
    pub labels: Option<&'a [usize]>,
    pub guidance: Option<&'a [f64]>,
}

impl<'a> Conditioning<'a> {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Activations cached by [`GeneratorParams::forward_cached`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each dense layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation (after LayerNorm when enabled) of each hidden layer.
    pre_act: Vec<Array2<f64>>,
    /// LayerNorm normalised values and inverse std per hidden layer.
    norm: Vec<Option<(Array2<f64>, Array1<f64>)>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.output.view()
    }
}

impl GeneratorParams {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases.
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let widths = arch.widths();
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let last = l + 1 == n_layers;
                let mut draw = |shape: (usize, usize)| {
                    Array2::from_shape_simple_fn(shape, || {
                        if last && arch.zero_init_final {
                            0.0
                        } else {
                            rng.random_range(-bound..bound)
                        }
                    })
                };
                let weight = draw((fan_out, fan_in));
                let bias = draw((1, fan_out)).remove_axis(Axis(0));
                let norm = (!last && arch.layer_norm).then(|| LayerNormParams {
                    gain: Array1::ones(fan_out),
                    shift: Array1::zeros(fan_out),
                });
                DenseLayer { weight, bias, norm }
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            layers,
        })
    }

    /// Same layout, all entries zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.push(l.weight.as_slice().expect("standard layout"));
            v.push(l.bias.as_slice().expect("standard layout"));
            if let Some(n) = &l.norm {
                v.push(n.gain.as_slice().expect("standard layout"));
                v.push(n.shift.as_slice().expect("standard layout"));
            }
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.push(l.weight.as_slice_mut().expect("standard layout"));
            v.push(l.bias.as_slice_mut().expect("standard layout"));
            if let Some(n) = &mut l.norm {
                v.push(n.gain.as_slice_mut().expect("standard layout"));
                v.push(n.shift.as_slice_mut().expect("standard layout"));
            }
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Same architecture, parameters taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(out)
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= c);
        }
    }

    fn same_layout(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    fn network_input(&self, z: ArrayView2<f64>, cond: &Conditioning<'_>) -> Result<Array2<f64>> {
        let arch = &self.arch;
        let n = z.nrows();
        if z.ncols() != arch.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "input width {} for a generator expecting {}",
                z.ncols(),
                arch.input_dim
            )));
        }
        let mut x = Array2::zeros((n, arch.network_input_dim()));
        x.slice_mut(ndarray::s![.., ..arch.input_dim]).assign(&z);
        let mut col = arch.input_dim;
        if let Some(k) = arch.num_classes {
            let labels = cond
                .labels
                .ok_or_else(|| Error::InvalidInput("conditional generator needs labels".into()))?;
            if labels.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} labels for {n} inputs",
                    labels.len()
                )));
            }
            for (i, &c) in labels.iter().enumerate() {
                if c >= k {
                    return Err(Error::InvalidInput(format!("label {c} out of range for {k} classes")));
                }
                x[[i, col + c]] = 1.0;
            }
            col += k;
        }
        if arch.guidance_input {
            let w = cond
                .guidance
                .ok_or_else(|| Error::InvalidInput("generator needs a guidance scale input".into()))?;
            if w.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} guidance values for {n} inputs",
                    w.len()
                )));
            }
            for (i, &wi) in w.iter().enumerate() {
                x[[i, col]] = wi;
            }
        }
        Ok(x)
    }

    pub fn forward(&self, z: ArrayView2<f64>, cond: &Conditioning<'_>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(z, cond)?.output)
    }

    pub fn forward_cached(&self, z: ArrayView2<f64>, cond: &Conditioning<'_>) -> Result<Tape> {
        let mut a = self.network_input(z, cond)?;
        let last = self.layers.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_act: Vec::with_capacity(last),
            norm: Vec::with_capacity(last),
            output: Array2::zeros((0, 0)),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = a.dot(&layer.weight.t());
            h += &layer.bias;
            tape.inputs.push(a);
            if l == last {
                if self.arch.residual {
                    h += &z;
                }
                tape.output = h;
                break;
            }
            if let Some(norm) = &layer.norm {
                let (xhat, inv_std) = layer_norm(&h);
                h = &xhat * &norm.gain + &norm.shift;
                tape.norm.push(Some((xhat, inv_std)));
            } else {
                tape.norm.push(None);
            }
            let act = self.arch.activation;
            a = h.mapv(|v| act.apply(v));
            tape.pre_act.push(h);
        }
        Ok(tape)
    }

    /// Gradients of a scalar loss given `d loss / d output`.
    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<GeneratorParams> {
        if upstream.dim() != tape.output.dim() {
            return Err(Error::DimensionMismatch(format!(
                "upstream {:?} vs output {:?}",
                upstream.dim(),
                tape.output.dim()
            )));
        }
        let mut grads = self.zeros_like();
        let mut delta = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            g.weight = delta.t().dot(&tape.inputs[l]);
            g.bias = delta.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            // d loss / d activation of layer l-1
            let da = delta.dot(&layer.weight);
            let act = self.arch.activation;
            let pre = &tape.pre_act[l - 1];
            let mut dh = Array2::from_shape_fn(da.dim(), |(i, j)| da[[i, j]] * act.derivative(pre[[i, j]]));
            if let (Some(norm), Some((xhat, inv_std))) = (&self.layers[l - 1].norm, &tape.norm[l - 1]) {
                let gn = grads.layers[l - 1].norm.as_mut().expect("same layout");
                gn.gain = (&dh * xhat).sum_axis(Axis(0));
                gn.shift = dh.sum_axis(Axis(0));
                dh = layer_norm_backward(&(&dh * &norm.gain), xhat, inv_std);
            }
            delta = dh;
        }
        Ok(grads)
    }
}

/// Worst disagreement between backward and central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// Flat parameter index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

impl GeneratorParams {
    /// Output of layers `k..` given the input activation of layer `k`.
    fn run_from(&self, k: usize, mut a: Array2<f64>) -> Array2<f64> {
        for l in k..self.layers.len() {
            let layer = &self.layers[l];
            let raw = a.dot(&layer.weight.t()) + &layer.bias;
            match self.finish_layer(l, raw) {
                Ok(out) => return out,
                Err(next) => a = next,
            }
        }
        unreachable!("the last layer returns")
    }

    /// Applies normalisation and activation to a raw pre-activation; `Ok` carries
    /// the network output when `l` is the last layer.
    fn finish_layer(&self, l: usize, mut raw: Array2<f64>) -> std::result::Result<Array2<f64>, Array2<f64>> {
        if l + 1 == self.layers.len() {
            // the residual input is constant in the parameters and is left out
            return Ok(raw);
        }
        if let Some(norm) = &self.layers[l].norm {
            raw = &layer_norm(&raw).0 * &norm.gain + &norm.shift;
        }
        let act = self.arch.activation;
        Err(raw.mapv(|v| act.apply(v)))
    }

    /// Output when post-normalisation unit `o` of layer `l` moves by `delta`.
    fn output_with_unit_shift(
        &self,
        tape: &Tape,
        raws: &[Array2<f64>],
        l: usize,
        o: usize,
        delta: ArrayView1<f64>,
    ) -> Array2<f64> {
        if l + 1 == self.layers.len() {
            let mut out = raws[l].clone();
            out.column_mut(o).scaled_add(1.0, &delta);
            return out;
        }
        let act = self.arch.activation;
        let pre = tape.pre_act[l].column(o);
        let old = tape.inputs[l + 1].column(o);
        let change: Array1<f64> = Array1::from_shape_fn(delta.len(), |b| act.apply(pre[b] + delta[b]) - old[b]);
        // rank-one update of the next raw pre-activation
        let w_col = self.layers[l + 1].weight.column(o);
        let mut next = raws[l + 1].clone();
        for (mut row, c) in next.outer_iter_mut().zip(&change) {
            row.scaled_add(*c, &w_col);
        }
        match self.finish_layer(l + 1, next) {
            Ok(out) => out,
            Err(a) => self.run_from(l + 2, a),
        }
    }

    /// Output when raw (pre-normalisation) unit `o` of layer `l` moves by `delta`.
    fn output_with_raw_shift(
        &self,
        tape: &Tape,
        raws: &[Array2<f64>],
        l: usize,
        o: usize,
        delta: ArrayView1<f64>,
    ) -> Array2<f64> {
        if self.layers[l].norm.is_none() {
            return self.output_with_unit_shift(tape, raws, l, o, delta);
        }
        let mut raw = raws[l].clone();
        raw.column_mut(o).scaled_add(1.0, &delta);
        match self.finish_layer(l, raw) {
            Ok(out) => out,
            Err(a) => self.run_from(l + 1, a),
        }
    }
}

/// Central-difference check of [`GeneratorParams::backward`] for the loss
/// `sum(upstream * f(z))`, over every parameter in flat order. The residual
/// input is dropped from the differenced outputs, which removes its rounding
/// from the cancellation without changing the derivative.
pub fn finite_difference_check(
    params: &GeneratorParams,
    z: ArrayView2<f64>,
    cond: &Conditioning<'_>,
    upstream: ArrayView2<f64>,
    h: f64,
    floor: f64,
) -> Result<GradientCheck> {
    let tape = params.forward_cached(z, cond)?;
    let analytic = params.backward(&tape, upstream)?.to_flat();
    let raws: Vec<Array2<f64>> = params
        .layers
        .iter()
        .zip(&tape.inputs)
        .map(|(layer, x)| x.dot(&layer.weight.t()) + &layer.bias)
        .collect();
    let loss = |out: Array2<f64>| (&out * &upstream).sum();
    let batch = z.nrows();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut diff = |shift: &dyn Fn(f64) -> Array2<f64>| {
        numeric.push((loss(shift(h)) - loss(shift(-h))) / (2.0 * h));
    };
    for (l, layer) in params.layers.iter().enumerate() {
        let x = &tape.inputs[l];
        let (n_out, n_in) = layer.weight.dim();
        for o in 0..n_out {
            for i in 0..n_in {
                diff(&|s| params.output_with_raw_shift(&tape, &raws, l, o, (&x.column(i) * s).view()));
            }
        }
        for o in 0..n_out {
            diff(&|s| params.output_with_raw_shift(&tape, &raws, l, o, Array1::from_elem(batch, s).view()));
        }
        if layer.norm.is_some() {
            let (xhat, _) = layer_norm(&raws[l]);
            for o in 0..n_out {
                diff(&|s| params.output_with_unit_shift(&tape, &raws, l, o, (&xhat.column(o) * s).view()));
            }
            for o in 0..n_out {
                diff(&|s| params.output_with_unit_shift(&tape, &raws, l, o, Array1::from_elem(batch, s).view()));
            }
        }
    }
    let mut report = GradientCheck {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        checked: analytic.len(),
    };
    for (k, (&a, &b)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, b, floor);
        if e > report.max_relative_error {
            report = GradientCheck {
                max_relative_error: e,
                worst_index: k,
                analytic: a,
                numeric: b,
                checked: analytic.len(),
            };
        }
    }
    Ok(report)
}

fn layer_norm(h: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let width = h.ncols() as f64;
    let mut xhat = h.clone();
    let mut inv = Array1::zeros(h.nrows());
    for (i, mut row) in xhat.outer_iter_mut().enumerate() {
        let mean = row.sum() / width;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * s);
        inv[i] = s;
    }
    (xhat, inv)
}

/// `dx = s/W * (W dxhat - sum dxhat - xhat sum(dxhat xhat))` per row.
fn layer_norm_backward(dxhat: &Array2<f64>, xhat: &Array2<f64>, inv_std: &Array1<f64>) -> Array2<f64> {
    let width = dxhat.ncols() as f64;
    let mut out = Array2::zeros(dxhat.dim());
    for i in 0..dxhat.nrows() {
        let g = dxhat.row(i);
        let x = xhat.row(i);
        let sum_g = g.sum();
        let sum_gx = g.dot(&x);
        let s = inv_std[i];
        for j in 0..dxhat.ncols() {
            out[[i, j]] = s / width * (width * g[j] - sum_g - x[j] * sum_gx);
        }
    }
    out
}

/// Adam moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: GeneratorParams,
    pub second: GeneratorParams,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &GeneratorParams) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    /// Bias-corrected Adam with decoupled weight decay.
    pub fn update(&mut self, params: &mut GeneratorParams, grads: &GeneratorParams, h: &AdamHyper) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.first) {
            return Err(Error::DimensionMismatch(
                "Adam state and parameters differ in layout".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - h.beta1.powi(t);
        let c2 = 1.0 - h.beta2.powi(t);
        let decay = 1.0 - h.learning_rate * h.weight_decay;
        let g = grads.tensors();
        let m = self.first.tensors_mut();
        let v = self.second.tensors_mut();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(g).zip(m).zip(v) {
            for k in 0..p.len() {
                m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
                v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] = p[k] * decay - h.learning_rate * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut GeneratorParams, params: &GeneratorParams, decay: f64) -> Result<()> {
    if !ema.same_layout(params) {
        return Err(Error::DimensionMismatch("EMA and parameters differ in layout".into()));
    }
    for (e, p) in ema.tensors_mut().into_iter().zip(params.tensors()) {
        for (ek, pk) in e.iter_mut().zip(p) {
            *ek = decay * *ek + (1.0 - decay) * pk;
        }
    }
    Ok(())
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GeneratorParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / (norm + 1e-6));
    }
    norm
}

/// Inverse-CDF draw from density `~ (w+1)^-3` on `[0, GUIDANCE_W_MAX]`.
pub fn sample_guidance_scale(rng: &mut Rng) -> f64 {
    let u: f64 = rng.random();
    let tail = (1.0 + GUIDANCE_W_MAX).powi(-2);
    (1.0 - (1.0 - tail) * u).powf(-0.5) - 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub batch_n: usize,
    pub batch_m: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub steps: usize,
    pub velocity: VelocityFieldSpec,
    pub step_size: f64,
    pub seed: u64,
    /// Steps between checkpoint callbacks (0 disables them).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            batch_n: 256,
            batch_m: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            grad_clip: 5.0,
            ema_decay: 0.999,
            steps: 2000,
            velocity: VelocityFieldSpec::sinkhorn(SinkhornSpec::default(), SelfEstimator::TwoBatch),
            step_size: 1.0,
            seed: 0,
            checkpoint_interval: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.velocity.validate()?;
        let positive = [
            ("train.learning_rate", self.learning_rate),
            ("train.grad_clip", self.grad_clip),
            ("train.step_size", self.step_size),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be > 0, got {v}")));
            }
        }
        for (field, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, format!("must be in [0, 1), got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(
                "train.ema_decay",
                format!("must be in [0, 1), got {}", self.ema_decay),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.learning_rate * self.weight_decay < 1.0) {
            return Err(Error::config(
                "train.weight_decay",
                "must be >= 0 with learning_rate * weight_decay < 1",
            ));
        }
        if self.batch_n == 0 || self.batch_m == 0 {
            return Err(Error::config("train.batch", "batch_n and batch_m must be >= 1"));
        }
        if let Some(k) = self.arch.num_classes {
            if self.batch_n < k {
                return Err(Error::config("train.batch_n", "needs at least one sample per class"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
        }
    }
}

/// Reference and target distributions for training.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub reference: Distribution,
    /// For conditional training, component `c` is the class-`c` target.
    pub target: Distribution,
}

impl TrainingData {
    pub fn new(reference: &DistributionSpec, target: &DistributionSpec) -> Result<Self> {
        Ok(Self {
            reference: reference.build()?,
            target: target.build()?,
        })
    }
}

struct Streams {
    reference: Rng,
    target: Rng,
    guidance: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            reference: stream(seed, "train/reference"),
            target: stream(seed, "train/target"),
            guidance: stream(seed, "train/guidance"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Read-only view handed to checkpoint callbacks.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub step: usize,
    pub params: &'a GeneratorParams,
    pub ema: &'a GeneratorParams,
}

/// Versioned checkpoint container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: usize,
    pub config: TrainConfig,
    pub params: GeneratorParams,
    pub ema: GeneratorParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "checkpoint format {} (expected {CHECKPOINT_FORMAT_VERSION})",
                c.format_version
            )));
        }
        Ok(c)
    }
}

/// Training state: parameters, optimiser moments, EMA shadow and RNG streams.
pub struct Trainer {
    config: TrainConfig,
    data: TrainingData,
    params: GeneratorParams,
    adam: AdamState,
    ema: GeneratorParams,
    streams: Streams,
    step: usize,
}

/// One regression group: inputs sharing a label and guidance scale.
struct Group {
    z: Array2<f64>,
    z_second: Array2<f64>,
    labels: Option<Vec<usize>>,
    w: Option<Vec<f64>>,
    target: ParticleBatch,
    uncond: Option<ParticleBatch>,
    spec: VelocityFieldSpec,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: TrainingData) -> Result<Self> {
        config.validate()?;
        let arch = &config.arch;
        if data.reference.dim() != arch.input_dim {
            return Err(Error::config(
                "arch.input_dim",
                format!(
                    "reference has d={}, generator expects {}",
                    data.reference.dim(),
                    arch.input_dim
                ),
            ));
        }
        if data.target.dim() != arch.output_dim {
            return Err(Error::config(
                "arch.output_dim",
                format!(
                    "target has d={}, generator emits {}",
                    data.target.dim(),
                    arch.output_dim
                ),
            ));
        }
        if let Some(k) = arch.num_classes {
            if data.target.num_components() != k {
                return Err(Error::config(
                    "arch.num_classes",
                    format!("target has {} components, expected {k}", data.target.num_components()),
                ));
            }
        }
        let params = GeneratorParams::init(arch, &mut stream(config.seed, "init"))?;
        Ok(Self {
            adam: AdamState::new(&params),
            ema: params.clone(),
            streams: Streams::new(config.seed),
            params,
            config,
            data,
            step: 0,
        })
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    pub fn ema(&self) -> &GeneratorParams {
        &self.ema
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn snapshot(&self) -> Snapshot<'_> {
        Snapshot {
            step: self.step,
            params: &self.params,
            ema: &self.ema,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            params: self.params.clone(),
            ema: self.ema.clone(),
        }
    }

    fn draw_reference(&mut self, n: usize) -> Array2<f64> {
        self.data
            .reference
            .sample(n, &mut self.streams.reference)
            .into_positions()
    }

    fn draw_groups(&mut self) -> Result<Vec<Group>> {
        let cfg = &self.config;
        let (n, m) = (cfg.batch_n, cfg.batch_m);
        let needs_uncond = cfg.velocity.needs_uncond_batch();
        let uncond_n = cfg.velocity.guidance.uncond_batch();
        let base_spec = cfg.velocity.clone();
        let guidance_input = cfg.arch.guidance_input;
        let classes = cfg.arch.num_classes;

        let Some(k) = classes else {
            let w = if guidance_input {
                Some(sample_guidance_scale(&mut self.streams.guidance))
            } else {
                None
            };
            let spec = match w {
                Some(w) => with_guidance_weight(&base_spec, w),
                None => base_spec,
            };
            let z = self.draw_reference(n);
            let z_second = self.draw_reference(n);
            let target = self.data.target.sample(m, &mut self.streams.target);
            let uncond = needs_uncond.then(|| self.data.target.sample(uncond_n, &mut self.streams.target));
            return Ok(vec![Group {
                z,
                z_second,
                labels: None,
                w: w.map(|w| vec![w; n]),
                target,
                uncond,
                spec,
            }]);
        };

        let mut groups = Vec::with_capacity(k);
        for c in 0..k {
            let nc = n / k + usize::from(c < n % k);
            let mc = m / k + usize::from(c < m % k);
            let w = if guidance_input {
                Some(sample_guidance_scale(&mut self.streams.guidance))
            } else {
                None
            };
            let spec = match w {
                Some(w) => with_guidance_weight(&base_spec, w),
                None => base_spec.clone(),
            };
            let z = self.draw_reference(nc);
            let z_second = self.draw_reference(nc);
            let target = self.data.target.sample_component(c, mc, &mut self.streams.target)?;
            let uncond = needs_uncond.then(|| self.data.target.sample(uncond_n, &mut self.streams.target));
            groups.push(Group {
                z,
                z_second,
                labels: Some(vec![c; nc]),
                w: w.map(|w| vec![w; nc]),
                target,
                uncond,
                spec,
            });
        }
        Ok(groups)
    }

    /// One W-Flow step with the configured velocity.
    pub fn step(&mut self) -> Result<StepReport> {
        self.step_with(&ConfiguredField)
    }

    /// One W-Flow step with an explicit velocity field.
    pub fn step_with(&mut self, field: &dyn GroupField) -> Result<StepReport> {
        let step = self.step;
        let groups = self.draw_groups().map_err(|e| e.at_step(step))?;
        let total_n: usize = groups.iter().map(|g| g.z.nrows()).sum();
        let eta = self.config.step_size;
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        let mut max_velocity: f64 = 0.0;
        for g in &groups {
            let cond = Conditioning {
                labels: g.labels.as_deref(),
                guidance: g.w.as_deref(),
            };
            let tape = self
                .params
                .forward_cached(g.z.view(), &cond)
                .map_err(|e| e.at_step(step))?;
            let x_second = self
                .params
                .forward(g.z_second.view(), &cond)
                .map_err(|e| e.at_step(step))?;
            let out = tape.output.clone();
            let (q, q_second) = match (ParticleBatch::uniform(out), ParticleBatch::uniform(x_second)) {
                (Ok(q), Ok(qs)) => (q, qs),
                _ => {
                    return Err(Error::NonFiniteLoss {
                        step,
                        max_velocity: f64::NAN,
                    })
                }
            };
            let inputs = VelocityInputs {
                q: &q,
                q_second: &q_second,
                p: &g.target,
                p_uncond: g.uncond.as_ref(),
            };
            let v = field.group_velocity(&g.spec, &inputs).map_err(|e| e.at_step(step))?;
            max_velocity = max_velocity.max(v.max_abs());
            let x = tape.output.view();
            let target = &x + &(v.vectors().to_owned() * eta);
            let diff = &x - &target;
            loss += diff.iter().map(|d| d * d).sum::<f64>();
            let upstream = diff * (2.0 / total_n as f64);
            let gr = self.params.backward(&tape, upstream.view())?;
            for (acc, add) in grads.tensors_mut().into_iter().zip(gr.tensors()) {
                acc.iter_mut().zip(add).for_each(|(a, b)| *a += b);
            }
        }
        loss /= total_n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, max_velocity });
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        self.adam.update(&mut self.params, &grads, &self.config.adam())?;
        ema_update(&mut self.ema, &self.params, self.config.ema_decay)?;
        self.step += 1;
        Ok(StepReport { step, loss, grad_norm })
    }

    /// Draws `count` samples from the EMA (or raw) model.
    pub fn sample(&self, use_ema: bool, count: usize, cond: &Conditioning<'_>, rng: &mut Rng) -> Result<ParticleBatch> {
        let params = if use_ema { &self.ema } else { &self.params };
        sample(params, &self.data.reference, count, cond, rng)
    }
}

/// Velocity evaluation per regression group.
pub trait GroupField {
    fn group_velocity(
        &self,
        group_spec: &VelocityFieldSpec,
        inputs: &VelocityInputs<'_>,
    ) -> Result<crate::velocity::VelocityBatch>;
}

/// The configured spec, with the group's sampled guidance scale substituted.
struct ConfiguredField;

impl GroupField for ConfiguredField {
    fn group_velocity(
        &self,
        group_spec: &VelocityFieldSpec,
        inputs: &VelocityInputs<'_>,
    ) -> Result<crate::velocity::VelocityBatch> {
        group_spec.velocity(inputs)
    }
}

impl<F: VelocityField> GroupField for F {
    fn group_velocity(
        &self,
        _group_spec: &VelocityFieldSpec,
        inputs: &VelocityInputs<'_>,
    ) -> Result<crate::velocity::VelocityBatch> {
        self.velocity(inputs)
    }
}

fn with_guidance_weight(spec: &VelocityFieldSpec, w: f64) -> VelocityFieldSpec {
    let mut s = spec.clone();
    s.guidance = match s.guidance {
        Guidance::None => Guidance::None,
        g => g.with_weight(w),
    };
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GeneratorParams,
    pub ema: GeneratorParams,
    pub losses: Vec<f64>,
}

/// Runs `config.steps` steps; `on_checkpoint` sees step 0 and every
/// `checkpoint_interval` steps after it, plus the final step.
pub fn train_generator(
    config: TrainConfig,
    data: TrainingData,
    on_checkpoint: &mut dyn FnMut(Snapshot<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, data)?;
    let interval = trainer.config.checkpoint_interval;
    let steps = trainer.config.steps;
    let mut losses = Vec::with_capacity(steps);
    if interval > 0 {
        on_checkpoint(trainer.snapshot())?;
    }
    for _ in 0..steps {
        let r = trainer.step()?;
        losses.push(r.loss);
        let done = trainer.steps_done();
        if interval > 0 && (done % interval == 0 || done == steps) {
            on_checkpoint(trainer.snapshot())?;
        }
    }
    Ok(TrainOutcome {
        params: trainer.params,
        ema: trainer.ema,
        losses,
    })
}

/// Pushes `count` reference draws through the generator.
pub fn sample(
    params: &GeneratorParams,
    reference: &Distribution,
    count: usize,
    cond: &Conditioning<'_>,
    rng: &mut Rng,
) -> Result<ParticleBatch> {
    if count == 0 {
        return Ok(ParticleBatch::empty(params.arch.output_dim));
    }
    let z = reference.sample(count, rng).into_positions();
    let x = params.forward(z.view(), cond)?;
    let batch = ParticleBatch::uniform(x)?;
    match cond.labels {
        Some(l) => batch.with_labels(l.to_vec()),
        None => Ok(batch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::{VelocityBatch, ZeroVelocity};
    use ndarray::array;

    fn arch(hidden: Vec<usize>) -> Architecture {
        Architecture {
            hidden,
            ..Architecture::default()
        }
    }

    fn uniform_matrix(shape: (usize, usize), seed: u64, label: &str) -> Array2<f64> {
        let mut rng = stream(seed, label);
        Array2::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    fn linear(weight: Array2<f64>, bias: Array1<f64>) -> GeneratorParams {
        let (out, input) = weight.dim();
        GeneratorParams {
            arch: Architecture {
                input_dim: input,
                output_dim: out,
                hidden: vec![],
                ..Architecture::default()
            },
            layers: vec![DenseLayer {
                weight,
                bias,
                norm: None,
            }],
        }
    }

    #[test]
    fn single_layer_examples() {
        let p = linear(array![[2.0]], array![1.0]);
        assert_eq!(
            p.forward(array![[3.0]].view(), &Conditioning::none()).unwrap(),
            array![[7.0]]
        );
        let id = linear(Array2::eye(3), Array1::zeros(3));
        let z = uniform_matrix((5, 3), 1, "z");
        assert_eq!(id.forward(z.view(), &Conditioning::none()).unwrap(), z);
    }

    #[test]
    fn residual_zero_init_is_identity() {
        let a = Architecture {
            residual: true,
            zero_init_final: true,
            hidden: vec![16, 16],
            ..Architecture::default()
        };
        let p = GeneratorParams::init(&a, &mut stream(0, "init")).unwrap();
        let z = uniform_matrix((9, 2), 2, "z");
        assert_eq!(p.forward(z.view(), &Conditioning::none()).unwrap(), z);
        let reference = DistributionSpec::StandardNormal { dim: 2 }.build().unwrap();
        let s = sample(&p, &reference, 7, &Conditioning::none(), &mut stream(3, "s")).unwrap();
        let direct = reference.sample(7, &mut stream(3, "s"));
        assert_eq!(s.positions(), direct.positions());
        assert!(sample(&p, &reference, 0, &Conditioning::none(), &mut stream(3, "s"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn init_bounds_and_layout() {
        let a = arch(vec![8, 5]);
        let p = GeneratorParams::init(&a, &mut stream(4, "init")).unwrap();
        let shapes: Vec<_> = p.layers.iter().map(|l| l.weight.dim()).collect();
        assert_eq!(shapes, vec![(8, 2), (5, 8), (2, 5)]);
        for l in &p.layers {
            let bound = 1.0 / (l.weight.ncols() as f64).sqrt();
            assert!(l.weight.iter().chain(l.bias.iter()).all(|w| w.abs() < bound));
        }
        assert_eq!(p.num_params(), 8 * 2 + 8 + 5 * 8 + 5 + 2 * 5 + 2);
        let flat = p.to_flat();
        assert_eq!(p.with_flat(&flat).unwrap(), p);
        assert!(p.with_flat(&flat[1..]).is_err());
    }

    #[test]
    fn conditioning_channels() {
        let a = Architecture {
            num_classes: Some(3),
            guidance_input: true,
            hidden: vec![4],
            ..Architecture::default()
        };
        assert_eq!(a.network_input_dim(), 6);
        let p = GeneratorParams::init(&a, &mut stream(5, "init")).unwrap();
        let z = uniform_matrix((2, 2), 5, "z");
        let labels = [0, 2];
        let w = [0.5, 1.5];
        let cond = Conditioning {
            labels: Some(&labels),
            guidance: Some(&w),
        };
        assert!(p.forward(z.view(), &cond).is_ok());
        assert!(p.forward(z.view(), &Conditioning::none()).is_err());
        let bad = [0, 3];
        assert!(p
            .forward(
                z.view(),
                &Conditioning {
                    labels: Some(&bad),
                    guidance: Some(&w)
                }
            )
            .is_err());
        // the class one-hot lands in the right input column
        let x = p.network_input(z.view(), &cond).unwrap();
        assert_eq!(x.row(1).to_vec(), vec![z[[1, 0]], z[[1, 1]], 0.0, 0.0, 1.0, 1.5]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = GeneratorParams::init(&arch(vec![6, 6]), &mut stream(6, "init")).unwrap();
        let z = uniform_matrix((4, 2), 6, "z");
        let tape = p.forward_cached(z.view(), &Conditioning::none()).unwrap();
        let g = p.backward(&tape, Array2::zeros((4, 2)).view()).unwrap();
        assert_eq!(g.global_norm(), 0.0);
    }

    #[test]
    fn linear_least_squares_gradient_matches_closed_form() {
        // loss = (1/N) sum (x theta - y)^2 with theta a column: grad = 2 X^T (X theta - y) / N
        let n = 16;
        let x = uniform_matrix((n, 3), 7, "x");
        let y = uniform_matrix((n, 1), 7, "y");
        let theta = array![[0.3, -1.2, 0.7]];
        let p = linear(theta.clone(), array![0.0]);
        let tape = p.forward_cached(x.view(), &Conditioning::none()).unwrap();
        let resid = &tape.output() - &y;
        let g = p.backward(&tape, (&resid * (2.0 / n as f64)).view()).unwrap();
        let closed = x.t().dot(&(x.dot(&theta.t()) - &y)) * (2.0 / n as f64);
        for k in 0..3 {
            assert!((g.layers[0].weight[[0, k]] - closed[[k, 0]]).abs() <= 1e-12);
        }
    }

    fn check(a: &Architecture, batch: usize, seed: u64) -> GradientCheck {
        let p = GeneratorParams::init(a, &mut stream(seed, "init")).unwrap();
        let z = uniform_matrix((batch, a.input_dim), seed, "z");
        let up = uniform_matrix((batch, a.output_dim), seed, "up");
        finite_difference_check(&p, z.view(), &Conditioning::none(), up.view(), 1e-5, 1e-8).unwrap()
    }

    #[test]
    fn small_networks_pass_finite_differences() {
        for activation in [Activation::Silu, Activation::Tanh] {
            for (residual, layer_norm) in [(false, false), (true, false), (false, true), (true, true)] {
                let a = Architecture {
                    hidden: vec![7, 5],
                    activation,
                    residual,
                    layer_norm,
                    ..Architecture::default()
                };
                let r = check(&a, 3, 8);
                assert_eq!(
                    r.checked,
                    GeneratorParams::init(&a, &mut stream(8, "init")).unwrap().num_params()
                );
                assert!(
                    r.max_relative_error <= 1e-6,
                    "{activation:?} res {residual} ln {layer_norm}: {r:?}"
                );
            }
        }
    }

    #[test]
    fn adam_update_and_weight_decay() {
        let mut p = linear(array![[1.0, -2.0]], array![0.5]);
        let g = linear(array![[0.1, 0.0]], array![-0.3]);
        let mut adam = AdamState::new(&p);
        let h = AdamHyper {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
        };
        adam.update(&mut p, &g, &h).unwrap();
        // first bias-corrected step moves by lr * sign(g) (up to the eps term)
        let decay = 1.0 - 0.01 * 0.1;
        let want = [
            1.0 * decay - 0.01 * 0.1 / (0.1 + 1e-8),
            -2.0 * decay,
            0.5 * decay + 0.01 * 0.3 / (0.3 + 1e-8),
        ];
        let got = p.to_flat();
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn clipping_and_ema() {
        let mut g = linear(array![[3.0, 4.0]], array![0.0]);
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.to_flat(), vec![3.0, 4.0, 0.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g.global_norm() - 5.0 / (5.0 + 1e-6)).abs() < 1e-15);

        let p = linear(array![[1.0, 2.0]], array![3.0]);
        let mut e = p.zeros_like();
        ema_update(&mut e, &p, 0.0).unwrap();
        assert_eq!(e, p);
        let mut e = p.zeros_like();
        ema_update(&mut e, &p, 0.75).unwrap();
        assert_eq!(e.to_flat(), vec![0.25, 0.5, 0.75]);
    }

    #[test]
    fn guidance_scale_distribution() {
        let mut rng = stream(9, "w");
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_guidance_scale(&mut rng)).collect();
        assert!(draws.iter().all(|w| (0.0..=GUIDANCE_W_MAX).contains(w)));
        // P(w <= t) = (1 - (1+t)^-2) / (1 - 4^-2)
        for t in [0.25f64, 0.5, 1.0, 2.0] {
            let cdf = (1.0 - (1.0 + t).powi(-2)) / (1.0 - 1.0 / 16.0);
            let emp = draws.iter().filter(|&&w| w <= t).count() as f64 / n as f64;
            let se = (cdf * (1.0 - cdf) / n as f64).sqrt();
            assert!((emp - cdf).abs() < 5.0 * se, "t={t}: {emp} vs {cdf}");
        }
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            arch: arch(vec![16, 16]),
            batch_n: 32,
            batch_m: 32,
            steps: 3,
            velocity: VelocityFieldSpec::sinkhorn(SinkhornSpec::new(0.1, 50), SelfEstimator::TwoBatch),
            seed: 11,
            checkpoint_interval: 2,
            ..TrainConfig::default()
        }
    }

    fn gaussian_data() -> TrainingData {
        TrainingData::new(
            &DistributionSpec::StandardNormal { dim: 2 },
            &DistributionSpec::diagonal(vec![1.0, -1.0], &[1.0, 4.0]),
        )
        .unwrap()
    }

    #[test]
    fn zero_velocity_only_shrinks_by_weight_decay() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..toy_config()
        };
        let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
        let mut t = Trainer::new(cfg, gaussian_data()).unwrap();
        let before = t.params().to_flat();
        let r = t.step_with(&ZeroVelocity).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.grad_norm, 0.0);
        for (a, b) in t.params().to_flat().iter().zip(&before) {
            assert_eq!(*a, b * decay);
        }
    }

    /// Constant field `c` everywhere.
    struct Constant(Vec<f64>);

    impl VelocityField for Constant {
        fn velocity(&self, inputs: &VelocityInputs<'_>) -> Result<VelocityBatch> {
            let n = inputs.q.len();
            VelocityBatch::new(Array2::from_shape_fn((n, self.0.len()), |(_, j)| self.0[j]))
        }
    }

    #[test]
    fn loss_scale_is_eta_squared_velocity_norm() {
        let cfg = TrainConfig {
            step_size: 0.5,
            ..toy_config()
        };
        let mut t = Trainer::new(cfg, gaussian_data()).unwrap();
        let r = t.step_with(&Constant(vec![0.6, -0.8])).unwrap();
        assert!((r.loss - 0.25).abs() < 1e-15, "{}", r.loss);
    }

    #[test]
    fn identity_start_loss_uses_source_particles() {
        // with f = identity the step-0 loss is (1/N) sum |eta V(z_i)|^2 at z_i
        let cfg = TrainConfig {
            arch: Architecture {
                residual: true,
                zero_init_final: true,
                hidden: vec![8],
                ..Architecture::default()
            },
            ..toy_config()
        };
        let data = gaussian_data();
        let eta = cfg.step_size;
        let spec = cfg.velocity.clone();
        let seed = cfg.seed;
        let mut t = Trainer::new(cfg, data.clone()).unwrap();
        let r = t.step().unwrap();

        let mut reference = stream(seed, "train/reference");
        let z = data.reference.sample(32, &mut reference);
        let z2 = data.reference.sample(32, &mut reference);
        let p = data.target.sample(32, &mut stream(seed, "train/target"));
        let v = spec
            .velocity(&VelocityInputs {
                q: &z,
                q_second: &z2,
                p: &p,
                p_uncond: None,
            })
            .unwrap();
        let expected = v.vectors().iter().map(|x| (eta * x).powi(2)).sum::<f64>() / 32.0;
        assert!(
            (r.loss - expected).abs() <= 1e-12 * expected.max(1.0),
            "{} vs {expected}",
            r.loss
        );
    }

    #[test]
    fn gradient_flows_only_through_the_prediction() {
        // Frozen targets: the gradient is backward(2 (f - x~)/N), which with
        // x~ = f + eta V reduces to -2 eta V / N regardless of how V was built.
        let cfg = toy_config();
        let n = cfg.batch_n;
        let eta = cfg.step_size;
        let p = GeneratorParams::init(&cfg.arch, &mut stream(cfg.seed, "init")).unwrap();
        let z = uniform_matrix((n, 2), 12, "z");
        let tape = p.forward_cached(z.view(), &Conditioning::none()).unwrap();
        let q = ParticleBatch::uniform(tape.output().to_owned()).unwrap();
        let q2 = ParticleBatch::uniform(
            p.forward(uniform_matrix((n, 2), 12, "z2").view(), &Conditioning::none())
                .unwrap(),
        )
        .unwrap();
        let target = ParticleBatch::uniform(uniform_matrix((n, 2), 12, "y") * 2.0).unwrap();
        let v = cfg
            .velocity
            .velocity(&VelocityInputs {
                q: &q,
                q_second: &q2,
                p: &target,
                p_uncond: None,
            })
            .unwrap();
        let frozen = &tape.output() + &(&v.vectors() * eta);
        let loss_frozen = |theta: &GeneratorParams| {
            let out = theta.forward(z.view(), &Conditioning::none()).unwrap();
            (&out - &frozen).iter().map(|d| d * d).sum::<f64>() / n as f64
        };
        let upstream = (&tape.output() - &frozen) * (2.0 / n as f64);
        let analytic = p.backward(&tape, upstream.view()).unwrap().to_flat();

        // perturbing the self batch and the targets changes V and the loss value,
        // but the analytic gradient is the same backward with a different V
        let target2 = ParticleBatch::uniform(target.positions().to_owned() + 0.5).unwrap();
        let v2 = cfg
            .velocity
            .velocity(&VelocityInputs {
                q: &q,
                q_second: &q2,
                p: &target2,
                p_uncond: None,
            })
            .unwrap();
        assert!(max_abs_diff(&v.vectors().to_owned(), &v2.vectors().to_owned()) > 1e-3);

        // central differences with the targets held fixed agree with backward
        let flat = p.to_flat();
        let h = 1e-5;
        for k in (0..flat.len()).step_by(7) {
            let mut plus = flat.clone();
            plus[k] += h;
            let mut minus = flat.clone();
            minus[k] -= h;
            let fd =
                (loss_frozen(&p.with_flat(&plus).unwrap()) - loss_frozen(&p.with_flat(&minus).unwrap())) / (2.0 * h);
            assert!(
                relative_error(analytic[k], fd, 1e-8) <= 1e-5,
                "param {k}: {} vs {fd}",
                analytic[k]
            );
        }

        // with x~ detached the upstream collapses to -2 eta V / N
        let direct = -(&v.vectors() * (2.0 * eta / n as f64));
        assert!(max_abs_diff(&upstream, &direct) < 1e-15);
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0, |m, d| m.max(d.abs()))
    }

    #[test]
    fn steps_zero_returns_initial_params() {
        let cfg = TrainConfig {
            steps: 0,
            ..toy_config()
        };
        let init = GeneratorParams::init(&cfg.arch, &mut stream(cfg.seed, "init")).unwrap();
        let mut calls = Vec::new();
        let out = train_generator(cfg, gaussian_data(), &mut |s| {
            calls.push(s.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.ema, init);
        assert!(out.losses.is_empty());
        assert_eq!(calls, vec![0]);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let run = || {
            let mut steps = Vec::new();
            let out = train_generator(toy_config(), gaussian_data(), &mut |s| {
                steps.push(s.step);
                Ok(())
            })
            .unwrap();
            (out, steps)
        };
        let (a, steps) = run();
        let (b, _) = run();
        assert_eq!(steps, vec![0, 2, 3]);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
        assert_eq!(a.ema, b.ema);

        let mut t = Trainer::new(toy_config(), gaussian_data()).unwrap();
        t.step().unwrap();
        let c = t.checkpoint();
        let json = c.to_json().unwrap();
        assert_eq!(Checkpoint::from_json(&json).unwrap(), c);
        assert_eq!(c.to_json().unwrap(), json);
        let stale = json.replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(Checkpoint::from_json(&stale).is_err());
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig {
            ema_decay: 1.0,
            ..toy_config()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("ema_decay"));
        let bad = TrainConfig {
            step_size: 0.0,
            ..toy_config()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("step_size"));
        let bad = Architecture {
            residual: true,
            output_dim: 3,
            ..Architecture::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn conditional_training_runs_one_group_per_class() {
        let target = crate::distributions::catalog_entry("three-mode-conditional").unwrap();
        let cfg = TrainConfig {
            arch: Architecture {
                num_classes: Some(3),
                guidance_input: true,
                hidden: vec![16],
                ..Architecture::default()
            },
            batch_n: 30,
            batch_m: 30,
            velocity: toy_config().velocity.with_guidance(Guidance::Velocity {
                w: 1.0,
                uncond_batch: 8,
            }),
            ..toy_config()
        };
        let data = TrainingData::new(&DistributionSpec::StandardNormal { dim: 2 }, &target).unwrap();
        let mut t = Trainer::new(cfg, data).unwrap();
        let groups = t.draw_groups().unwrap();
        assert_eq!(groups.len(), 3);
        for (c, g) in groups.iter().enumerate() {
            assert_eq!(g.z.nrows(), 10);
            assert_eq!(g.labels.as_deref(), Some(&[c; 10][..]));
            assert!(g.target.labels().unwrap().iter().all(|&l| l == c));
            let w = g.w.as_ref().unwrap()[0];
            assert_eq!(g.spec.guidance.weight(), w);
            assert_eq!(g.uncond.as_ref().unwrap().len(), 8);
        }
        assert!(t.step().unwrap().loss.is_finite());
    }
}
