//! Fully-connected value network with a per-layer activation schedule.
//!
//! Sine layers compute `sin(freq * z)`. The layer consuming the (normalized)
//! coordinates uses `freq = omega0`; deeper sine layers use `freq = 1` and
//! carry the sinusoidal scaling in their weights.
//!
//! All evaluation goes through [`BatchTape`], a row-major batch pass that
//! records what the input-gradient and second-order parameter adjoints need.
//! Single-sample queries are batches of one, so a point evaluated alone or
//! inside a batch produces bit-identical results.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schedule::{Activation, ActivationSchedule};
use super::trig::scaled_sin_cos;
use crate::error::{Error, Result};
use crate::linalg::gemm;

/// Per-coordinate affine map `u = (raw - offset) / scale` into `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNormalization {
    offset: Vec<f64>,
    scale: Vec<f64>,
}

impl InputNormalization {
    pub fn new(offset: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if offset.len() != scale.len() {
            return Err(Error::Dimension {
                expected: offset.len(),
                got: scale.len(),
            });
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(
                "normalization scales must be finite and positive".into(),
            ));
        }
        if offset.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite("normalization offset"));
        }
        Ok(Self { offset, scale })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Normalization mapping each interval `[lo_i, hi_i]` onto `[-1, 1]`.
    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self> {
        let offset = bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
        let scale = bounds.iter().map(|(lo, hi)| 0.5 * (hi - lo)).collect();
        Self::new(offset, scale)
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn apply(&self, raw: &[f64], out: &mut [f64]) {
        for (i, (r, o)) in raw.iter().zip(out.iter_mut()).enumerate() {
            *o = (r - self.offset[i]) / self.scale[i];
        }
    }
}

/// One affine map followed by an activation. `weight` is `fan_out x fan_in`,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    pub freq: f64,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize, activation: Activation, freq: f64) -> Self {
        Self {
            fan_in,
            fan_out,
            activation,
            freq,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }
}

/// Learned approximation of `V(x, tau)`; the raw input is `(tau, x_1..x_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    schedule: ActivationSchedule,
    input_dim: usize,
    hidden_width: usize,
    omega0: f64,
    norm: InputNormalization,
    layers: Vec<Dense>,
}

/// Pre-activations and activations of every layer for a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub normalized_input: Vec<f64>,
    pub pre_activations: Vec<Vec<f64>>,
    pub activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Re-evaluate the output layer from the recorded last activation.
    pub fn replay(&self, net: &ValueNet) -> f64 {
        let last = net.layers.last().expect("network has layers");
        let input = self
            .activations
            .last()
            .unwrap_or(&self.normalized_input);
        let mut out = last.bias.clone();
        gemm(1, last.fan_in, 1, 1.0, input, false, &last.weight, true, 1.0, &mut out);
        out[0]
    }

    pub fn output(&self) -> f64 {
        self.pre_activations.last().map(|z| z[0]).unwrap_or(0.0)
    }
}

/// Value and gradient with respect to the raw input `(tau, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl InputGradient {
    pub fn d_tau(&self) -> f64 {
        self.gradient[0]
    }

    pub fn d_state(&self) -> &[f64] {
        &self.gradient[1..]
    }
}

/// Gradient buffers shaped like the network parameters, ordered
/// `[W_0, b_0, W_1, b_1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &ValueNet) -> Self {
        Self {
            tensors: net.parameters().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }
}

/// Build a network with sinusoidal-representation initialization for sine
/// layers and fan-in-scaled uniform initialization elsewhere.
pub fn init_network(
    schedule: ActivationSchedule,
    input_dim: usize,
    hidden_width: usize,
    omega0: f64,
    seed: u64,
) -> Result<ValueNet> {
    if input_dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "input_dim must be at least 2 (time plus one state), got {input_dim}"
        )));
    }
    if hidden_width == 0 {
        return Err(Error::InvalidArgument("hidden_width must be positive".into()));
    }
    if !(omega0.is_finite() && omega0 > 0.0) {
        return Err(Error::InvalidArgument("omega0 must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acts = schedule.layers();
    let mut layers = Vec::with_capacity(acts.len());
    for (i, &act) in acts.iter().enumerate() {
        let fan_in = if i == 0 { input_dim } else { hidden_width };
        let fan_out = if i + 1 == acts.len() { 1 } else { hidden_width };
        let n = fan_in as f64;
        let freq = if act == Activation::Sine && i == 0 { omega0 } else { 1.0 };
        let w_bound = match act {
            Activation::Sine if i == 0 => 1.0 / n,
            Activation::Sine => (6.0 / n).sqrt(),
            Activation::Rectifier => (6.0 / n).sqrt(),
            Activation::Affine if i > 0 && acts[i - 1] == Activation::Sine => {
                (6.0 / n).sqrt() / omega0
            }
            Activation::Affine => (1.0 / n).sqrt(),
        };
        let b_bound = 1.0 / n.sqrt();
        let mut layer = Dense::zeros(fan_in, fan_out, act, freq);
        for w in &mut layer.weight {
            *w = rng.gen_range(-w_bound..=w_bound);
        }
        for b in &mut layer.bias {
            *b = rng.gen_range(-b_bound..=b_bound);
        }
        layers.push(layer);
    }
    Ok(ValueNet {
        schedule,
        input_dim,
        hidden_width,
        omega0,
        norm: InputNormalization::identity(input_dim),
        layers,
    })
}

impl ValueNet {
    /// Assemble a network from explicit layers, checking shape consistency.
    pub fn from_parts(
        schedule: ActivationSchedule,
        omega0: f64,
        norm: InputNormalization,
        layers: Vec<Dense>,
    ) -> Result<Self> {
        if layers.len() != schedule.len() {
            return Err(Error::Shape(format!(
                "{} layers for a {}-layer schedule",
                layers.len(),
                schedule.len()
            )));
        }
        let input_dim = layers[0].fan_in;
        let hidden_width = layers[0].fan_out;
        if norm.dim() != input_dim {
            return Err(Error::Dimension {
                expected: input_dim,
                got: norm.dim(),
            });
        }
        for (i, (layer, act)) in layers.iter().zip(schedule.layers()).enumerate() {
            let fan_in = if i == 0 { input_dim } else { hidden_width };
            let fan_out = if i + 1 == layers.len() { 1 } else { hidden_width };
            if layer.fan_in != fan_in
                || layer.fan_out != fan_out
                || layer.weight.len() != fan_in * fan_out
                || layer.bias.len() != fan_out
                || layer.activation != *act
            {
                return Err(Error::Shape(format!("layer {i} inconsistent with schedule")));
            }
            if layer.weight.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameters"));
            }
        }
        Ok(Self {
            schedule,
            input_dim,
            hidden_width,
            omega0,
            norm,
            layers,
        })
    }

    pub fn with_normalization(mut self, norm: InputNormalization) -> Result<Self> {
        if norm.dim() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: norm.dim(),
            });
        }
        self.norm = norm;
        Ok(self)
    }

    pub fn schedule(&self) -> &ActivationSchedule {
        &self.schedule
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn normalization(&self) -> &InputNormalization {
        &self.norm
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn check_input(&self, raw: &[f64], batch: usize) -> Result<()> {
        if raw.len() != batch * self.input_dim {
            return Err(Error::Dimension {
                expected: batch * self.input_dim,
                got: raw.len(),
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    /// Value at one raw input `(tau, x)`.
    pub fn forward(&self, raw: &[f64]) -> Result<f64> {
        self.check_input(raw, 1)?;
        Ok(BatchTape::record(self, raw, 1, false).values[0])
    }

    pub fn forward_trace(&self, raw: &[f64]) -> Result<(f64, ForwardTrace)> {
        self.check_input(raw, 1)?;
        let tape = BatchTape::record(self, raw, 1, false);
        let hidden = self.layers.len() - 1;
        let trace = ForwardTrace {
            normalized_input: tape.input.clone(),
            pre_activations: tape.z.clone(),
            activations: tape.h[..hidden].to_vec(),
        };
        Ok((tape.values[0], trace))
    }

    /// Values for a row-major batch of raw inputs.
    pub fn forward_batch(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let batch = raw.len() / self.input_dim.max(1);
        self.check_input(raw, batch)?;
        Ok(BatchTape::record(self, raw, batch, false).values)
    }

    /// Exact gradient with respect to the raw (unnormalized) input.
    pub fn input_gradient(&self, raw: &[f64]) -> Result<InputGradient> {
        self.check_input(raw, 1)?;
        let tape = BatchTape::record(self, raw, 1, true);
        Ok(InputGradient {
            value: tape.values[0],
            gradient: tape.raw_gradients(),
        })
    }

    /// Values and raw-input gradients (row-major `batch x input_dim`).
    pub fn input_gradient_batch(&self, raw: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = raw.len() / self.input_dim.max(1);
        self.check_input(raw, batch)?;
        let tape = BatchTape::record(self, raw, batch, true);
        let grads = tape.raw_gradients();
        Ok((tape.values, grads))
    }

    /// Gradient of `sum_i (value_adjoints[i] * V_i + <grad_adjoints[i], dV_i/draw>)`
    /// with respect to every parameter.
    pub fn parameter_gradients(
        &self,
        raw: &[f64],
        value_adjoints: &[f64],
        grad_adjoints: &[f64],
    ) -> Result<Gradients> {
        let batch = value_adjoints.len();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        self.check_input(raw, batch)?;
        if grad_adjoints.len() != batch * self.input_dim {
            return Err(Error::Shape(format!(
                "gradient adjoints have {} entries, expected {}",
                grad_adjoints.len(),
                batch * self.input_dim
            )));
        }
        if value_adjoints.iter().chain(grad_adjoints).any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("loss adjoints"));
        }
        let needs_grad = grad_adjoints.iter().any(|a| *a != 0.0);
        let tape = BatchTape::record(self, raw, batch, needs_grad);
        Ok(tape.parameter_gradients(self, value_adjoints, needs_grad.then_some(grad_adjoints)))
    }
}

/// Recorded batch evaluation. Layer `l` maps `h[l-1]` (or the normalized
/// input) to `z[l]`; hidden layers store `h[l] = act(z[l])` and its
/// derivative `s1[l]`. When the input gradient is requested, `a[l] = dV/dz[l]`
/// and `e[l] = dV/dh[l]` are stored as well.
pub struct BatchTape {
    batch: usize,
    input: Vec<f64>,
    z: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    s1: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
    values: Vec<f64>,
    grad_normalized: Vec<f64>,
    scale: Vec<f64>,
}

impl BatchTape {
    /// Forward pass, plus the reverse pass for the input gradient when
    /// `with_input_grad` is set. Inputs must already be validated.
    pub fn record(net: &ValueNet, raw: &[f64], batch: usize, with_input_grad: bool) -> Self {
        let d = net.input_dim;
        let mut input = vec![0.0; batch * d];
        for (r, o) in raw.chunks_exact(d).zip(input.chunks_exact_mut(d)) {
            net.norm.apply(r, o);
        }
        let n_layers = net.layers.len();
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut h: Vec<Vec<f64>> = Vec::with_capacity(n_layers - 1);
        let mut s1: Vec<Vec<f64>> = Vec::with_capacity(n_layers - 1);
        for (l, layer) in net.layers.iter().enumerate() {
            let prev = if l == 0 { &input } else { &h[l - 1] };
            let mut zl = vec![0.0; batch * layer.fan_out];
            for row in zl.chunks_exact_mut(layer.fan_out) {
                row.copy_from_slice(&layer.bias);
            }
            gemm(
                batch,
                layer.fan_in,
                layer.fan_out,
                1.0,
                prev,
                false,
                &layer.weight,
                true,
                1.0,
                &mut zl,
            );
            if l + 1 < n_layers {
                let (hl, dl) = activate(layer, &zl);
                h.push(hl);
                s1.push(dl);
            }
            z.push(zl);
        }
        let values = z[n_layers - 1].clone();
        let mut tape = Self {
            batch,
            input,
            z,
            h,
            s1,
            a: Vec::new(),
            e: Vec::new(),
            values,
            grad_normalized: Vec::new(),
            scale: net.norm.scale.clone(),
        };
        if with_input_grad {
            tape.input_backward(net);
        }
        tape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    fn input_backward(&mut self, net: &ValueNet) {
        let b = self.batch;
        let n_layers = net.layers.len();
        let mut a: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut e: Vec<Vec<f64>> = vec![Vec::new(); n_layers - 1];
        a[n_layers - 1] = vec![1.0; b];
        for l in (1..n_layers).rev() {
            let layer = &net.layers[l];
            let mut el = vec![0.0; b * layer.fan_in];
            gemm(b, layer.fan_out, layer.fan_in, 1.0, &a[l], false, &layer.weight, false, 0.0, &mut el);
            let mut al = el.clone();
            for (x, s) in al.iter_mut().zip(&self.s1[l - 1]) {
                *x *= s;
            }
            e[l - 1] = el;
            a[l - 1] = al;
        }
        let first = &net.layers[0];
        let mut q = vec![0.0; b * first.fan_in];
        gemm(b, first.fan_out, first.fan_in, 1.0, &a[0], false, &first.weight, false, 0.0, &mut q);
        self.a = a;
        self.e = e;
        self.grad_normalized = q;
    }

    /// Gradients with respect to the raw input, row-major `batch x input_dim`.
    pub fn raw_gradients(&self) -> Vec<f64> {
        let d = self.scale.len();
        let mut out = self.grad_normalized.clone();
        for row in out.chunks_exact_mut(d) {
            for (g, s) in row.iter_mut().zip(&self.scale) {
                *g /= s;
            }
        }
        out
    }

    /// Reverse-mode accumulation through both the forward pass and the
    /// recorded input-gradient pass. `grad_adjoints` are adjoints of the raw
    /// input gradient; `None` means they are all zero.
    pub fn parameter_gradients(
        &self,
        net: &ValueNet,
        value_adjoints: &[f64],
        grad_adjoints: Option<&[f64]>,
    ) -> Gradients {
        let b = self.batch;
        let n_layers = net.layers.len();
        let mut grads = Gradients::zeros_like(net);
        let mut zbar: Vec<Vec<f64>> = net
            .layers
            .iter()
            .map(|l| vec![0.0; b * l.fan_out])
            .collect();

        if let Some(qbar_raw) = grad_adjoints {
            assert!(!self.a.is_empty(), "tape recorded without input gradient");
            let d = self.scale.len();
            let mut qbar = qbar_raw.to_vec();
            for row in qbar.chunks_exact_mut(d) {
                for (g, s) in row.iter_mut().zip(&self.scale) {
                    *g /= s;
                }
            }
            // q = a_0 W_0
            let first = &net.layers[0];
            let mut abar = vec![0.0; b * first.fan_out];
            gemm(b, first.fan_in, first.fan_out, 1.0, &qbar, false, &first.weight, true, 0.0, &mut abar);
            gemm(first.fan_out, b, first.fan_in, 1.0, &self.a[0], true, &qbar, false, 1.0, &mut grads.tensors[0]);
            for l in 1..n_layers {
                let layer = &net.layers[l];
                let prev = &net.layers[l - 1];
                // a_{l-1} = s1_{l-1} * e_{l-1}
                let mut ebar = abar.clone();
                for (x, s) in ebar.iter_mut().zip(&self.s1[l - 1]) {
                    *x *= s;
                }
                if prev.activation == Activation::Sine {
                    // d s1 / dz = -freq^2 * sin(freq z) = -freq^2 * h
                    let w2 = prev.freq * prev.freq;
                    let zb = &mut zbar[l - 1];
                    for (((zb, ab), el), hl) in zb
                        .iter_mut()
                        .zip(&abar)
                        .zip(&self.e[l - 1])
                        .zip(&self.h[l - 1])
                    {
                        *zb -= ab * el * w2 * hl;
                    }
                }
                // e_{l-1} = a_l W_l
                gemm(layer.fan_out, b, layer.fan_in, 1.0, &self.a[l], true, &ebar, false, 1.0, &mut grads.tensors[2 * l]);
                if l + 1 < n_layers {
                    let mut next = vec![0.0; b * layer.fan_out];
                    gemm(b, layer.fan_in, layer.fan_out, 1.0, &ebar, false, &layer.weight, true, 0.0, &mut next);
                    abar = next;
                } else {
                    abar = Vec::new();
                }
            }
        }

        for (zb, y) in zbar[n_layers - 1].iter_mut().zip(value_adjoints) {
            *zb += y;
        }
        for l in (0..n_layers).rev() {
            let layer = &net.layers[l];
            let prev = if l == 0 { &self.input } else { &self.h[l - 1] };
            gemm(layer.fan_out, b, layer.fan_in, 1.0, &zbar[l], true, prev, false, 1.0, &mut grads.tensors[2 * l]);
            let gb = &mut grads.tensors[2 * l + 1];
            for row in zbar[l].chunks_exact(layer.fan_out) {
                for (g, z) in gb.iter_mut().zip(row) {
                    *g += z;
                }
            }
            if l > 0 {
                let mut hbar = vec![0.0; b * layer.fan_in];
                gemm(b, layer.fan_out, layer.fan_in, 1.0, &zbar[l], false, &layer.weight, false, 0.0, &mut hbar);
                for ((zb, hb), s) in zbar[l - 1].iter_mut().zip(&hbar).zip(&self.s1[l - 1]) {
                    *zb += hb * s;
                }
            }
        }
        grads
    }
}

fn activate(layer: &Dense, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut h = vec![0.0; z.len()];
    let mut d = vec![0.0; z.len()];
    match layer.activation {
        Activation::Sine => scaled_sin_cos(z, layer.freq, &mut h, &mut d),
        Activation::Rectifier => {
            for ((hv, dv), zv) in h.iter_mut().zip(d.iter_mut()).zip(z) {
                if *zv > 0.0 {
                    *hv = *zv;
                    *dv = 1.0;
                }
            }
        }
        Activation::Affine => {
            h.copy_from_slice(z);
            d.iter_mut().for_each(|v| *v = 1.0);
        }
    }
    (h, d)
}
