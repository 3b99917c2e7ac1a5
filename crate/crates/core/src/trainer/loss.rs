use rand::Rng;

use crate::actnet::{BatchTape, Gradients, ValueNet};
use crate::dynamics::{Costate, SystemSpec};
use crate::error::{Error, Result};

/// Position in the training schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumState {
    /// Global iteration (pretraining steps included).
    pub iteration: usize,
    pub pretraining: bool,
    /// Fraction of the horizon currently sampled.
    pub gamma: f64,
}

impl CurriculumState {
    /// State at global iteration `k`. Curriculum step `j` (0-based) of `K`
    /// samples `gamma = j / (K - 1)`, so the window opens at 0 and reaches
    /// the full horizon on the last step.
    pub fn at(k: usize, pretrain_iters: usize, curriculum_iters: usize) -> Self {
        if k < pretrain_iters {
            return Self {
                iteration: k,
                pretraining: true,
                gamma: 0.0,
            };
        }
        let j = k - pretrain_iters;
        let gamma = if curriculum_iters <= 1 {
            1.0
        } else {
            (j as f64 / (curriculum_iters - 1) as f64).min(1.0)
        };
        Self {
            iteration: k,
            pretraining: false,
            gamma,
        }
    }

    /// A curriculum state with an explicit window, for sampling outside a run.
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            iteration: 0,
            pretraining: false,
            gamma,
        }
    }
}

/// Row-major `(tau, x)` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub input_dim: usize,
    pub inputs: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.terminal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terminal.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn terminal_count(&self) -> usize {
        self.terminal.iter().filter(|t| **t).count()
    }
}

/// Uniform states; the first `ceil(terminal_fraction * n)` samples (all of
/// them while pretraining) sit at `tau = 0`, the rest draw `tau` uniformly
/// from `[0, gamma * T_f]`.
pub fn sample_batch<R: Rng>(
    spec: &SystemSpec,
    curriculum: &CurriculumState,
    batch_size: usize,
    terminal_fraction: f64,
    rng: &mut R,
) -> SampleBatch {
    let n = spec.dim();
    let d = n + 1;
    let pinned = if curriculum.pretraining {
        batch_size
    } else {
        ((terminal_fraction * batch_size as f64).ceil() as usize).clamp(1, batch_size)
    };
    let window = curriculum.gamma.clamp(0.0, 1.0) * spec.horizon;
    let mut inputs = vec![0.0; batch_size * d];
    let mut terminal = vec![false; batch_size];
    for (i, row) in inputs.chunks_exact_mut(d).enumerate() {
        let u: f64 = rng.gen();
        if i < pinned {
            row[0] = 0.0;
            terminal[i] = true;
        } else {
            row[0] = u * window;
        }
        for (x, (lo, hi)) in row[1..].iter_mut().zip(&spec.state_box) {
            *x = lo + rng.gen::<f64>() * (hi - lo);
        }
    }
    SampleBatch {
        input_dim: d,
        inputs,
        terminal,
    }
}

/// Tube residual `min(H(x, dV/dx) - dV/dtau, l(x) - V)` at one sample.
pub fn vi_residual(net: &ValueNet, spec: &SystemSpec, tau: f64, x: &[f64]) -> Result<f64> {
    if !tau.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample"));
    }
    let mut raw = Vec::with_capacity(x.len() + 1);
    raw.push(tau);
    raw.extend_from_slice(x);
    let g = net.input_gradient(&raw)?;
    let h = spec.hamiltonian(x, &Costate(g.d_state().to_vec()))?;
    let l = spec.boundary_value(x)?;
    Ok((h - g.d_tau()).min(l - g.value))
}

/// Residuals for row-major `(tau, x)` samples through the batched tape.
pub fn vi_residuals(net: &ValueNet, spec: &SystemSpec, inputs: &[f64]) -> Result<Vec<f64>> {
    let d = spec.dim() + 1;
    if net.input_dim() != d || inputs.len() % d != 0 {
        return Err(Error::Dimension {
            expected: d,
            got: net.input_dim(),
        });
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample"));
    }
    let b = inputs.len() / d;
    let tape = BatchTape::record(net, inputs, b, true);
    let grads = tape.raw_gradients();
    Ok((0..b)
        .map(|i| {
            let x = &inputs[i * d + 1..(i + 1) * d];
            let g = &grads[i * d..(i + 1) * d];
            let h = spec.hamiltonian_unchecked(x, &g[1..]);
            (h - g[0]).min(spec.boundary_unchecked(x) - tape.values()[i])
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub iteration: usize,
    pub gamma: f64,
    pub total: f64,
    pub residual_term: f64,
    pub terminal_term: f64,
}

/// Loss value plus its gradient with respect to the network parameters.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub breakdown: LossBreakdown,
    pub gradients: Gradients,
}

/// Rows per block in [`compute_loss`].
const LOSS_CHUNK: usize = 500;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `mean |r|` over all samples plus `lambda * mean |V - l|` over terminal
/// samples. While pretraining the residual term is dropped (reported as 0).
pub fn compute_loss(
    net: &ValueNet,
    spec: &SystemSpec,
    batch: &SampleBatch,
    lambda: f64,
    curriculum: &CurriculumState,
) -> Result<LossEvaluation> {
    let n_terminal = batch.terminal_count();
    if n_terminal == 0 {
        return Err(Error::InvalidArgument("batch has no terminal samples".into()));
    }
    if batch.input_dim != spec.dim() + 1 || net.input_dim() != batch.input_dim {
        return Err(Error::Dimension {
            expected: net.input_dim(),
            got: batch.input_dim,
        });
    }
    let b = batch.len();
    let d = batch.input_dim;
    let with_residual = !curriculum.pretraining;
    let wt = lambda / n_terminal as f64;
    let inv = 1.0 / b as f64;
    let mut terminal_sum = 0.0;
    let mut residual_sum = 0.0;
    let mut gradients = Gradients::zeros_like(net);
    let mut flow = vec![0.0; d - 1];
    // Row blocks keep the recorded activations cache-resident.
    for start in (0..b).step_by(LOSS_CHUNK) {
        let end = (start + LOSS_CHUNK).min(b);
        let m = end - start;
        let inputs = &batch.inputs[start * d..end * d];
        let tape = BatchTape::record(net, inputs, m, with_residual);
        let values = tape.values();
        let mut ybar = vec![0.0; m];
        for i in 0..m {
            if batch.terminal[start + i] {
                let x = &inputs[i * d + 1..(i + 1) * d];
                let diff = values[i] - spec.boundary_unchecked(x);
                terminal_sum += diff.abs();
                ybar[i] += wt * sign(diff);
            }
        }
        let qbar = if with_residual {
            let grads = tape.raw_gradients();
            let mut qbar = vec![0.0; m * d];
            for i in 0..m {
                let x = &inputs[i * d + 1..(i + 1) * d];
                let g = &grads[i * d..(i + 1) * d];
                let h = spec.hamiltonian_with_flow(x, &g[1..], &mut flow);
                let pde = h - g[0];
                let gap = spec.boundary_unchecked(x) - values[i];
                let r = pde.min(gap);
                residual_sum += r.abs();
                let s = sign(r) * inv;
                if pde <= gap {
                    let q = &mut qbar[i * d..(i + 1) * d];
                    q[0] = -s;
                    for (qj, fj) in q[1..].iter_mut().zip(&flow) {
                        *qj = s * fj;
                    }
                } else {
                    ybar[i] -= s;
                }
            }
            Some(qbar)
        } else {
            None
        };
        let part = tape.parameter_gradients(net, &ybar, qbar.as_deref());
        for (acc, g) in gradients.tensors.iter_mut().zip(&part.tensors) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    let terminal_term = terminal_sum / n_terminal as f64;
    let residual_term = residual_sum * inv;

    let total = residual_term + lambda * terminal_term;
    Ok(LossEvaluation {
        breakdown: LossBreakdown {
            iteration: curriculum.iteration,
            gamma: curriculum.gamma,
            total,
            residual_term,
            terminal_term,
        },
        gradients,
    })
}
