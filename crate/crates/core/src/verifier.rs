//! Scenario-based evaluation of value models: closed-loop rollouts under the
//! induced bang-bang policy, violation rate and delta-level.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::actnet::{Checkpoint, ValueNet};
use crate::dynamics::SystemSpec;
use crate::error::{Error, Result};
use crate::gridoracle::ValueGrid;
use crate::trainer::TrainConfig;

pub const DEFAULT_DT: f64 = 0.01;
pub const DESK_SAMPLES: usize = 10_000;
pub const FULL_SAMPLES: usize = 100_000;
pub const REPORT_CSV_HEADER: &str = "structure,seed,n,violation_rate,cond1,cond2,delta,runtime_s";

/// Samples per lockstep rollout block.
const ROLLOUT_BLOCK: usize = 512;

/// Uniform query contract for value functions over `(x, tau)`.
pub trait ValueModel: Sync {
    fn state_dim(&self) -> usize;

    fn value(&self, x: &[f64], tau: f64) -> Result<f64>;

    /// Value and spatial gradient.
    fn value_and_gradient(&self, x: &[f64], tau: f64) -> Result<(f64, Vec<f64>)>;

    /// Row-major states with one `tau` per row; returns values and
    /// row-major gradients.
    fn value_and_gradient_batch(&self, xs: &[f64], taus: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.state_dim();
        let mut values = Vec::with_capacity(taus.len());
        let mut grads = Vec::with_capacity(xs.len());
        for (x, tau) in xs.chunks_exact(n).zip(taus) {
            let (v, g) = self.value_and_gradient(x, *tau)?;
            values.push(v);
            grads.extend_from_slice(&g);
        }
        Ok((values, grads))
    }

    fn value_batch(&self, xs: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
        let n = self.state_dim();
        xs.chunks_exact(n)
            .zip(taus)
            .map(|(x, tau)| self.value(x, *tau))
            .collect()
    }
}

impl<T: ValueModel + ?Sized> ValueModel for &T {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }

    fn value(&self, x: &[f64], tau: f64) -> Result<f64> {
        (**self).value(x, tau)
    }

    fn value_and_gradient(&self, x: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
        (**self).value_and_gradient(x, tau)
    }

    fn value_and_gradient_batch(&self, xs: &[f64], taus: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        (**self).value_and_gradient_batch(xs, taus)
    }

    fn value_batch(&self, xs: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
        (**self).value_batch(xs, taus)
    }
}

fn net_inputs(net: &ValueNet, xs: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
    let n = net.input_dim() - 1;
    if xs.len() != taus.len() * n {
        return Err(Error::Dimension {
            expected: taus.len() * n,
            got: xs.len(),
        });
    }
    let mut raw = Vec::with_capacity(taus.len() * (n + 1));
    for (x, tau) in xs.chunks_exact(n).zip(taus) {
        raw.push(*tau);
        raw.extend_from_slice(x);
    }
    Ok(raw)
}

impl ValueModel for ValueNet {
    fn state_dim(&self) -> usize {
        self.input_dim() - 1
    }

    fn value(&self, x: &[f64], tau: f64) -> Result<f64> {
        let mut raw = Vec::with_capacity(x.len() + 1);
        raw.push(tau);
        raw.extend_from_slice(x);
        self.forward(&raw)
    }

    fn value_and_gradient(&self, x: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
        let mut raw = Vec::with_capacity(x.len() + 1);
        raw.push(tau);
        raw.extend_from_slice(x);
        let g = self.input_gradient(&raw)?;
        Ok((g.value, g.d_state().to_vec()))
    }

    fn value_and_gradient_batch(&self, xs: &[f64], taus: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let raw = net_inputs(self, xs, taus)?;
        let (values, full) = self.input_gradient_batch(&raw)?;
        let d = self.input_dim();
        let mut grads = Vec::with_capacity(taus.len() * (d - 1));
        for row in full.chunks_exact(d) {
            grads.extend_from_slice(&row[1..]);
        }
        Ok((values, grads))
    }

    fn value_batch(&self, xs: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(&net_inputs(self, xs, taus)?)
    }
}

impl ValueModel for ValueGrid {
    fn state_dim(&self) -> usize {
        3
    }

    fn value(&self, x: &[f64], tau: f64) -> Result<f64> {
        Ok(self.interpolate(x, tau)?.value)
    }

    fn value_and_gradient(&self, x: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
        let s = self.interpolate(x, tau)?;
        Ok((s.value, s.gradient.to_vec()))
    }
}

/// `V(x, tau) = c` everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantModel {
    pub dim: usize,
    pub value: f64,
}

impl ValueModel for ConstantModel {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64], _tau: f64) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.value)
    }

    fn value_and_gradient(&self, x: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
        Ok((self.value(x, tau)?, vec![0.0; self.dim]))
    }
}

/// A value model read from disk together with the system it solves.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Network { net: ValueNet, config: TrainConfig },
    Grid(ValueGrid),
}

impl LoadedModel {
    /// Read a checkpoint or a grid file, told apart by their magic bytes.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(crate::gridoracle::GRID_MAGIC) {
            return Ok(Self::Grid(ValueGrid::from_bytes(bytes)?));
        }
        let ckpt = Checkpoint::from_bytes(bytes)?;
        let config = TrainConfig::from_metadata(&ckpt.metadata)?;
        if ckpt.net.input_dim() != config.system.dim() + 1 {
            return Err(Error::Corrupt(format!(
                "network input width {} does not match {}",
                ckpt.net.input_dim(),
                config.system.name()
            )));
        }
        Ok(Self::Network { net: ckpt.net, config })
    }

    pub fn system(&self) -> &SystemSpec {
        match self {
            Self::Network { config, .. } => &config.system,
            Self::Grid(g) => &g.system,
        }
    }

    pub fn model(&self) -> &dyn ValueModel {
        match self {
            Self::Network { net, .. } => net,
            Self::Grid(g) => g,
        }
    }

    /// Activation schedule for networks, `grid` for oracle grids.
    pub fn structure(&self) -> String {
        match self {
            Self::Network { net, .. } => net.schedule().render(),
            Self::Grid(_) => "grid".to_string(),
        }
    }

    /// Seed the network was trained with; 0 for grids.
    pub fn training_seed(&self) -> u64 {
        match self {
            Self::Network { config, .. } => config.seed,
            Self::Grid(_) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub initial_state: Vec<f64>,
    /// Model value at the initial state with the full horizon to go.
    pub initial_value: f64,
    /// Minimum of `l` along the trajectory.
    pub cost: f64,
    pub hit_target: bool,
    pub steps: usize,
    /// Some step left the box and was clamped back.
    pub clamped: bool,
}

fn check_rollout_args(model: &dyn ValueModel, spec: &SystemSpec, dt: f64) -> Result<()> {
    if model.state_dim() != spec.dim() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            got: model.state_dim(),
        });
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument("rollout step must be positive".into()));
    }
    Ok(())
}

/// Closed-loop trajectory from `x0` for the full horizon, explicit Euler
/// with step `dt`; stops early once the target is reached.
pub fn rollout(model: &dyn ValueModel, spec: &SystemSpec, x0: &[f64], dt: f64) -> Result<RolloutResult> {
    check_rollout_args(model, spec, dt)?;
    spec.normalize(x0)?;
    Ok(rollout_block(model, spec, x0, dt)?.pop().expect("one rollout"))
}

/// Lockstep rollouts of a block of row-major initial states.
fn rollout_block(model: &dyn ValueModel, spec: &SystemSpec, x0s: &[f64], dt: f64) -> Result<Vec<RolloutResult>> {
    let n = spec.dim();
    let count = x0s.len() / n;
    let horizon = spec.horizon;
    let mut states = x0s.to_vec();
    for x in states.chunks_exact_mut(n) {
        spec.wrap_angles(x);
    }
    let initial_values = model.value_batch(&states, &vec![horizon; count])?;
    let mut results: Vec<RolloutResult> = states
        .chunks_exact(n)
        .zip(&initial_values)
        .map(|(x, v)| {
            let l = spec.boundary_unchecked(x);
            RolloutResult {
                initial_state: x.to_vec(),
                initial_value: *v,
                cost: l,
                hit_target: l <= 0.0,
                steps: 0,
                clamped: false,
            }
        })
        .collect();
    let total_steps = ((horizon / dt) - 1e-9).ceil().max(0.0) as usize;
    let mut active: Vec<usize> = (0..count).filter(|&i| !results[i].hit_target).collect();
    let mut xs = Vec::with_capacity(active.len() * n);
    let mut taus = Vec::with_capacity(active.len());
    let mut flow = vec![0.0; n];
    for step in 0..total_steps {
        if active.is_empty() {
            break;
        }
        let elapsed = step as f64 * dt;
        let h = dt.min(horizon - elapsed);
        let tau = (horizon - elapsed).max(0.0);
        xs.clear();
        taus.clear();
        for &i in &active {
            xs.extend_from_slice(&states[i * n..(i + 1) * n]);
            taus.push(tau);
        }
        let (_, grads) = model.value_and_gradient_batch(&xs, &taus)?;
        for (slot, &i) in active.iter().enumerate() {
            let x = &mut states[i * n..(i + 1) * n];
            let p = &grads[slot * n..(slot + 1) * n];
            spec.policy_step(x, p, h, &mut flow);
            spec.wrap_angles(x);
            let r = &mut results[i];
            if spec.clamp_to_box(x) {
                r.clamped = true;
            }
            r.steps += 1;
            let l = spec.boundary_unchecked(x);
            if l < r.cost {
                r.cost = l;
            }
            if r.cost <= 0.0 {
                r.hit_target = true;
            }
        }
        active.retain(|&i| !results[i].hit_target);
    }
    Ok(results)
}

/// Rollouts of many initial states; blocks run in parallel and results come
/// back in input order.
pub fn rollout_many(model: &dyn ValueModel, spec: &SystemSpec, x0s: &[f64], dt: f64) -> Result<Vec<RolloutResult>> {
    check_rollout_args(model, spec, dt)?;
    let n = spec.dim();
    if x0s.len() % n != 0 {
        return Err(Error::Dimension {
            expected: n,
            got: x0s.len() % n,
        });
    }
    let blocks: Vec<Result<Vec<RolloutResult>>> = x0s
        .par_chunks(ROLLOUT_BLOCK * n)
        .map(|block| rollout_block(model, spec, block, dt))
        .collect();
    let mut out = Vec::with_capacity(x0s.len() / n);
    for b in blocks {
        out.extend(b?);
    }
    Ok(out)
}

/// Uniform states over the box, row-major.
pub fn sample_states(spec: &SystemSpec, n_samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_samples * spec.dim());
    for _ in 0..n_samples {
        for (lo, hi) in &spec.state_box {
            out.push(lo + rng.gen::<f64>() * (hi - lo));
        }
    }
    out
}

/// Which violation a rollout is, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    /// Declared safe (value > 0) but reached the target.
    UnsafeOutside,
    /// Declared in the tube (value <= 0) but never reached the target.
    SafeInside,
}

pub fn classify(initial_value: f64, hit_target: bool) -> Option<Violation> {
    match (initial_value > 0.0, hit_target) {
        (true, true) => Some(Violation::UnsafeOutside),
        (false, false) => Some(Violation::SafeInside),
        _ => None,
    }
}

/// Largest initial value among rollouts that reached the target;
/// `-inf` when none did.
pub fn delta_level(results: &[RolloutResult]) -> f64 {
    results
        .iter()
        .filter(|r| r.cost <= 0.0)
        .map(|r| r.initial_value)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub structure: String,
    pub seed: u64,
    pub n_samples: usize,
    pub violation_rate: f64,
    pub condition1_count: usize,
    pub condition2_count: usize,
    pub delta_level: f64,
    /// Wall-clock seconds; the only field that varies between reruns.
    pub runtime_s: f64,
}

impl VerificationReport {
    pub fn from_rollouts(structure: &str, seed: u64, results: &[RolloutResult], runtime_s: f64) -> Self {
        let mut c1 = 0;
        let mut c2 = 0;
        for r in results {
            match classify(r.initial_value, r.hit_target) {
                Some(Violation::UnsafeOutside) => c1 += 1,
                Some(Violation::SafeInside) => c2 += 1,
                None => {}
            }
        }
        let n = results.len();
        Self {
            structure: structure.to_string(),
            seed,
            n_samples: n,
            violation_rate: if n == 0 { 0.0 } else { (c1 + c2) as f64 / n as f64 },
            condition1_count: c1,
            condition2_count: c2,
            delta_level: delta_level(results),
            runtime_s,
        }
    }

    /// Everything except the runtime.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.structure == other.structure
            && self.seed == other.seed
            && self.n_samples == other.n_samples
            && self.violation_rate.to_bits() == other.violation_rate.to_bits()
            && self.condition1_count == other.condition1_count
            && self.condition2_count == other.condition2_count
            && self.delta_level.to_bits() == other.delta_level.to_bits()
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.structure,
            self.seed,
            self.n_samples,
            self.violation_rate,
            self.condition1_count,
            self.condition2_count,
            self.delta_level,
            self.runtime_s
        )
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model           {}", self.structure);
        let _ = writeln!(s, "samples         {} (seed {})", self.n_samples, self.seed);
        let _ = writeln!(
            s,
            "violation rate  {:.4} ({} outside-but-hit, {} inside-but-missed)",
            self.violation_rate, self.condition1_count, self.condition2_count
        );
        let _ = writeln!(s, "delta level     {}", self.delta_level);
        let _ = write!(s, "runtime         {:.2} s", self.runtime_s);
        s
    }
}

/// Roll out `n_samples` uniform states and score the model's tube.
pub fn violation_rate(
    model: &dyn ValueModel,
    spec: &SystemSpec,
    structure: &str,
    n_samples: usize,
    seed: u64,
    dt: f64,
) -> Result<(VerificationReport, Vec<RolloutResult>)> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let start = Instant::now();
    let states = sample_states(spec, n_samples, seed);
    let results = rollout_many(model, spec, &states, dt)?;
    let report = VerificationReport::from_rollouts(structure, seed, &results, start.elapsed().as_secs_f64());
    Ok((report, results))
}
