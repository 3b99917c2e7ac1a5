//! Dense-grid level-set solver for the Air3D tube, with multilinear
//! interpolation and a binary file format.
//!
//! Scheme: Lax-Friedrichs numerical Hamiltonian with dissipation
//! `alpha_i >= max |dH/dp_i|`, explicit Euler in `tau`, then
//! `V <- min(V, l, V_prev)` after every step. `theta` is periodic with `N`
//! nodes at `lo + k (hi - lo) / N`; positions use `N` nodes spanning the
//! closed interval and a one-sided stencil at the edges.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{put_f64, put_f64s, put_u32, put_u64, Reader};
use crate::dynamics::{SystemKind, SystemSpec};
use crate::error::{Error, Result};

/// Largest allowed `dtau * sum_i alpha_i / dx_i`.
pub const CFL_LIMIT: f64 = 0.8;
pub const DEFAULT_NODES: usize = 61;
/// Spacing of stored slices in `tau`.
pub const DEFAULT_OUTPUT_SPACING: f64 = 0.01;

pub const GRID_MAGIC: &[u8; 4] = b"RNGD";
pub const GRID_VERSION: u32 = 1;

/// Node layout of a 3-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Axes {
    pub nodes: [usize; 3],
    pub bounds: [(f64, f64); 3],
    pub periodic: [bool; 3],
}

impl Axes {
    pub fn spacing(&self, d: usize) -> f64 {
        let (lo, hi) = self.bounds[d];
        if self.periodic[d] {
            (hi - lo) / self.nodes[d] as f64
        } else {
            (hi - lo) / (self.nodes[d] - 1) as f64
        }
    }

    pub fn coordinate(&self, d: usize, i: usize) -> f64 {
        self.bounds[d].0 + i as f64 * self.spacing(d)
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.nodes[1] + j) * self.nodes[2] + k
    }

    fn validate(&self) -> Result<()> {
        for d in 0..3 {
            if self.nodes[d] < 3 {
                return Err(Error::InvalidArgument(format!(
                    "grid needs at least 3 nodes per dimension, got {}",
                    self.nodes[d]
                )));
            }
            let (lo, hi) = self.bounds[d];
            if !(lo < hi) {
                return Err(Error::InvalidArgument("grid bounds need lo < hi".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub axes: Axes,
    /// Largest internal time step.
    pub dt: f64,
    pub horizon: f64,
    /// Stored slice times, ascending from 0 to the horizon.
    pub output_times: Vec<f64>,
}

/// `max |f_i(x, u, d)|` over the inputs at one state. Since `dH/dp` is the
/// flow under the optimal inputs, this bounds it for every costate.
pub fn local_dissipation(spec: &SystemSpec, x: &[f64; 3]) -> [f64; 3] {
    [
        (spec.v_p * x[2].cos() - spec.v_e).abs() + spec.omega_max * x[1].abs(),
        (spec.v_p * x[2].sin()).abs() + spec.omega_max * x[0].abs(),
        2.0 * spec.omega_max,
    ]
}

/// Upper bounds on `|dH/dp_i|` over the box; sets the stable time step.
pub fn dissipation(spec: &SystemSpec) -> [f64; 3] {
    let max_abs = |d: usize| spec.state_box[d].0.abs().max(spec.state_box[d].1.abs());
    [
        spec.v_e.abs() + spec.v_p.abs() + spec.omega_max * max_abs(1),
        spec.v_p.abs() + spec.omega_max * max_abs(0),
        2.0 * spec.omega_max,
    ]
}

impl GridSpec {
    /// `nodes` per dimension, step from the CFL bound with factor 0.8, slices
    /// every [`DEFAULT_OUTPUT_SPACING`].
    pub fn new(spec: &SystemSpec, nodes: [usize; 3]) -> Result<Self> {
        require_air3d(spec)?;
        let axes = axes_for(spec, nodes);
        axes.validate()?;
        let alpha = dissipation(spec);
        let rate: f64 = (0..3).map(|d| alpha[d] / axes.spacing(d)).sum();
        let dt = CFL_LIMIT / rate;
        Self {
            axes,
            dt,
            horizon: spec.horizon,
            output_times: Vec::new(),
        }
        .with_output_spacing(DEFAULT_OUTPUT_SPACING)
    }

    /// Evenly spaced slices from 0 to the horizon, `spacing` rounded so it
    /// divides the horizon.
    pub fn with_output_spacing(self, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidArgument("output spacing must be positive".into()));
        }
        let count = (self.horizon / spacing).round().max(1.0) as usize;
        let times = (0..=count).map(|i| self.horizon * i as f64 / count as f64).collect();
        self.with_output_times(times)
    }

    pub fn cubic(spec: &SystemSpec, n: usize) -> Result<Self> {
        Self::new(spec, [n, n, n])
    }

    /// Replace the time step; rejected if it breaks the CFL bound.
    pub fn with_dt(mut self, spec: &SystemSpec, dt: f64) -> Result<Self> {
        let alpha = dissipation(spec);
        let number: f64 = (0..3).map(|d| dt * alpha[d] / self.axes.spacing(d)).sum();
        if !(dt > 0.0) || number > CFL_LIMIT * (1.0 + 1e-12) {
            return Err(Error::Cfl(number));
        }
        self.dt = dt;
        Ok(self)
    }

    /// Replace the stored slice times (must start at 0 and end at the horizon).
    pub fn with_output_times(mut self, times: Vec<f64>) -> Result<Self> {
        let ok = times.len() >= 2
            && times[0] == 0.0
            && (times[times.len() - 1] - self.horizon).abs() < 1e-12
            && times.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidArgument(
                "output times must increase from 0 to the horizon".into(),
            ));
        }
        let last = times.len() - 1;
        self.output_times = times;
        self.output_times[last] = self.horizon;
        Ok(self)
    }
}

fn require_air3d(spec: &SystemSpec) -> Result<()> {
    if spec.kind != SystemKind::Air3d {
        return Err(Error::InvalidArgument(format!(
            "the grid solver handles air3d only, got {}",
            spec.name()
        )));
    }
    spec.validate()
}

fn axes_for(spec: &SystemSpec, nodes: [usize; 3]) -> Axes {
    Axes {
        nodes,
        bounds: [spec.state_box[0], spec.state_box[1], spec.state_box[2]],
        periodic: [spec.is_periodic(0), spec.is_periodic(1), spec.is_periodic(2)],
    }
}

/// Value function slices on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub axes: Axes,
    pub times: Vec<f64>,
    pub slices: Vec<Vec<f64>>,
    /// Dynamics the grid was solved for.
    pub system: SystemSpec,
}

/// Grid value and spatial gradient at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSample {
    pub value: f64,
    pub gradient: [f64; 3],
}

pub fn solve_air3d(spec: &SystemSpec, grid: &GridSpec) -> Result<ValueGrid> {
    require_air3d(spec)?;
    let axes = grid.axes.clone();
    axes.validate()?;
    let grid = grid.clone().with_dt(spec, grid.dt)?;
    let n = axes.len();
    let terminal: Vec<f64> = (0..n)
        .map(|idx| spec.boundary_unchecked(&node_state(&axes, idx)))
        .collect();
    let mut slices = Vec::with_capacity(grid.output_times.len());
    slices.push(terminal.clone());
    let mut current = terminal.clone();
    let mut next = vec![0.0; n];
    for w in grid.output_times.windows(2) {
        let span = w[1] - w[0];
        let steps = (span / grid.dt).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        for _ in 0..steps {
            lax_friedrichs_step(spec, &axes, dt, &terminal, &current, &mut next);
            std::mem::swap(&mut current, &mut next);
        }
        slices.push(current.clone());
    }
    Ok(ValueGrid {
        axes,
        times: grid.output_times.clone(),
        slices,
        system: spec.clone(),
    })
}

fn node_state(axes: &Axes, idx: usize) -> [f64; 3] {
    let k = idx % axes.nodes[2];
    let j = (idx / axes.nodes[2]) % axes.nodes[1];
    let i = idx / (axes.nodes[1] * axes.nodes[2]);
    [axes.coordinate(0, i), axes.coordinate(1, j), axes.coordinate(2, k)]
}

/// Backward and forward differences along one axis at node `i`.
#[inline]
fn one_sided(v: &[f64], at: usize, minus: Option<usize>, plus: Option<usize>, h: f64) -> (f64, f64) {
    match (minus, plus) {
        (Some(m), Some(p)) => ((v[at] - v[m]) / h, (v[p] - v[at]) / h),
        // linear extrapolation ghost: both sides share the inward difference
        (None, Some(p)) => {
            let d = (v[p] - v[at]) / h;
            (d, d)
        }
        (Some(m), None) => {
            let d = (v[at] - v[m]) / h;
            (d, d)
        }
        (None, None) => (0.0, 0.0),
    }
}

fn neighbors(axes: &Axes, d: usize, i: usize) -> (Option<usize>, Option<usize>) {
    let n = axes.nodes[d];
    if axes.periodic[d] {
        (Some((i + n - 1) % n), Some((i + 1) % n))
    } else {
        (i.checked_sub(1), if i + 1 < n { Some(i + 1) } else { None })
    }
}

fn lax_friedrichs_step(
    spec: &SystemSpec,
    axes: &Axes,
    dt: f64,
    terminal: &[f64],
    current: &[f64],
    next: &mut [f64],
) {
    let [n0, n1, n2] = axes.nodes;
    let h = [axes.spacing(0), axes.spacing(1), axes.spacing(2)];
    next.par_chunks_mut(n1 * n2).enumerate().for_each(|(i, plane)| {
        let x1 = axes.coordinate(0, i);
        let (im, ip) = neighbors(axes, 0, i);
        let _ = n0;
        for j in 0..n1 {
            let x2 = axes.coordinate(1, j);
            let (jm, jp) = neighbors(axes, 1, j);
            for k in 0..n2 {
                let th = axes.coordinate(2, k);
                let (km, kp) = neighbors(axes, 2, k);
                let at = axes.index(i, j, k);
                let (a0, b0) = one_sided(
                    current,
                    at,
                    im.map(|m| axes.index(m, j, k)),
                    ip.map(|p| axes.index(p, j, k)),
                    h[0],
                );
                let (a1, b1) = one_sided(
                    current,
                    at,
                    jm.map(|m| axes.index(i, m, k)),
                    jp.map(|p| axes.index(i, p, k)),
                    h[1],
                );
                let (a2, b2) = one_sided(
                    current,
                    at,
                    km.map(|m| axes.index(i, j, m)),
                    kp.map(|p| axes.index(i, j, p)),
                    h[2],
                );
                let p = [0.5 * (a0 + b0), 0.5 * (a1 + b1), 0.5 * (a2 + b2)];
                let x = [x1, x2, th];
                let ham = spec.hamiltonian_unchecked(&x, &p);
                let alpha = local_dissipation(spec, &x);
                let diss = 0.5 * (alpha[0] * (b0 - a0) + alpha[1] * (b1 - a1) + alpha[2] * (b2 - a2));
                let v = current[at] + dt * (ham + diss);
                plane[j * n2 + k] = v.min(terminal[at]).min(current[at]);
            }
        }
    });
}

/// Grid coordinates within rounding of a node land on it exactly.
fn snap(u: f64) -> f64 {
    let r = u.round();
    if (u - r).abs() < 1e-9 {
        r
    } else {
        u
    }
}

impl ValueGrid {
    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("at least one slice")
    }

    /// Slice stored at exactly `tau`, if any.
    pub fn slice_at(&self, tau: f64) -> Option<&[f64]> {
        self.times
            .iter()
            .position(|t| *t == tau)
            .map(|i| self.slices[i].as_slice())
    }

    /// Index of the stored slice nearest to `tau`.
    pub fn nearest_slice(&self, tau: f64) -> usize {
        let mut best = 0;
        for (i, t) in self.times.iter().enumerate() {
            if (t - tau).abs() < (self.times[best] - tau).abs() {
                best = i;
            }
        }
        best
    }

    /// Multilinear value and gradient; linear between stored slices in `tau`.
    pub fn interpolate(&self, x: &[f64], tau: f64) -> Result<GridSample> {
        if x.len() != 3 {
            return Err(Error::Dimension {
                expected: 3,
                got: x.len(),
            });
        }
        if !tau.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid query"));
        }
        let horizon = self.horizon();
        let tol = 1e-12 * (1.0 + horizon);
        if tau < -tol || tau > horizon + tol {
            return Err(Error::InvalidArgument(format!(
                "tau {tau} outside [0, {horizon}]"
            )));
        }
        let tau = tau.clamp(0.0, horizon);
        let mut cell = [(0usize, 0usize, 0.0f64); 3];
        for d in 0..3 {
            let (lo, hi) = self.axes.bounds[d];
            let n = self.axes.nodes[d];
            let h = self.axes.spacing(d);
            if self.axes.periodic[d] {
                let period = hi - lo;
                let u = snap((x[d] - lo).rem_euclid(period) / h) % n as f64;
                let i0 = (u.floor() as usize).min(n - 1);
                cell[d] = (i0, (i0 + 1) % n, (u - i0 as f64).clamp(0.0, 1.0));
            } else {
                let slack = 1e-12 * (hi - lo);
                if x[d] < lo - slack || x[d] > hi + slack {
                    return Err(Error::OutOfBox {
                        dim: d,
                        value: x[d],
                        lo,
                        hi,
                    });
                }
                let u = snap((x[d] - lo) / h).clamp(0.0, (n - 1) as f64);
                let i0 = (u.floor() as usize).min(n - 2);
                cell[d] = (i0, i0 + 1, u - i0 as f64);
            }
        }
        let upper = self.times.partition_point(|t| *t < tau);
        let (s0, s1, w) = if upper == 0 {
            (0, 0, 0.0)
        } else if upper >= self.times.len() {
            let last = self.times.len() - 1;
            (last, last, 0.0)
        } else if self.times[upper] == tau {
            (upper, upper, 0.0)
        } else {
            let (t0, t1) = (self.times[upper - 1], self.times[upper]);
            (upper - 1, upper, (tau - t0) / (t1 - t0))
        };
        let a = self.interpolate_slice(&self.slices[s0], &cell);
        if w == 0.0 {
            return Ok(a);
        }
        let b = self.interpolate_slice(&self.slices[s1], &cell);
        let lerp = |p: f64, q: f64| (1.0 - w) * p + w * q;
        Ok(GridSample {
            value: lerp(a.value, b.value),
            gradient: [
                lerp(a.gradient[0], b.gradient[0]),
                lerp(a.gradient[1], b.gradient[1]),
                lerp(a.gradient[2], b.gradient[2]),
            ],
        })
    }

    fn node_gradient(&self, v: &[f64], i: usize, j: usize, k: usize) -> [f64; 3] {
        let idx = [i, j, k];
        let mut g = [0.0; 3];
        for d in 0..3 {
            let h = self.axes.spacing(d);
            let (m, p) = neighbors(&self.axes, d, idx[d]);
            let at = |q: usize| {
                let mut c = idx;
                c[d] = q;
                v[self.axes.index(c[0], c[1], c[2])]
            };
            g[d] = match (m, p) {
                (Some(m), Some(p)) => (at(p) - at(m)) / (2.0 * h),
                (None, Some(p)) => (at(p) - at(idx[d])) / h,
                (Some(m), None) => (at(idx[d]) - at(m)) / h,
                (None, None) => 0.0,
            };
        }
        g
    }

    fn interpolate_slice(&self, v: &[f64], cell: &[(usize, usize, f64); 3]) -> GridSample {
        let mut value = 0.0;
        let mut gradient = [0.0; 3];
        for corner in 0..8 {
            let pick = |d: usize| {
                let (i0, i1, t) = cell[d];
                if corner >> d & 1 == 1 {
                    (i1, t)
                } else {
                    (i0, 1.0 - t)
                }
            };
            let (i, wi) = pick(0);
            let (j, wj) = pick(1);
            let (k, wk) = pick(2);
            let weight = wi * wj * wk;
            if weight == 0.0 {
                continue;
            }
            value += weight * v[self.axes.index(i, j, k)];
            let g = self.node_gradient(v, i, j, k);
            for d in 0..3 {
                gradient[d] += weight * g[d];
            }
        }
        GridSample { value, gradient }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.slices.len() * self.axes.len() * 8);
        out.extend_from_slice(GRID_MAGIC);
        put_u32(&mut out, GRID_VERSION);
        put_u32(&mut out, 3);
        for d in 0..3 {
            put_u64(&mut out, self.axes.nodes[d] as u64);
            put_f64(&mut out, self.axes.bounds[d].0);
            put_f64(&mut out, self.axes.bounds[d].1);
            out.push(self.axes.periodic[d] as u8);
        }
        put_u64(&mut out, self.times.len() as u64);
        put_f64s(&mut out, &self.times);
        let meta: String = self
            .system
            .to_pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(meta.as_bytes());
        for s in &self.slices {
            put_f64s(&mut out, s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != GRID_MAGIC {
            return Err(Error::Corrupt("not a grid file".into()));
        }
        let version = r.u32()?;
        if version != GRID_VERSION {
            return Err(Error::Version {
                expected: GRID_VERSION,
                found: version,
            });
        }
        if r.u32()? != 3 {
            return Err(Error::Corrupt("grid must be 3-D".into()));
        }
        let mut nodes = [0usize; 3];
        let mut bounds = [(0.0, 0.0); 3];
        let mut periodic = [false; 3];
        for d in 0..3 {
            nodes[d] = r.u64()? as usize;
            bounds[d] = (r.f64()?, r.f64()?);
            periodic[d] = match r.take(1)?[0] {
                0 => false,
                1 => true,
                _ => return Err(Error::Corrupt("bad periodic flag".into())),
            };
        }
        let axes = Axes {
            nodes,
            bounds,
            periodic,
        };
        axes.validate()
            .map_err(|e| Error::Corrupt(format!("grid header: {e}")))?;
        let nt = r.u64()? as usize;
        if nt == 0 || nt > bytes.len() {
            return Err(Error::Corrupt("bad slice count".into()));
        }
        let times = r.f64s(nt)?;
        let meta_len = r.u64()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Corrupt("metadata is not UTF-8".into()))?;
        let pairs: Vec<(&str, &str)> = meta
            .lines()
            .filter_map(|l| l.split_once('='))
            .collect();
        let system = SystemSpec::from_pairs(pairs)
            .map_err(|e| Error::Corrupt(format!("grid metadata: {e}")))?;
        let n = axes.len();
        let mut slices = Vec::with_capacity(nt);
        for _ in 0..nt {
            slices.push(r.f64s(n)?);
        }
        if !r.is_empty() {
            return Err(Error::Corrupt("trailing bytes after grid data".into()));
        }
        Ok(Self {
            axes,
            times,
            slices,
            system,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Mean absolute difference to `other` at the nodes of `points` at
    /// time `tau`, both grids interpolated.
    pub fn mean_abs_difference(&self, other: &ValueGrid, points: &Axes, tau: f64) -> Result<f64> {
        let mut sum = 0.0;
        for idx in 0..points.len() {
            let x = node_state(points, idx);
            let a = self.interpolate(&x, tau)?.value;
            let b = other.interpolate(&x, tau)?.value;
            sum += (a - b).abs();
        }
        Ok(sum / points.len() as f64)
    }
}
