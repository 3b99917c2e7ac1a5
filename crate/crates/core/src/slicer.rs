//! Two-dimensional slices of value models, slice comparison metrics, CSV
//! export and the pairwise-union model for three vehicles.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::dynamics::SystemSpec;
use crate::error::{Error, Result};
use crate::verifier::ValueModel;

pub const DEFAULT_RESOLUTION: usize = 201;
/// Points per parallel work unit.
const SLICE_CHUNK: usize = 2048;

/// Name of dimension `d` (0-based): `x1`, `x2`, ... with `theta` aliases
/// accepted by [`dimension_index`].
pub fn dimension_name(d: usize) -> String {
    format!("x{}", d + 1)
}

/// Parse `x<k>` (1-based), `theta` (single vehicle) or `theta<k>`
/// (heading of vehicle k, 1-based).
pub fn dimension_index(spec: &SystemSpec, name: &str) -> Result<usize> {
    let n = spec.dim();
    let bad = || Error::InvalidArgument(format!("unknown dimension '{name}' for {} (use x1..x{n})", spec.name()));
    let idx = if let Some(k) = name.strip_prefix("theta") {
        if k.is_empty() {
            if n != 3 {
                return Err(bad());
            }
            2
        } else {
            let v: usize = k.parse().map_err(|_| bad())?;
            if v == 0 {
                return Err(bad());
            }
            3 * (v - 1) + 2
        }
    } else if let Some(k) = name.strip_prefix('x') {
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        k - 1
    } else {
        return Err(bad());
    };
    if idx >= n {
        return Err(bad());
    }
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSpec {
    /// The two swept dimensions.
    pub free: [usize; 2],
    pub resolution: [usize; 2],
    /// Full state; entries at the free dimensions are ignored.
    pub base: Vec<f64>,
    pub tau: f64,
}

impl SliceSpec {
    /// Sweep `free` over the box with every other dimension at the box
    /// midpoint.
    pub fn new(spec: &SystemSpec, free: [usize; 2], tau: f64) -> Self {
        Self {
            free,
            resolution: [DEFAULT_RESOLUTION; 2],
            base: spec.state_box.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
            tau,
        }
    }

    /// Position plane at `tau` with the heading fixed.
    pub fn air3d_plane(tau: f64, theta: f64) -> Self {
        let spec = SystemSpec::air3d();
        let mut s = Self::new(&spec, [0, 1], tau);
        s.base[2] = theta;
        s
    }

    /// Pursuer position plane for three vehicles: pursuer heading 0, one
    /// evader at (0, 0.5) and one at (0, -0.5), both heading along +x1.
    pub fn three_vehicle_plane(tau: f64) -> Self {
        let spec = SystemSpec::vehicles9d();
        let mut s = Self::new(&spec, [0, 1], tau);
        s.base = vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, -0.5, 0.0];
        s
    }

    pub fn fix(&mut self, dim: usize, value: f64) -> &mut Self {
        self.base[dim] = value;
        self
    }

    pub fn validate(&self, spec: &SystemSpec) -> Result<()> {
        let n = spec.dim();
        if self.base.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: self.base.len(),
            });
        }
        let [a, b] = self.free;
        if a == b || a >= n || b >= n {
            return Err(Error::InvalidArgument(format!(
                "slice needs two distinct free dimensions below {n}, got {a} and {b}"
            )));
        }
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(Error::InvalidArgument("slice resolution must be at least 2".into()));
        }
        if !(0.0..=spec.horizon).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!(
                "tau {} outside [0, {}]",
                self.tau, spec.horizon
            )));
        }
        let mut wrapped = self.base.clone();
        spec.wrap_angles(&mut wrapped);
        for (d, (v, (lo, hi))) in wrapped.iter().zip(&spec.state_box).enumerate() {
            if d == a || d == b {
                continue;
            }
            if !(v.is_finite() && *lo <= *v && *v <= *hi) {
                return Err(Error::OutOfBox {
                    dim: d,
                    value: self.base[d],
                    lo: *lo,
                    hi: *hi,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.resolution[0] * self.resolution[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates along free axis `axis`.
    pub fn axis(&self, spec: &SystemSpec, axis: usize) -> Vec<f64> {
        let (lo, hi) = spec.state_box[self.free[axis]];
        let r = self.resolution[axis];
        (0..r)
            .map(|i| if i + 1 == r { hi } else { lo + (hi - lo) * i as f64 / (r - 1) as f64 })
            .collect()
    }

    /// Row-major states, the first free dimension varying slowest.
    pub fn states(&self, spec: &SystemSpec) -> Vec<f64> {
        let (u, v) = (self.axis(spec, 0), self.axis(spec, 1));
        let mut base = self.base.clone();
        spec.wrap_angles(&mut base);
        let mut out = Vec::with_capacity(self.len() * base.len());
        for a in &u {
            for b in &v {
                let start = out.len();
                out.extend_from_slice(&base);
                out[start + self.free[0]] = *a;
                out[start + self.free[1]] = *b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceGrid {
    pub system: String,
    pub slice: SliceSpec,
    pub axis0: Vec<f64>,
    pub axis1: Vec<f64>,
    /// `values[i * axis1.len() + j]` sits at `(axis0[i], axis1[j])`.
    pub values: Vec<f64>,
}

pub fn slice_values(model: &dyn ValueModel, spec: &SystemSpec, slice: &SliceSpec) -> Result<SliceGrid> {
    if model.state_dim() != spec.dim() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            got: model.state_dim(),
        });
    }
    slice.validate(spec)?;
    let n = spec.dim();
    let states = slice.states(spec);
    let chunks: Vec<Result<Vec<f64>>> = states
        .par_chunks(SLICE_CHUNK * n)
        .map(|xs| model.value_batch(xs, &vec![slice.tau; xs.len() / n]))
        .collect();
    let mut values = Vec::with_capacity(slice.len());
    for c in chunks {
        values.extend(c?);
    }
    Ok(SliceGrid {
        system: spec.name().to_string(),
        slice: slice.clone(),
        axis0: slice.axis(spec, 0),
        axis1: slice.axis(spec, 1),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceComparison {
    pub mse: f64,
    /// `|A ∩ B| / |A ∪ B|` of the sub-zero sets; 1 when both are empty.
    pub sub_zero_iou: f64,
    /// Share of slice points only `a` places at or below zero.
    pub a_only_fraction: f64,
    pub b_only_fraction: f64,
}

fn check_same_shape(a: &SliceGrid, b: &SliceGrid) -> Result<()> {
    if a.slice != b.slice || a.values.len() != b.values.len() || a.system != b.system {
        return Err(Error::InvalidArgument("slices differ in shape or specification".into()));
    }
    Ok(())
}

pub fn compare_slices(a: &SliceGrid, b: &SliceGrid) -> Result<SliceComparison> {
    check_same_shape(a, b)?;
    let total = a.values.len() as f64;
    let (mut sq, mut both, mut a_only, mut b_only) = (0.0, 0usize, 0usize, 0usize);
    for (va, vb) in a.values.iter().zip(&b.values) {
        sq += (va - vb) * (va - vb);
        match (*va <= 0.0, *vb <= 0.0) {
            (true, true) => both += 1,
            (true, false) => a_only += 1,
            (false, true) => b_only += 1,
            (false, false) => {}
        }
    }
    let union = both + a_only + b_only;
    Ok(SliceComparison {
        mse: sq / total,
        sub_zero_iou: if union == 0 { 1.0 } else { both as f64 / union as f64 },
        a_only_fraction: a_only as f64 / total,
        b_only_fraction: b_only as f64 / total,
    })
}

/// Share of `reference`'s sub-zero points that `candidate` also places at
/// or below zero; 1 when the reference set is empty.
pub fn sub_zero_coverage(candidate: &SliceGrid, reference: &SliceGrid) -> Result<f64> {
    check_same_shape(candidate, reference)?;
    let (mut inside, mut covered) = (0usize, 0usize);
    for (c, r) in candidate.values.iter().zip(&reference.values) {
        if *r <= 0.0 {
            inside += 1;
            if *c <= 0.0 {
                covered += 1;
            }
        }
    }
    Ok(if inside == 0 { 1.0 } else { covered as f64 / inside as f64 })
}

impl SliceGrid {
    pub fn sub_zero_fraction(&self) -> f64 {
        self.values.iter().filter(|v| **v <= 0.0).count() as f64 / self.values.len() as f64
    }

    /// CSV with `#` header lines describing the slice, then one
    /// `<free0>,<free1>,value` row per point in row-major order.
    pub fn to_csv(&self) -> String {
        let [a, b] = self.slice.free;
        let mut s = String::new();
        let _ = writeln!(s, "# system {}", self.system);
        let _ = writeln!(s, "# tau {}", self.slice.tau);
        for (name, axis) in [(a, &self.axis0), (b, &self.axis1)] {
            let _ = writeln!(
                s,
                "# free {} {} {} {}",
                dimension_name(name),
                axis[0],
                axis[axis.len() - 1],
                axis.len()
            );
        }
        for (d, v) in self.slice.base.iter().enumerate() {
            if d != a && d != b {
                let _ = writeln!(s, "# fixed {} {}", dimension_name(d), v);
            }
        }
        let _ = writeln!(s, "{},{},value", dimension_name(a), dimension_name(b));
        let n1 = self.axis1.len();
        for (k, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.axis0[k / n1], self.axis1[k % n1], v);
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Vehicle index pairs of the three-vehicle system, pursuer first.
pub const VEHICLE_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Three-vehicle value approximated by the pointwise minimum of a
/// two-vehicle model over every vehicle pair.
#[derive(Debug, Clone)]
pub struct PairwiseUnion<M> {
    pub pair_model: M,
}

impl<M: ValueModel> PairwiseUnion<M> {
    pub fn new(pair_model: M) -> Result<Self> {
        if pair_model.state_dim() != 6 {
            return Err(Error::Dimension {
                expected: 6,
                got: pair_model.state_dim(),
            });
        }
        Ok(Self { pair_model })
    }

    fn pair_states(xs: &[f64], (a, b): (usize, usize)) -> Vec<f64> {
        let mut out = Vec::with_capacity(xs.len() / 9 * 6);
        for x in xs.chunks_exact(9) {
            out.extend_from_slice(&x[3 * a..3 * a + 3]);
            out.extend_from_slice(&x[3 * b..3 * b + 3]);
        }
        out
    }

    fn check(xs: &[f64], taus: &[f64]) -> Result<()> {
        if xs.len() != taus.len() * 9 {
            return Err(Error::Dimension {
                expected: taus.len() * 9,
                got: xs.len(),
            });
        }
        Ok(())
    }
}

impl<M: ValueModel> ValueModel for PairwiseUnion<M> {
    fn state_dim(&self) -> usize {
        9
    }

    fn value(&self, x: &[f64], tau: f64) -> Result<f64> {
        Ok(self.value_batch(x, &[tau])?[0])
    }

    fn value_and_gradient(&self, x: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.value_and_gradient_batch(x, &[tau])?;
        Ok((v[0], g))
    }

    fn value_batch(&self, xs: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
        Self::check(xs, taus)?;
        let mut best = vec![f64::INFINITY; taus.len()];
        for pair in VEHICLE_PAIRS {
            let v = self.pair_model.value_batch(&Self::pair_states(xs, pair), taus)?;
            for (b, v) in best.iter_mut().zip(v) {
                *b = b.min(v);
            }
        }
        Ok(best)
    }

    /// Gradient of the minimizing pair, scattered into nine dimensions.
    fn value_and_gradient_batch(&self, xs: &[f64], taus: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Self::check(xs, taus)?;
        let m = taus.len();
        let mut best = vec![f64::INFINITY; m];
        let mut grads = vec![0.0; m * 9];
        for (a, b) in VEHICLE_PAIRS {
            let (v, g) = self
                .pair_model
                .value_and_gradient_batch(&Self::pair_states(xs, (a, b)), taus)?;
            for i in 0..m {
                if v[i] < best[i] {
                    best[i] = v[i];
                    let row = &mut grads[9 * i..9 * i + 9];
                    row.fill(0.0);
                    row[3 * a..3 * a + 3].copy_from_slice(&g[6 * i..6 * i + 3]);
                    row[3 * b..3 * b + 3].copy_from_slice(&g[6 * i + 3..6 * i + 6]);
                }
            }
        }
        Ok((best, grads))
    }
}
