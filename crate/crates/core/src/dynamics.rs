//! Registered vehicle systems for collision-avoidance games.
//!
//! * `air3d`: relative dynamics of a pursuer and an evader, state
//!   `(x1, x2, theta)`; control = evader turn rate, disturbance = pursuer
//!   turn rate.
//! * `vehicles6d`: joint state of the pursuer `(x1, x2, x3)` and the evader
//!   `(x4, x5, x6)`.
//! * `vehicles9d`: the pursuer plus two evaders; both evader turn rates are
//!   controls, the pursuer turn rate is the disturbance.
//!
//! Every system is input-affine, so the Hamiltonian optimizes in closed form
//! and the optimal inputs are bang-bang.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemKind {
    Air3d,
    Vehicles6d,
    Vehicles9d,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Air3d => "air3d",
            SystemKind::Vehicles6d => "vehicles6d",
            SystemKind::Vehicles9d => "vehicles9d",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "air3d" => Ok(SystemKind::Air3d),
            "vehicles6d" => Ok(SystemKind::Vehicles6d),
            "vehicles9d" => Ok(SystemKind::Vehicles9d),
            other => Err(Error::UnknownSystem(other.to_string())),
        }
    }
}

/// Which player optimizes which way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GameConvention {
    /// Control maximizes the value (steers away from the target), the
    /// disturbance minimizes it.
    #[default]
    Avoid,
    /// Control minimizes, disturbance maximizes.
    Literal,
}

impl FromStr for GameConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avoid" => Ok(GameConvention::Avoid),
            "literal" => Ok(GameConvention::Literal),
            other => Err(Error::Config(format!(
                "game_convention must be avoid or literal, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for GameConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GameConvention::Avoid => "avoid",
            GameConvention::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputRole {
    Control,
    Disturbance,
}

/// Dynamics descriptor. Speeds in m/s, turn-rate bound in rad/s, lengths in
/// meters, horizon in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub v_e: f64,
    pub v_p: f64,
    pub omega_max: f64,
    pub collision_radius: f64,
    pub horizon: f64,
    pub state_box: Vec<(f64, f64)>,
    pub periodic_dims: Vec<usize>,
    pub convention: GameConvention,
}

/// Spatial gradient of the value function.
#[derive(Debug, Clone, PartialEq)]
pub struct Costate(pub Vec<f64>);

const VEHICLE_SPEED: f64 = 0.75;
const TURN_RATE: f64 = 3.0;
const COLLISION_RADIUS: f64 = 0.25;
const DEFAULT_HORIZON: f64 = 1.0;

impl SystemSpec {
    pub fn new(kind: SystemKind) -> Self {
        let planar = [(-1.0, 1.0), (-1.0, 1.0), (-PI, PI)];
        let vehicles = match kind {
            SystemKind::Air3d => 1,
            SystemKind::Vehicles6d => 2,
            SystemKind::Vehicles9d => 3,
        };
        let state_box: Vec<(f64, f64)> = planar.iter().copied().cycle().take(3 * vehicles).collect();
        let periodic_dims = (0..vehicles).map(|v| 3 * v + 2).collect();
        Self {
            kind,
            v_e: VEHICLE_SPEED,
            v_p: VEHICLE_SPEED,
            omega_max: TURN_RATE,
            collision_radius: COLLISION_RADIUS,
            horizon: DEFAULT_HORIZON,
            state_box,
            periodic_dims,
            convention: GameConvention::Avoid,
        }
    }

    pub fn air3d() -> Self {
        Self::new(SystemKind::Air3d)
    }

    pub fn vehicles6d() -> Self {
        Self::new(SystemKind::Vehicles6d)
    }

    pub fn vehicles9d() -> Self {
        Self::new(SystemKind::Vehicles9d)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.state_box.len()
    }

    pub fn input_roles(&self) -> &'static [InputRole] {
        use InputRole::*;
        match self.kind {
            // [omega_e, omega_p]
            SystemKind::Air3d | SystemKind::Vehicles6d => &[Control, Disturbance],
            // [omega_2, omega_3, omega_1]
            SystemKind::Vehicles9d => &[Control, Control, Disturbance],
        }
    }

    pub fn control_dim(&self) -> usize {
        self.input_roles()
            .iter()
            .filter(|r| **r == InputRole::Control)
            .count()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.input_roles().len() - self.control_dim()
    }

    pub fn is_periodic(&self, dim: usize) -> bool {
        self.periodic_dims.contains(&dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.state_box.len() != Self::new(self.kind).dim() {
            return bad("state box has the wrong number of dimensions");
        }
        if self.state_box.iter().any(|(lo, hi)| !(lo < hi)) {
            return bad("state box needs lower < upper in every dimension");
        }
        if !(self.omega_max > 0.0) {
            return bad("omega_max must be positive");
        }
        if !(self.collision_radius > 0.0) {
            return bad("R must be positive");
        }
        if !(self.horizon > 0.0) {
            return bad("T_f must be positive");
        }
        if !(self.v_e.is_finite() && self.v_p.is_finite()) {
            return bad("speeds must be finite");
        }
        Ok(())
    }

    /// Apply one `key=value` override (`v_e`, `v_p`, `omega_max`, `R`, `T_f`,
    /// `box`, `game_convention`). `box` takes `lo:hi` pairs separated by
    /// commas, one per state dimension.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut next = self.clone();
        next.set_unvalidated(key, value)?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    fn set_unvalidated(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || -> Result<f64> {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{key}: {value:?} is not a number")))
        };
        match key {
            "v_e" => self.v_e = num()?,
            "v_p" => self.v_p = num()?,
            "omega_max" => self.omega_max = num()?,
            "R" => self.collision_radius = num()?,
            "T_f" | "horizon" => self.horizon = num()?,
            "game_convention" => self.convention = value.trim().parse()?,
            "box" => {
                let mut bounds = Vec::new();
                for part in value.split(',') {
                    let (lo, hi) = part
                        .split_once(':')
                        .ok_or_else(|| Error::Config(format!("box entry {part:?} is not lo:hi")))?;
                    let parse = |s: &str| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("box bound {s:?} is not a number")))
                    };
                    bounds.push((parse(lo)?, parse(hi)?));
                }
                if bounds.len() != self.dim() {
                    return Err(Error::Config(format!(
                        "box needs {} intervals, got {}",
                        self.dim(),
                        bounds.len()
                    )));
                }
                self.state_box = bounds;
            }
            other => return Err(Error::Config(format!("unknown system key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical `key=value` pairs describing this system.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let b = self
            .state_box
            .iter()
            .map(|(lo, hi)| format!("{lo:?}:{hi:?}"))
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("system".into(), self.name().into()),
            ("v_e".into(), format!("{:?}", self.v_e)),
            ("v_p".into(), format!("{:?}", self.v_p)),
            ("omega_max".into(), format!("{:?}", self.omega_max)),
            ("R".into(), format!("{:?}", self.collision_radius)),
            ("T_f".into(), format!("{:?}", self.horizon)),
            ("box".into(), b),
            ("game_convention".into(), self.convention.to_string()),
        ]
    }

    /// Rebuild a system from pairs written by [`SystemSpec::to_pairs`];
    /// unrelated keys are ignored.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let name = pairs
            .iter()
            .find(|(k, _)| *k == "system")
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config("missing system key".into()))?;
        let mut spec = Self::by_name(name)?;
        for (k, v) in pairs {
            if matches!(k, "v_e" | "v_p" | "omega_max" | "R" | "T_f" | "box" | "game_convention") {
                spec.set(k, v)?;
            }
        }
        Ok(spec)
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }

    /// Signed distance to the collision set; negative inside.
    pub fn boundary_value(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(self.boundary_unchecked(x))
    }

    pub(crate) fn boundary_unchecked(&self, x: &[f64]) -> f64 {
        let r = self.collision_radius;
        match self.kind {
            SystemKind::Air3d => x[0].hypot(x[1]) - r,
            SystemKind::Vehicles6d => pair_distance(x, 0, 1) - r,
            SystemKind::Vehicles9d => {
                let d = pair_distance(x, 0, 1)
                    .min(pair_distance(x, 0, 2))
                    .min(pair_distance(x, 1, 2));
                d - r
            }
        }
    }

    fn check_inputs(&self, u: &[f64], d: &[f64]) -> Result<()> {
        if u.len() != self.control_dim() {
            return Err(Error::Dimension {
                expected: self.control_dim(),
                got: u.len(),
            });
        }
        if d.len() != self.disturbance_dim() {
            return Err(Error::Dimension {
                expected: self.disturbance_dim(),
                got: d.len(),
            });
        }
        let tol = 1e-12 * self.omega_max;
        for (index, &value) in u.iter().chain(d).enumerate() {
            if !(value.abs() <= self.omega_max + tol) {
                return Err(Error::InputOutOfBounds {
                    index,
                    value,
                    bound: self.omega_max,
                });
            }
        }
        Ok(())
    }

    /// State derivative under control `u` and disturbance `d`.
    pub fn flow(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        self.check_inputs(u, d)?;
        let mut out = vec![0.0; self.dim()];
        self.flow_into(x, u, d, &mut out);
        Ok(out)
    }

    pub(crate) fn flow_into(&self, x: &[f64], u: &[f64], d: &[f64], out: &mut [f64]) {
        let (ve, vp) = (self.v_e, self.v_p);
        match self.kind {
            SystemKind::Air3d => {
                let (we, wp) = (u[0], d[0]);
                out[0] = -ve + vp * x[2].cos() + we * x[1];
                out[1] = vp * x[2].sin() - we * x[0];
                out[2] = wp - we;
            }
            SystemKind::Vehicles6d => {
                unicycle(&x[0..3], vp, d[0], &mut out[0..3]);
                unicycle(&x[3..6], ve, u[0], &mut out[3..6]);
            }
            SystemKind::Vehicles9d => {
                unicycle(&x[0..3], vp, d[0], &mut out[0..3]);
                unicycle(&x[3..6], ve, u[0], &mut out[3..6]);
                unicycle(&x[6..9], ve, u[1], &mut out[6..9]);
            }
        }
    }

    /// `<p, f(x, 0, 0)>` and the coefficient of each input in `<p, f>`,
    /// ordered as [`SystemSpec::input_roles`].
    fn affine_terms(&self, x: &[f64], p: &[f64], coeffs: &mut [f64; 3]) -> f64 {
        let (ve, vp) = (self.v_e, self.v_p);
        match self.kind {
            SystemKind::Air3d => {
                coeffs[0] = p[0] * x[1] - p[1] * x[0] - p[2];
                coeffs[1] = p[2];
                p[0] * (-ve + vp * x[2].cos()) + p[1] * vp * x[2].sin()
            }
            SystemKind::Vehicles6d => {
                coeffs[0] = p[5];
                coeffs[1] = p[2];
                planar_drift(&x[0..3], &p[0..3], vp) + planar_drift(&x[3..6], &p[3..6], ve)
            }
            SystemKind::Vehicles9d => {
                coeffs[0] = p[5];
                coeffs[1] = p[8];
                coeffs[2] = p[2];
                planar_drift(&x[0..3], &p[0..3], vp)
                    + planar_drift(&x[3..6], &p[3..6], ve)
                    + planar_drift(&x[6..9], &p[6..9], ve)
            }
        }
    }

    /// Bang-bang input for an input whose coefficient in `<p, f>` is `coeff`.
    /// A zero coefficient leaves the player indifferent; both then pick
    /// `+omega_max`.
    fn bang(&self, role: InputRole, coeff: f64) -> f64 {
        if coeff == 0.0 {
            return self.omega_max;
        }
        let s = coeff.signum();
        let maximize = match (self.convention, role) {
            (GameConvention::Avoid, InputRole::Control) => true,
            (GameConvention::Avoid, InputRole::Disturbance) => false,
            (GameConvention::Literal, InputRole::Control) => false,
            (GameConvention::Literal, InputRole::Disturbance) => true,
        };
        if maximize {
            self.omega_max * s
        } else {
            -self.omega_max * s
        }
    }

    /// Optimized Hamiltonian. Under the avoid convention this is
    /// `max_u min_d <p, f(x, u, d)>`.
    pub fn hamiltonian(&self, x: &[f64], p: &Costate) -> Result<f64> {
        self.check_dim(x.len())?;
        self.check_dim(p.0.len())?;
        Ok(self.hamiltonian_unchecked(x, &p.0))
    }

    pub(crate) fn hamiltonian_unchecked(&self, x: &[f64], p: &[f64]) -> f64 {
        let mut coeffs = [0.0; 3];
        let mut h = self.affine_terms(x, p, &mut coeffs);
        for (role, c) in self.input_roles().iter().zip(coeffs) {
            h += self.bang(*role, c) * c;
        }
        h
    }

    /// Hamiltonian together with `dH/dp = f(x, u*, d*)` written to `dh_dp`.
    pub(crate) fn hamiltonian_with_flow(&self, x: &[f64], p: &[f64], dh_dp: &mut [f64]) -> f64 {
        let mut coeffs = [0.0; 3];
        let base = self.affine_terms(x, p, &mut coeffs);
        let mut inputs = [0.0; 3];
        let mut h = base;
        for (i, (role, c)) in self.input_roles().iter().zip(coeffs).enumerate() {
            inputs[i] = self.bang(*role, c);
            h += inputs[i] * c;
        }
        let (u, d) = self.split_inputs(&inputs);
        self.flow_into(x, u, d, dh_dp);
        h
    }

    fn split_inputs<'a>(&self, inputs: &'a [f64; 3]) -> (&'a [f64], &'a [f64]) {
        let m = self.control_dim();
        let total = self.input_roles().len();
        (&inputs[..m], &inputs[m..total])
    }

    /// Bang-bang control maximizing (avoid) the Hamiltonian; `sign(0) = +1`.
    pub fn optimal_control(&self, x: &[f64], p: &Costate) -> Result<Vec<f64>> {
        Ok(self.optimal_inputs(x, p)?.0)
    }

    /// Bang-bang disturbance minimizing (avoid) the Hamiltonian.
    pub fn optimal_disturbance(&self, x: &[f64], p: &Costate) -> Result<Vec<f64>> {
        Ok(self.optimal_inputs(x, p)?.1)
    }

    /// `(u*, d*)` in one pass.
    pub fn optimal_inputs(&self, x: &[f64], p: &Costate) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(x.len())?;
        self.check_dim(p.0.len())?;
        let mut inputs = [0.0; 3];
        self.optimal_inputs_into(x, &p.0, &mut inputs);
        let (u, d) = self.split_inputs(&inputs);
        Ok((u.to_vec(), d.to_vec()))
    }

    pub(crate) fn optimal_inputs_into(&self, x: &[f64], p: &[f64], inputs: &mut [f64; 3]) {
        let mut coeffs = [0.0; 3];
        self.affine_terms(x, p, &mut coeffs);
        for (i, (role, c)) in self.input_roles().iter().zip(coeffs).enumerate() {
            inputs[i] = self.bang(*role, c);
        }
    }

    /// One explicit Euler step under the optimal inputs for costate `p`.
    pub(crate) fn policy_step(&self, x: &mut [f64], p: &[f64], dt: f64, scratch: &mut [f64]) {
        let mut inputs = [0.0; 3];
        self.optimal_inputs_into(x, p, &mut inputs);
        let (u, d) = self.split_inputs(&inputs);
        self.flow_into(x, u, d, scratch);
        for (xi, fi) in x.iter_mut().zip(scratch.iter()) {
            *xi += dt * fi;
        }
    }

    /// Wrap periodic coordinates lying outside their interval back into it.
    pub fn wrap_angles(&self, x: &mut [f64]) {
        for &i in &self.periodic_dims {
            let (lo, hi) = self.state_box[i];
            if x[i] < lo || x[i] > hi {
                let period = hi - lo;
                x[i] = lo + (x[i] - lo).rem_euclid(period);
            }
        }
    }

    /// Clamp non-periodic coordinates into the box; returns whether any moved.
    pub fn clamp_to_box(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for (i, (xi, (lo, hi))) in x.iter_mut().zip(&self.state_box).enumerate() {
            if self.is_periodic(i) {
                continue;
            }
            let c = xi.clamp(*lo, *hi);
            if c != *xi {
                *xi = c;
                moved = true;
            }
        }
        moved
    }

    /// Map an in-box state to `[-1, 1]^n` (periodic coordinates wrapped first).
    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let mut w = x.to_vec();
        self.wrap_angles(&mut w);
        w.iter()
            .zip(&self.state_box)
            .enumerate()
            .map(|(dim, (v, (lo, hi)))| {
                if !v.is_finite() {
                    return Err(Error::NonFinite("state"));
                }
                if *v < *lo || *v > *hi {
                    return Err(Error::OutOfBox {
                        dim,
                        value: *v,
                        lo: *lo,
                        hi: *hi,
                    });
                }
                Ok((2.0 * v - (lo + hi)) / (hi - lo))
            })
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(y.len())?;
        Ok(y
            .iter()
            .zip(&self.state_box)
            .map(|(v, (lo, hi))| 0.5 * (lo + hi) + 0.5 * v * (hi - lo))
            .collect())
    }

    /// Network input bounds for `(tau, x)`.
    pub fn input_bounds(&self) -> Vec<(f64, f64)> {
        std::iter::once((0.0, self.horizon))
            .chain(self.state_box.iter().copied())
            .collect()
    }

    /// Lebesgue measure of the state box.
    pub fn box_volume(&self) -> f64 {
        self.state_box.iter().map(|(lo, hi)| hi - lo).product()
    }
}

fn pair_distance(x: &[f64], a: usize, b: usize) -> f64 {
    (x[3 * a] - x[3 * b]).hypot(x[3 * a + 1] - x[3 * b + 1])
}

fn unicycle(x: &[f64], speed: f64, turn: f64, out: &mut [f64]) {
    out[0] = speed * x[2].cos();
    out[1] = speed * x[2].sin();
    out[2] = turn;
}

fn planar_drift(x: &[f64], p: &[f64], speed: f64) -> f64 {
    speed * (p[0] * x[2].cos() + p[1] * x[2].sin())
}
