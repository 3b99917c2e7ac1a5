use std::fmt::Write as _;
use std::path::Path;

use crate::actnet::{ActivationSchedule, DEFAULT_LEARNING_RATE, DEFAULT_OMEGA0, DESK_HIDDEN_WIDTH, FULL_HIDDEN_WIDTH};
use crate::dynamics::{SystemKind, SystemSpec};
use crate::error::{Error, Result};

/// Keys accepted in config files and `--set` overrides.
pub const CONFIG_KEYS: &[&str] = &[
    "preset",
    "system",
    "schedule",
    "hidden_width",
    "seed",
    "batch_size",
    "pretrain_iters",
    "curriculum_iters",
    "learning_rate",
    "pretrain_learning_rate",
    "pretrain_final_learning_rate",
    "terminal_weight",
    "terminal_fraction",
    "omega0",
    "horizon",
    "checkpoint_interval",
    "log_interval",
    "v_e",
    "v_p",
    "omega_max",
    "R",
    "T_f",
    "box",
    "game_convention",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// System name, horizon and dynamics constants.
    pub system: SystemSpec,
    pub schedule: ActivationSchedule,
    pub hidden_width: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub pretrain_iters: usize,
    pub curriculum_iters: usize,
    /// Step size of the curriculum phase.
    pub learning_rate: f64,
    /// Pretraining step size is cosine-annealed from this value...
    pub pretrain_learning_rate: f64,
    /// ...down to this one at the last pretraining step.
    pub pretrain_final_learning_rate: f64,
    /// Weight on the terminal term.
    pub terminal_weight: f64,
    /// Share of each curriculum batch pinned to `tau = 0`.
    pub terminal_fraction: f64,
    pub omega0: f64,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
}

impl TrainConfig {
    pub fn preset(preset: Preset, kind: SystemKind) -> Self {
        let system = SystemSpec::new(kind);
        let schedule = ActivationSchedule::parse("ssssl").expect("valid default schedule");
        // Desk runs are short, so pretraining uses a large annealed step to fit
        // the boundary function tightly before the curriculum starts.
        let (pretrain_lr, pretrain_final_lr) = match preset {
            Preset::Desk => (1e-2, 1e-6),
            Preset::Full => (DEFAULT_LEARNING_RATE, DEFAULT_LEARNING_RATE),
        };
        let (width, batch, pretrain, curriculum) = match (preset, kind) {
            (Preset::Desk, SystemKind::Air3d) => (DESK_HIDDEN_WIDTH, 10_000, 1_000, 14_000),
            (Preset::Desk, _) => (DESK_HIDDEN_WIDTH, 10_000, 4_000, 20_000),
            (Preset::Full, SystemKind::Air3d) => (FULL_HIDDEN_WIDTH, 65_536, 10_000, 110_000),
            (Preset::Full, _) => (FULL_HIDDEN_WIDTH, 65_536, 40_000, 110_000),
        };
        Self {
            system,
            schedule,
            hidden_width: width,
            seed: 0,
            batch_size: batch,
            pretrain_iters: pretrain,
            curriculum_iters: curriculum,
            learning_rate: DEFAULT_LEARNING_RATE,
            pretrain_learning_rate: pretrain_lr,
            pretrain_final_learning_rate: pretrain_final_lr,
            terminal_weight: 100.0,
            terminal_fraction: 0.1,
            omega0: DEFAULT_OMEGA0,
            checkpoint_interval: if preset == Preset::Desk { 1_000 } else { 10_000 },
            log_interval: 10,
        }
    }

    pub fn desk(kind: SystemKind) -> Self {
        Self::preset(Preset::Desk, kind)
    }

    pub fn full(kind: SystemKind) -> Self {
        Self::preset(Preset::Full, kind)
    }

    pub fn total_iters(&self) -> usize {
        self.pretrain_iters + self.curriculum_iters
    }

    /// Step size used by the step that starts at `iteration`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if iteration >= self.pretrain_iters {
            return self.learning_rate;
        }
        let frac = iteration as f64 / (self.pretrain_iters - 1).max(1) as f64;
        let (hi, lo) = (self.pretrain_learning_rate, self.pretrain_final_learning_rate);
        lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// `<system>_<schedule>_<seed>`
    pub fn run_name(&self) -> String {
        format!("{}_{}_{}", self.system.name(), self.schedule, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("hidden_width", self.hidden_width),
            ("batch_size", self.batch_size),
            ("pretrain_iters", self.pretrain_iters),
            ("curriculum_iters", self.curriculum_iters),
            ("checkpoint_interval", self.checkpoint_interval),
            ("log_interval", self.log_interval),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("pretrain_learning_rate", self.pretrain_learning_rate),
            ("pretrain_final_learning_rate", self.pretrain_final_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.terminal_weight > 0.0 && self.terminal_weight.is_finite()) {
            return Err(Error::Config("terminal_weight must be positive".into()));
        }
        if !(self.terminal_fraction > 0.0 && self.terminal_fraction <= 1.0) {
            return Err(Error::Config("terminal_fraction must lie in (0, 1]".into()));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::Config("omega0 must be positive".into()));
        }
        self.system.validate()
    }

    /// Apply one override. Unknown keys are rejected with the list of valid
    /// keys; the config is unchanged on error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut next = self.clone();
        next.set_unvalidated(key.trim(), value.trim())?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    fn set_unvalidated(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "preset" => {
                let preset = match value {
                    "desk" => Preset::Desk,
                    "full" => Preset::Full,
                    other => return Err(Error::Config(format!("preset must be desk or full, got {other:?}"))),
                };
                let mut fresh = Self::preset(preset, self.system.kind);
                fresh.schedule = self.schedule.clone();
                fresh.seed = self.seed;
                *self = fresh;
            }
            "system" => {
                let kind: SystemKind = value.parse()?;
                if kind != self.system.kind {
                    self.system = SystemSpec::new(kind);
                }
            }
            "schedule" => self.schedule = ActivationSchedule::parse(value)?,
            "hidden_width" => self.hidden_width = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "pretrain_iters" => self.pretrain_iters = parse(key, value)?,
            "curriculum_iters" => self.curriculum_iters = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "pretrain_learning_rate" => self.pretrain_learning_rate = parse(key, value)?,
            "pretrain_final_learning_rate" => self.pretrain_final_learning_rate = parse(key, value)?,
            "terminal_weight" => self.terminal_weight = parse(key, value)?,
            "terminal_fraction" => self.terminal_fraction = parse(key, value)?,
            "omega0" => self.omega0 = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "log_interval" => self.log_interval = parse(key, value)?,
            "horizon" | "T_f" => self.system.horizon = parse(key, value)?,
            "v_e" | "v_p" | "omega_max" | "R" | "box" | "game_convention" => {
                self.system.set(key, value)?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parse flat `key = value` text; `#` starts a comment. `preset` and
    /// `system` are applied first so the remaining keys override the preset.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let find = |key: &str| pairs.iter().rev().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let kind: SystemKind = find("system").unwrap_or("air3d").parse()?;
        let preset = match find("preset") {
            None | Some("desk") => Preset::Desk,
            Some("full") => Preset::Full,
            Some(other) => return Err(Error::Config(format!("preset must be desk or full, got {other:?}"))),
        };
        let mut config = Self::preset(preset, kind);
        for (k, v) in pairs {
            if k == "preset" || k == "system" {
                continue;
            }
            config.set_unvalidated(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Rebuild the config stored in checkpoint metadata; keys that are not
    /// config keys (such as the iteration count) are skipped.
    pub fn from_metadata(meta: &[(String, String)]) -> Result<Self> {
        Self::from_pairs(
            meta.iter()
                .filter(|(k, _)| CONFIG_KEYS.contains(&k.as_str()))
                .map(|(k, v)| (k.as_str(), v.as_str())),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical key-value pairs; parsing them back gives an equal config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("system".into(), self.system.name().into()),
            ("schedule".into(), self.schedule.to_string()),
            ("hidden_width".into(), self.hidden_width.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("pretrain_iters".into(), self.pretrain_iters.to_string()),
            ("curriculum_iters".into(), self.curriculum_iters.to_string()),
            ("learning_rate".into(), format!("{:?}", self.learning_rate)),
            ("pretrain_learning_rate".into(), format!("{:?}", self.pretrain_learning_rate)),
            ("pretrain_final_learning_rate".into(), format!("{:?}", self.pretrain_final_learning_rate)),
            ("terminal_weight".into(), format!("{:?}", self.terminal_weight)),
            ("terminal_fraction".into(), format!("{:?}", self.terminal_fraction)),
            ("omega0".into(), format!("{:?}", self.omega0)),
            ("checkpoint_interval".into(), self.checkpoint_interval.to_string()),
            ("log_interval".into(), self.log_interval.to_string()),
        ];
        out.extend(
            self.system
                .to_pairs()
                .into_iter()
                .filter(|(k, _)| k != "system")
                .map(|(k, v)| if k == "T_f" { ("horizon".to_string(), v) } else { (k, v) }),
        );
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
