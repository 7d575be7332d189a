//! Experiment configuration as flat `key = value` lines.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.
//! [`ExperimentConfig::to_text`] renders every key, and parsing that text
//! gives back the same config.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::error::{Error, Result};
use crate::learner::{Order, TrainConfig};
use crate::qfunction::ModelConfig;
use crate::simulator::{BaristaMix, SimConfig};

/// What the target phase trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// On-policy episodes with each target user's simulator.
    Simulated,
    /// The logged target dialogues.
    Logged,
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulated" => Ok(TargetMode::Simulated),
            "logged" => Ok(TargetMode::Logged),
            _ => Err(Error::Config(format!("unknown target mode `{s}`"))),
        }
    }
}

impl Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetMode::Simulated => "simulated",
            TargetMode::Logged => "logged",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_source_users: usize,
    pub n_target_users: usize,
    /// Probability a user sticks to their preferred value in a set.
    pub rho: f64,
    /// Logged dialogues per source user, used to compare users.
    pub source_log_dialogues: usize,
    /// Logged training dialogues per target user.
    pub target_train_dialogues: usize,
    /// Held-out dialogues per target user for AUC and online evaluation.
    pub target_test_dialogues: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub sim: SimConfig,
    pub mix: BaristaMix,
    pub data: DataConfig,
    /// On-policy source dialogues across all source users.
    pub source_dialogues: usize,
    pub source: TrainConfig,
    pub target: TrainConfig,
    pub target_mode: TargetMode,
    pub baseline: BaselineKind,
    pub prior_lambda: f64,
    pub bandit_budget: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3, 4, 5],
            model: ModelConfig::default(),
            sim: SimConfig::default(),
            mix: BaristaMix::default(),
            data: DataConfig {
                n_source_users: 11,
                n_target_users: 5,
                rho: 0.8,
                source_log_dialogues: 20,
                target_train_dialogues: 20,
                target_test_dialogues: 300,
            },
            source_dialogues: 5000,
            source: TrainConfig {
                alpha: 1e-2,
                alpha_weight: 1e-2,
                alpha_personal: 1.0,
                ..TrainConfig::default()
            },
            target: TrainConfig {
                alpha: 1e-4,
                alpha_weight: 1e-4,
                alpha_personal: 1.0,
                epochs: 5,
                ..TrainConfig::default()
            },
            target_mode: TargetMode::Logged,
            baseline: BaselineKind::Petal,
            prior_lambda: 0.01,
            bandit_budget: 50,
            out: PathBuf::from("out"),
        }
    }
}

trait Value: Sized {
    fn parse_value(key: &str, s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

fn bad(key: &str, s: &str) -> Error {
    Error::Config(format!("bad value `{s}` for `{key}`"))
}

macro_rules! simple_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(key: &str, s: &str) -> Result<Self> {
                <$t as FromStr>::from_str(s).map_err(|_| bad(key, s))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

simple_value!(usize, u64, f64, bool);

impl Value for BaselineKind {
    fn parse_value(_: &str, s: &str) -> Result<Self> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for TargetMode {
    fn parse_value(_: &str, s: &str) -> Result<Self> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for PathBuf {
    fn parse_value(_: &str, s: &str) -> Result<Self> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl Value for Vec<u64> {
    fn parse_value(key: &str, s: &str) -> Result<Self> {
        s.split(',')
            .map(|x| x.trim())
            .filter(|x| !x.is_empty())
            .map(|x| x.parse().map_err(|_| bad(key, s)))
            .collect()
    }
    fn render(&self) -> String {
        join(self, ",")
    }
}

fn join<T: Display>(xs: &[T], sep: &str) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        pub const KEYS: &'static [&'static str] = &[$($key),*];

        /// Sets one key from its textual value.
        pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => self.$($field).+ = Value::parse_value(key, value)?,)*
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            Ok(())
        }

        fn entries(&self) -> Vec<(&'static str, String)> {
            vec![$(($key, self.$($field).+.render())),*]
        }
    };
}

impl ExperimentConfig {
    keys! {
        "seeds" => seeds,
        "model.dim" => model.dim,
        "model.projection_std" => model.projection_std,
        "model.general_std" => model.general_std,
        "model.personal_weight_init" => model.personal_weight_init,
        "model.memory_factor" => model.memory_factor,
        "sim.max_turns" => sim.max_turns,
        "sim.patience" => sim.patience,
        "sim.reward.inform" => sim.rewards.inform,
        "sim.reward.confirm" => sim.rewards.confirm,
        "sim.reward.decline" => sim.rewards.decline,
        "sim.reward.payment" => sim.rewards.payment,
        "sim.reward.turn" => sim.rewards.turn,
        "sim.reward.illogical" => sim.rewards.illogical,
        "data.barista_suggest_prob" => mix.suggest_prob,
        "data.barista_noise" => mix.noise,
        "data.n_source_users" => data.n_source_users,
        "data.n_target_users" => data.n_target_users,
        "data.rho" => data.rho,
        "data.source_log_dialogues" => data.source_log_dialogues,
        "data.target_train_dialogues" => data.target_train_dialogues,
        "data.target_test_dialogues" => data.target_test_dialogues,
        "source.dialogues" => source_dialogues,
        "source.alpha" => source.alpha,
        "source.alpha_weight" => source.alpha_weight,
        "source.alpha_personal" => source.alpha_personal,
        "source.gamma" => source.gamma,
        "source.epochs" => source.epochs,
        "source.eta_base" => source.eta_base,
        "source.eta_decay" => source.eta_decay,
        "source.residual_gradient" => source.residual_gradient,
        "source.trace_every" => source.trace_every,
        "target.mode" => target_mode,
        "target.alpha" => target.alpha,
        "target.alpha_weight" => target.alpha_weight,
        "target.alpha_personal" => target.alpha_personal,
        "target.gamma" => target.gamma,
        "target.epochs" => target.epochs,
        "target.eta_base" => target.eta_base,
        "target.eta_decay" => target.eta_decay,
        "target.residual_gradient" => target.residual_gradient,
        "target.freeze_shared" => target.freeze_shared,
        "target.trace_every" => target.trace_every,
        "baseline.kind" => baseline,
        "baseline.prior_lambda" => prior_lambda,
        "baseline.bandit_budget" => bandit_budget,
        "paths.out" => out,
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text, hex encoded. The seed list and output
    /// root are left out: they say which runs to make and where, not what a
    /// run computes.
    pub fn hash(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| *k != "seeds" && *k != "paths.out")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if self.data.n_source_users == 0 || self.data.n_target_users == 0 {
            return Err(Error::Config("need at least one source and one target user".into()));
        }
        if self.data.target_train_dialogues == 0 || self.data.target_test_dialogues == 0 || self.data.source_log_dialogues == 0 {
            return Err(Error::Config("dialogue counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.data.rho) || !(0.0..=1.0).contains(&self.mix.suggest_prob) || !(0.0..=1.0).contains(&self.mix.noise) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.model.dim == 0 {
            return Err(Error::Config("model.dim must be positive".into()));
        }
        if !(self.prior_lambda >= 0.0) {
            return Err(Error::Config("baseline.prior_lambda must be non-negative".into()));
        }
        self.source.validate()?;
        self.target.validate()?;
        Ok(())
    }

    /// The learner settings for `seed`.
    pub fn baseline_config(&self, seed: u64) -> BaselineConfig {
        BaselineConfig {
            model: self.model,
            source: TrainConfig {
                seed,
                order: Order::RoundRobin,
                ..self.source
            },
            target: TrainConfig {
                seed,
                order: Order::RoundRobin,
                ..self.target
            },
            prior_lambda: self.prior_lambda,
            bandit_budget: self.bandit_budget,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        assert_eq!(c.to_text().lines().count(), ExperimentConfig::KEYS.len());
    }

    #[test]
    fn overrides_comments_and_errors() {
        let c = ExperimentConfig::parse("# tuning\nseeds = 7, 8\n\nbaseline.kind = prior-all # inline\nsource.alpha=0.5\n").unwrap();
        assert_eq!(c.seeds, vec![7, 8]);
        assert_eq!(c.baseline, BaselineKind::PriorAll);
        assert_eq!(c.source.alpha, 0.5);
        assert_eq!(ExperimentConfig::parse("target.mode = logged").unwrap().target_mode, TargetMode::Logged);
        assert!(ExperimentConfig::parse("target.mode = both").is_err());
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
        let moved = ExperimentConfig::parse("seeds = 9\npaths.out = elsewhere").unwrap();
        assert_eq!(moved.hash(), ExperimentConfig::default().hash());

        assert!(matches!(ExperimentConfig::parse("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("model.dim"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("model.dim = x"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("seeds ="), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("data.rho = 1.5"), Err(Error::Config(_))));
        assert!(ExperimentConfig::parse("source.alpha = -1").is_err());
    }

    proptest! {
        #[test]
        fn any_float_round_trips(a in -1e6f64..1e6, l in 0f64..1e3, d in 1usize..500, seeds in proptest::collection::vec(0u64..u64::MAX, 1..6)) {
            let mut c = ExperimentConfig::default();
            c.model.personal_weight_init = a;
            c.prior_lambda = l;
            c.model.dim = d;
            c.seeds = seeds;
            let back = ExperimentConfig::parse(&c.to_text()).unwrap();
            prop_assert_eq!(back.hash(), c.hash());
            prop_assert_eq!(back, c);
        }
    }
}
