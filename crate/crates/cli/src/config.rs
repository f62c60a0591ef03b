//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! out = "runs/desk"
//!
//! [system]
//! weights = [0.5, 0.5]
//! rho = 5e13
//! power = 1.0
//!
//! [channel]      # synthetic geometry, see ChannelSpec
//! [model]        # layers, kernel, hidden_maps, dropout, activation
//! [train]        # optimizer and protocol settings, see TrainConfig
//! [eval]         # measurement options
//! ```
//!
//! Every section and key is optional; missing values take the defaults of
//! the scenario table (16x16 RIS, 9 BS antennas, batch size 256, ...).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use ris_core::channel::{ChannelSpec, Geometry};
use ris_core::evaluation::{default_weight_grid, EvalOptions};
use ris_core::fcn::ArchSpec;
use ris_core::precoding::{LinkBudget, UserWeights, WmmseOptions};
use ris_core::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub weights: UserWeights,
    pub rho: f64,
    pub power: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            weights: UserWeights::equal(2),
            rho: 1e11,
            power: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub kernel: usize,
    pub hidden_maps: usize,
    pub dropout: f64,
    pub activation: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = ArchSpec::table1_16x16(2);
        Self {
            layers: t.layers,
            kernel: t.kernel,
            hidden_maps: t.hidden_maps,
            dropout: t.dropout,
            activation: t.activation,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, geo: Geometry) -> ArchSpec {
        ArchSpec {
            ris_width: geo.ris_width,
            ris_height: geo.ris_height,
            users: geo.users,
            layers: self.layers,
            kernel: self.kernel,
            hidden_maps: self.hidden_maps,
            dropout: self.dropout,
            activation: self.activation.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub wmmse_refresh_epochs: usize,
    pub wmmse_inner_iters: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub phase2_plateau: bool,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub kappa_step: f64,
    pub kappa_cap: f64,
    pub codebook: Vec<f64>,
    pub penalty_threshold: f64,
    pub stage_epochs: usize,
    pub max_steps: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr_phase1: t.lr_phase1,
            lr_phase2: t.lr_phase2,
            epochs_phase1: t.epochs_phase1,
            epochs_phase2: t.epochs_phase2,
            batch_size: t.batch_size,
            wmmse_refresh_epochs: t.wmmse_refresh_epochs,
            wmmse_inner_iters: t.wmmse_inner_iters,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            phase2_plateau: t.phase2_plateau,
            plateau_window: t.plateau_window,
            plateau_tol: t.plateau_tol,
            kappa_step: t.kappa_step,
            kappa_cap: t.kappa_cap,
            codebook: t.codebook,
            penalty_threshold: t.penalty_threshold,
            stage_epochs: t.stage_epochs,
            max_steps: t.max_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `test`, `train` or `all`.
    pub split: String,
    pub gamma: f64,
    pub gammas: Vec<f64>,
    pub perturb_h: bool,
    /// TSNR grid; empty means `1e11, 2e11, ..., 1e12`.
    pub rhos: Vec<f64>,
    pub weight_grid: Vec<Vec<f64>>,
    pub rounding: Option<Vec<f64>>,
    pub wmmse_max_outer: usize,
    pub wmmse_eps: f64,
    pub baseline_steps: usize,
    pub baseline_step_size: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let w = WmmseOptions::default();
        Self {
            split: "test".into(),
            gamma: 0.0,
            gammas: vec![0.0, 0.1, 0.2],
            perturb_h: false,
            rhos: Vec::new(),
            weight_grid: default_weight_grid().into_iter().map(Vec::from).collect(),
            rounding: None,
            wmmse_max_outer: w.max_outer,
            wmmse_eps: w.eps,
            baseline_steps: 200,
            baseline_step_size: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub system: SystemConfig,
    pub channel: ChannelSpec,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            system: SystemConfig::default(),
            channel: ChannelSpec::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// 1-based line of the first `key = ...` assignment in `src`.
fn line_of(src: &str, key: &str) -> Option<usize> {
    src.lines()
        .position(|l| {
            let t = l.trim_start();
            t.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

fn located(src: &str, key: &str, msg: String) -> anyhow::Error {
    match line_of(src, key) {
        Some(line) => anyhow!("config key `{key}` (line {line}): {msg}"),
        None => anyhow!("config key `{key}`: {msg}"),
    }
}

impl RunConfig {
    pub fn parse_str(src: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(src).map_err(|e| anyhow!("invalid config: {e}"))?;
        cfg.validate(src)?;
        Ok(cfg)
    }

    pub fn validate(&self, src: &str) -> anyhow::Result<()> {
        let t = &self.train;
        for (key, v) in [("lr_phase1", t.lr_phase1), ("lr_phase2", t.lr_phase2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(located(
                    src,
                    key,
                    format!("expected a positive number, got {v}"),
                ));
            }
        }
        for (key, v) in [
            ("batch_size", t.batch_size),
            ("wmmse_refresh_epochs", t.wmmse_refresh_epochs),
            ("wmmse_inner_iters", t.wmmse_inner_iters),
            ("plateau_window", t.plateau_window),
            ("stage_epochs", t.stage_epochs),
            ("layers", self.model.layers),
            ("wmmse_max_outer", self.eval.wmmse_max_outer),
        ] {
            if v == 0 {
                return Err(located(src, key, "expected an integer >= 1, got 0".into()));
            }
        }
        if !(t.penalty_threshold > 0.0) {
            return Err(located(
                src,
                "penalty_threshold",
                format!("expected a positive number, got {}", t.penalty_threshold),
            ));
        }
        if !(self.system.rho > 0.0) {
            return Err(located(
                src,
                "rho",
                format!("expected a positive number, got {}", self.system.rho),
            ));
        }
        if !(self.system.power > 0.0) {
            return Err(located(
                src,
                "power",
                format!("expected a positive number, got {}", self.system.power),
            ));
        }
        if self.system.weights.len() != self.channel.users {
            return Err(located(
                src,
                "weights",
                format!(
                    "{} weights for {} users",
                    self.system.weights.len(),
                    self.channel.users
                ),
            ));
        }
        for w in &self.eval.weight_grid {
            UserWeights::new(w.clone()).map_err(|e| located(src, "weight_grid", e.to_string()))?;
        }
        if !matches!(self.eval.split.as_str(), "test" | "train" | "all") {
            return Err(located(
                src,
                "split",
                format!("expected test, train or all, got {:?}", self.eval.split),
            ));
        }
        if self
            .eval
            .gammas
            .iter()
            .chain([&self.eval.gamma])
            .any(|g| !(*g >= 0.0))
        {
            return Err(located(src, "gamma", "expected values >= 0".into()));
        }
        self.channel
            .validate()
            .map_err(|e| anyhow!("invalid [channel] section: {e}"))?;
        let geo = self.channel.geometry()?;
        self.model
            .arch(geo)
            .validate()
            .map_err(|e| anyhow!("invalid [model] section: {e}"))?;
        self.train_config(0)
            .validate()
            .map_err(|e| anyhow!("invalid [train] section: {e}"))?;
        Ok(())
    }

    pub fn link(&self) -> LinkBudget {
        LinkBudget {
            rho: self.system.rho,
            power: self.system.power,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr_phase1: t.lr_phase1,
            lr_phase2: t.lr_phase2,
            epochs_phase1: t.epochs_phase1,
            epochs_phase2: t.epochs_phase2,
            batch_size: t.batch_size,
            wmmse_refresh_epochs: t.wmmse_refresh_epochs,
            wmmse_inner_iters: t.wmmse_inner_iters,
            weights: self.system.weights.clone(),
            link: self.link(),
            seed,
            adam: ris_core::training::AdamParams {
                beta1: t.adam_beta1,
                beta2: t.adam_beta2,
                eps: t.adam_eps,
            },
            phase2_plateau: t.phase2_plateau,
            plateau_window: t.plateau_window,
            plateau_tol: t.plateau_tol,
            kappa_step: t.kappa_step,
            kappa_cap: t.kappa_cap,
            codebook: t.codebook.clone(),
            penalty_threshold: t.penalty_threshold,
            stage_epochs: t.stage_epochs,
            max_steps: t.max_steps,
        }
    }

    pub fn eval_options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            rounding: self.eval.rounding.clone(),
            gamma: self.eval.gamma,
            perturb_h: self.eval.perturb_h,
            seed,
            wmmse: WmmseOptions {
                max_outer: self.eval.wmmse_max_outer,
                eps: self.eval.wmmse_eps,
            },
        }
    }

    /// Normalized TOML echo of the effective configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn parse_config(path: &Path) -> anyhow::Result<RunConfig> {
    let src = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    RunConfig::parse_str(&src).with_context(|| format!("in {}", path.display()))
}

/// Parses a phase list such as `0,pi`, `0,pi/2,pi,3pi/2` or `0,1.5708`.
pub fn parse_phase_list(s: &str) -> anyhow::Result<Vec<f64>> {
    let out = s
        .split(',')
        .map(|tok| parse_phase(tok.trim()).ok_or_else(|| anyhow!("cannot parse phase {tok:?}")))
        .collect::<anyhow::Result<Vec<f64>>>()?;
    if out.is_empty() {
        bail!("empty phase list");
    }
    Ok(out)
}

fn parse_phase(tok: &str) -> Option<f64> {
    if let Ok(v) = tok.parse::<f64>() {
        return Some(v);
    }
    let (neg, body) = match tok.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, tok),
    };
    let (num, den) = match body.split_once('/') {
        Some((n, d)) => (n, d.parse::<f64>().ok()?),
        None => (body, 1.0),
    };
    let coeff = num.strip_suffix("pi")?.trim_end_matches('*');
    let coeff = if coeff.is_empty() {
        1.0
    } else {
        coeff.parse::<f64>().ok()?
    };
    let v = coeff * std::f64::consts::PI / den;
    Some(if neg { -v } else { v })
}

/// Parses a comma-separated list of numbers.
pub fn parse_number_list(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .with_context(|| format!("cannot parse number {t:?}"))
        })
        .collect()
}
