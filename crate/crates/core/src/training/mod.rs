//! Unsupervised training of the FCN: Adam ascent on the WSR through the
//! MMSE precoder, then on the WSR with periodically refreshed WMMSE
//! precoders, optionally annealing a discretization penalty.

mod discrete;

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{build_features_with_pinv, ChannelDataset, ChannelSet};
use crate::error::{Error, Result};
use crate::fcn::{fcn_backward, fcn_forward, FcnModel, GradientBundle, Mode};
use crate::head::{PenaltyTerm, PrecoderMode, WsrHead};
use crate::numerics::{pseudoinverse, ComplexMatrix, RealTensor3};
use crate::precoding::{
    effective_channel, mmse_precoder, wmmse_precoder, wsr, LinkBudget, PhaseField, PrecodingMatrix,
    UserWeights, WmmseOptions,
};
use crate::seed::{derive_seed, rng_for};

pub use discrete::{penalty, penalty_gradient, round_phases};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub wmmse_refresh_epochs: usize,
    pub wmmse_inner_iters: usize,
    pub weights: UserWeights,
    pub link: LinkBudget,
    pub seed: u64,
    pub adam: AdamParams,
    /// Stop phase 2 early once the WSR plateaus.
    pub phase2_plateau: bool,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub kappa_step: f64,
    pub kappa_cap: f64,
    pub codebook: Vec<f64>,
    pub penalty_threshold: f64,
    /// Epoch cap for each penalty stage of discrete training.
    pub stage_epochs: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_phase1: 1e-4,
            lr_phase2: 2e-6,
            epochs_phase1: 4000,
            epochs_phase2: 4000,
            batch_size: 256,
            wmmse_refresh_epochs: 10,
            wmmse_inner_iters: 5,
            weights: UserWeights::equal(2),
            link: LinkBudget {
                rho: 1e11,
                power: 1.0,
            },
            seed: 0,
            adam: AdamParams::default(),
            phase2_plateau: false,
            plateau_window: 20,
            plateau_tol: 1e-4,
            kappa_step: 0.05,
            kappa_cap: 5.0,
            codebook: vec![0.0, PI],
            penalty_threshold: 0.5,
            stage_epochs: 200,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (name, lr) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {lr}"));
            }
        }
        for (name, n) in [
            ("batch_size", self.batch_size),
            ("wmmse_refresh_epochs", self.wmmse_refresh_epochs),
            ("wmmse_inner_iters", self.wmmse_inner_iters),
            ("plateau_window", self.plateau_window),
            ("stage_epochs", self.stage_epochs),
        ] {
            if n == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        let a = self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam parameters {a:?}"));
        }
        LinkBudget::new(self.link.rho, self.link.power)?;
        if self.codebook.iter().any(|c| !c.is_finite()) {
            return bad("codebook values must be finite".into());
        }
        if !(self.kappa_cap >= 0.0 && self.kappa_step.is_finite()) {
            return bad("kappa_cap must be >= 0 and kappa_step finite".into());
        }
        Ok(())
    }

    fn wmmse_refresh_options(&self) -> WmmseOptions {
        WmmseOptions {
            max_outer: self.wmmse_inner_iters,
            eps: f64::MIN_POSITIVE,
        }
    }
}

/// A channel sample with its precomputed network input.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub channel: ChannelSet,
    pub features: RealTensor3,
}

/// Builds features for `samples`, sharing one pseudoinverse of `h`.
pub fn prepare(samples: &[ChannelSet], h: &ComplexMatrix) -> Vec<Prepared> {
    let pinv = pseudoinverse(h);
    samples
        .par_iter()
        .map(|cs| Prepared {
            channel: cs.clone(),
            features: build_features_with_pinv(cs, &pinv),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &FcnModel) -> Self {
        let n = model.param_count();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Bias-corrected Adam ascent: `theta += lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    state: &mut AdamState,
    model: &mut FcnModel,
    grads: &GradientBundle,
    lr: f64,
    p: &AdamParams,
) -> Result<()> {
    let n = model.param_count();
    let gn: usize = grads.slices().map(<[f64]>::len).sum();
    if state.m.len() != n || gn != n || grads.layers.len() != model.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "Adam state {} / gradients {gn} / model {n}",
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - p.beta1.powi(t);
    let c2 = 1.0 - p.beta2.powi(t);
    let mut i = 0;
    for (params, g) in model.param_slices_mut().zip(grads.slices()) {
        if params.len() != g.len() {
            return Err(Error::ShapeMismatch(
                "gradient layer shape differs from model".into(),
            ));
        }
        for (w, &gi) in params.iter_mut().zip(g) {
            let m = p.beta1 * state.m[i] + (1.0 - p.beta1) * gi;
            let v = p.beta2 * state.v[i] + (1.0 - p.beta2) * gi * gi;
            state.m[i] = m;
            state.v[i] = v;
            *w += lr * (m / c1) / ((v / c2).sqrt() + p.eps);
            i += 1;
        }
    }
    Ok(())
}

/// Batch means reported alongside the gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub objective: f64,
    pub wsr: f64,
    pub penalty: f64,
}

fn member_mode(dropout_seed: Option<u64>, j: usize) -> Mode {
    match dropout_seed {
        Some(s) => Mode::Train {
            seed: derive_seed(s, "member", j as u64),
        },
        None => Mode::Eval,
    }
}

fn batch_gradient(
    model: &FcnModel,
    batch: &[&Prepared],
    cfg: &TrainConfig,
    precoders: Option<&[Option<&PrecodingMatrix>]>,
    kappa: f64,
    dropout_seed: Option<u64>,
) -> Result<(BatchStats, GradientBundle)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let per: Vec<Result<(BatchStats, GradientBundle)>> = batch
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let mode = match precoders {
                None => PrecoderMode::Mmse,
                Some(v) => match v.get(j).copied().flatten() {
                    Some(p) => PrecoderMode::Fixed(p.clone()),
                    None => return Err(Error::MissingPrecoder { sample: j }),
                },
            };
            let pen = (kappa != 0.0).then(|| PenaltyTerm {
                codebook: cfg.codebook.clone(),
                kappa,
            });
            let head = WsrHead::new(&s.channel, &cfg.weights, cfg.link, mode)
                .with_scale(scale)
                .with_penalty(pen);
            let (psi, cache) = fcn_forward(model, &s.features, member_mode(dropout_seed, j))?;
            let (val, grad_psi) = head.value_and_grad(&psi)?;
            let mut g = fcn_backward(model, &cache, &grad_psi)?;
            g.value = val.objective;
            let p = if cfg.codebook.is_empty() {
                0.0
            } else {
                penalty(&psi, &cfg.codebook)
            };
            Ok((
                BatchStats {
                    objective: val.objective,
                    wsr: val.wsr * scale,
                    penalty: p * scale,
                },
                g,
            ))
        })
        .collect();
    let mut total = GradientBundle::zeros_like(model);
    let mut stats = BatchStats::default();
    for r in per {
        let (s, g) = r?;
        total.accumulate(&g)?;
        stats.objective += s.objective;
        stats.wsr += s.wsr;
        stats.penalty += s.penalty;
    }
    if !total.is_finite() {
        return Err(Error::Diverged("batch gradient".into()));
    }
    Ok((stats, total))
}

/// Batch-mean WSR with the MMSE precoder inside the differentiated graph.
pub fn objective_mmse(
    model: &FcnModel,
    batch: &[&Prepared],
    cfg: &TrainConfig,
    dropout_seed: Option<u64>,
) -> Result<(BatchStats, GradientBundle)> {
    batch_gradient(model, batch, cfg, None, 0.0, dropout_seed)
}

/// Batch-mean WSR with frozen precoders, minus `kappa` times the batch-mean
/// penalty.
pub fn objective_wmmse(
    model: &FcnModel,
    batch: &[&Prepared],
    precoders: &[Option<&PrecodingMatrix>],
    cfg: &TrainConfig,
    kappa: f64,
    dropout_seed: Option<u64>,
) -> Result<(BatchStats, GradientBundle)> {
    if precoders.len() != batch.len() {
        return Err(Error::MissingPrecoder {
            sample: precoders.len().min(batch.len()),
        });
    }
    batch_gradient(model, batch, cfg, Some(precoders), kappa, dropout_seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mmse,
    Wmmse,
    Discrete,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Mmse => "mmse",
            Phase::Wmmse => "wmmse",
            Phase::Discrete => "discrete",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub objective: f64,
    pub wsr: f64,
    pub penalty: f64,
    pub kappa: f64,
    pub seconds: f64,
}

/// Train-split mean WSR just before and after a WMMSE refresh, both with
/// the eval-mode phases of the current model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefreshRecord {
    pub epoch: usize,
    pub wsr_before: f64,
    pub wsr_after: f64,
}

/// Penalties measured before each penalty stage of discrete training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KappaRecord {
    pub epoch: usize,
    pub kappa: f64,
    pub train_penalty: f64,
    pub test_penalty: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub refreshes: Vec<RefreshRecord>,
    pub kappa_steps: Vec<KappaRecord>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,objective,wsr,penalty,kappa,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                r.epoch,
                r.phase.label(),
                r.objective,
                r.wsr,
                r.penalty,
                r.kappa,
                r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// True once the last value improved on the one `window` epochs earlier by
/// less than `tol` relative.
pub fn plateaued(history: &[f64], window: usize, tol: f64) -> bool {
    if history.len() <= window {
        return false;
    }
    let new = history[history.len() - 1];
    let old = history[history.len() - 1 - window];
    (new - old) / old.abs().max(1e-12) < tol
}

/// Eval-mode phases for every sample.
pub fn predict_phases(model: &FcnModel, samples: &[Prepared]) -> Result<Vec<PhaseField>> {
    samples
        .par_iter()
        .map(|s| fcn_forward(model, &s.features, Mode::Eval).map(|(p, _)| p))
        .collect()
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    train: Vec<Prepared>,
    test: Vec<Prepared>,
    model: FcnModel,
    adam: AdamState,
    epoch: usize,
    vbar: Vec<Option<PrecodingMatrix>>,
    trace: TrainTrace,
    start: Instant,
}

impl<'a> Trainer<'a> {
    fn new(model: FcnModel, dataset: &ChannelDataset, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let geo = dataset.geometry();
        let arch = &model.arch;
        if (arch.ris_width, arch.ris_height, arch.users)
            != (geo.ris_width, geo.ris_height, geo.users)
        {
            return Err(Error::ShapeMismatch(format!(
                "model built for {}x{} RIS and {} users, dataset has {}x{} and {}",
                arch.ris_width,
                arch.ris_height,
                arch.users,
                geo.ris_width,
                geo.ris_height,
                geo.users
            )));
        }
        if cfg.weights.len() != geo.users {
            return Err(Error::dims(
                "train",
                format!("{} weights for {} users", cfg.weights.len(), geo.users),
            ));
        }
        let train_split = dataset.split(crate::channel::Split::Train);
        if train_split.is_empty() {
            return Err(Error::InvalidArgument(
                "dataset has no training samples".into(),
            ));
        }
        let train = prepare(train_split, dataset.h());
        let test = prepare(dataset.split(crate::channel::Split::Test), dataset.h());
        let n = train.len();
        Ok(Self {
            cfg,
            train,
            test,
            adam: AdamState::new(&model),
            model,
            epoch: 0,
            vbar: vec![None; n],
            trace: TrainTrace::default(),
            start: Instant::now(),
        })
    }

    fn out_of_steps(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.adam.step >= m)
    }

    fn run_epoch(&mut self, phase: Phase, lr: f64, kappa: f64) -> Result<()> {
        let cfg = self.cfg;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, "shuffle", self.epoch as u64));
        let mut sum = BatchStats::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if self.out_of_steps() {
                break;
            }
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &self.train[i]).collect();
            let dropout = Some(derive_seed(cfg.seed, "dropout-step", self.adam.step));
            let (stats, grads) = match phase {
                Phase::Mmse => objective_mmse(&self.model, &batch, cfg, dropout)?,
                Phase::Wmmse | Phase::Discrete => {
                    let pre: Vec<Option<&PrecodingMatrix>> =
                        chunk.iter().map(|&i| self.vbar[i].as_ref()).collect();
                    objective_wmmse(&self.model, &batch, &pre, cfg, kappa, dropout)?
                }
            };
            adam_step(&mut self.adam, &mut self.model, &grads, lr, &cfg.adam)?;
            sum.objective += stats.objective;
            sum.wsr += stats.wsr;
            sum.penalty += stats.penalty;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        log::debug!(
            "epoch {} {}: objective {:.5} wsr {:.5} penalty {:.4}",
            self.epoch,
            phase.label(),
            sum.objective / b,
            sum.wsr / b,
            sum.penalty / b
        );
        self.trace.epochs.push(EpochRecord {
            epoch: self.epoch,
            phase,
            objective: sum.objective / b,
            wsr: sum.wsr / b,
            penalty: sum.penalty / b,
            kappa,
            seconds: self.start.elapsed().as_secs_f64(),
        });
        self.epoch += 1;
        Ok(())
    }

    /// Re-runs a few WMMSE iterations for every training sample, warm-started
    /// from the previous precoder (MMSE the first time).
    fn refresh(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let opts = cfg.wmmse_refresh_options();
        let phases = predict_phases(&self.model, &self.train)?;
        let out: Vec<Result<(PrecodingMatrix, f64, f64)>> = self
            .train
            .par_iter()
            .zip(&phases)
            .zip(&self.vbar)
            .map(|((s, psi), prev)| {
                let c = effective_channel(&s.channel, psi)?;
                let init = match prev {
                    Some(v) => v.clone(),
                    None => mmse_precoder(&c, &cfg.link)?,
                };
                let before = wsr(&c, &init, &cfg.weights, &cfg.link)?;
                let res = wmmse_precoder(&c, &cfg.weights, &cfg.link, &init, opts)?;
                let after = wsr(&c, &res.precoder, &cfg.weights, &cfg.link)?;
                Ok((res.precoder, before, after))
            })
            .collect();
        let n = self.train.len() as f64;
        let (mut before, mut after) = (0.0, 0.0);
        for (slot, r) in self.vbar.iter_mut().zip(out) {
            let (v, b, a) = r?;
            *slot = Some(v);
            before += b / n;
            after += a / n;
        }
        log::debug!(
            "epoch {}: precoder refresh {before:.5} -> {after:.5}",
            self.epoch
        );
        self.trace.refreshes.push(RefreshRecord {
            epoch: self.epoch,
            wsr_before: before,
            wsr_after: after,
        });
        Ok(())
    }

    fn phase1(&mut self) -> Result<()> {
        for _ in 0..self.cfg.epochs_phase1 {
            if self.out_of_steps() {
                break;
            }
            self.run_epoch(Phase::Mmse, self.cfg.lr_phase1, 0.0)?;
        }
        Ok(())
    }

    fn phase2(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let mut history = Vec::new();
        for e in 0..cfg.epochs_phase2 {
            if self.out_of_steps() {
                break;
            }
            if e % cfg.wmmse_refresh_epochs == 0 {
                self.refresh()?;
            }
            self.run_epoch(Phase::Wmmse, cfg.lr_phase2, 0.0)?;
            history.push(self.trace.epochs.last().map_or(0.0, |r| r.wsr));
            if cfg.phase2_plateau && plateaued(&history, cfg.plateau_window, cfg.plateau_tol) {
                break;
            }
        }
        Ok(())
    }

    fn mean_penalty(&self, samples: &[Prepared]) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let phases = predict_phases(&self.model, samples)?;
        Ok(phases
            .iter()
            .map(|p| penalty(p, &self.cfg.codebook))
            .sum::<f64>()
            / phases.len() as f64)
    }

    fn discrete(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let mut kappa = 0.0;
        loop {
            let train_p = self.mean_penalty(&self.train)?;
            let test_p = if self.test.is_empty() {
                train_p
            } else {
                self.mean_penalty(&self.test)?
            };
            log::info!(
                "epoch {}: kappa {kappa:.2}, mean penalty train {train_p:.4} test {test_p:.4}",
                self.epoch
            );
            self.trace.kappa_steps.push(KappaRecord {
                epoch: self.epoch,
                kappa,
                train_penalty: train_p,
                test_penalty: test_p,
            });
            if test_p < cfg.penalty_threshold {
                return Ok(());
            }
            if kappa > cfg.kappa_cap || self.out_of_steps() {
                return Err(Error::KappaCap {
                    kappa,
                    cap: cfg.kappa_cap,
                    penalty: test_p,
                });
            }
            let mut history = Vec::new();
            for e in 0..cfg.stage_epochs {
                if self.out_of_steps() {
                    break;
                }
                if e % cfg.wmmse_refresh_epochs == 0 {
                    self.refresh()?;
                }
                self.run_epoch(Phase::Discrete, cfg.lr_phase2, kappa)?;
                history.push(self.trace.epochs.last().map_or(0.0, |r| r.objective));
                if plateaued(&history, cfg.plateau_window, cfg.plateau_tol) {
                    break;
                }
            }
            if cfg.kappa_step <= 0.0 {
                return Err(Error::KappaCap {
                    kappa,
                    cap: cfg.kappa_cap,
                    penalty: self.mean_penalty(if self.test.is_empty() {
                        &self.train
                    } else {
                        &self.test
                    })?,
                });
            }
            kappa += cfg.kappa_step;
        }
    }
}

/// Phase 1 on the MMSE objective, then phase 2 on the WMMSE objective with
/// precoders refreshed every `wmmse_refresh_epochs` epochs.
pub fn train_two_phase(
    model: FcnModel,
    dataset: &ChannelDataset,
    cfg: &TrainConfig,
) -> Result<(FcnModel, TrainTrace)> {
    let mut t = Trainer::new(model, dataset, cfg)?;
    t.phase1()?;
    t.phase2()?;
    Ok((t.model, t.trace))
}

/// Phase 1, then penalty stages with `kappa = 0, kappa_step, ...` until the
/// mean test penalty drops below `penalty_threshold`.
pub fn train_discrete(
    model: FcnModel,
    dataset: &ChannelDataset,
    cfg: &TrainConfig,
) -> Result<(FcnModel, TrainTrace)> {
    if cfg.codebook.is_empty() {
        return Err(Error::InvalidArgument(
            "discrete training needs a nonempty codebook".into(),
        ));
    }
    if !(cfg.penalty_threshold > 0.0) {
        return Err(Error::InvalidArgument(
            "penalty_threshold must be > 0".into(),
        ));
    }
    let mut t = Trainer::new(model, dataset, cfg)?;
    t.phase1()?;
    t.discrete()?;
    Ok((t.model, t.trace))
}
