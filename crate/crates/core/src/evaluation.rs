//! Test-set measurement: per-sample rates under converged WMMSE precoding
//! for a trained model or a baseline, and the sweeps built on top of it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{build_features_with_pinv, perturb_sample, ChannelDataset, Split};
use crate::error::{Error, Result};
use crate::fcn::{fcn_forward, FcnModel, Mode};
use crate::numerics::pseudoinverse;
use crate::precoding::{
    alternating_gradient_baseline, effective_channel, mmse_precoder, random_phase_baseline,
    user_rates, wmmse_precoder, LinkBudget, PhaseField, UserWeights, WmmseOptions,
};
use crate::seed::derive_seed;
use crate::training::round_phases;

/// Where the RIS phases come from.
#[derive(Clone, Copy, Debug)]
pub enum PhaseSource<'a> {
    Model(&'a FcnModel),
    /// Fresh uniform phases per sample.
    Random,
    AlternatingGradient {
        steps: usize,
        step_size: f64,
    },
}

impl PhaseSource<'_> {
    pub fn tag(&self) -> &'static str {
        match self {
            PhaseSource::Model(_) => "fcn",
            PhaseSource::Random => "random",
            PhaseSource::AlternatingGradient { .. } => "alt-gradient",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Snap phases to this codebook before precoding.
    pub rounding: Option<Vec<f64>>,
    /// Channel-estimation error ratio.
    pub gamma: f64,
    /// Also perturb the shared BS-RIS channel.
    pub perturb_h: bool,
    pub seed: u64,
    pub wmmse: WmmseOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rounding: None,
            gamma: 0.0,
            perturb_h: false,
            seed: 0,
            wmmse: WmmseOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    /// Per-user rates on the true channel.
    pub rates: Vec<f64>,
    pub wsr: f64,
    /// WSR of the MMSE precoder that initialized WMMSE, on the true channel.
    pub mmse_wsr: f64,
}

/// One pass over a split with fixed weights, TSNR and error ratio.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRun {
    pub algorithm: String,
    pub gamma: f64,
    pub link: LinkBudget,
    pub weights: UserWeights,
    pub records: Vec<SampleRecord>,
}

impl EvalRun {
    pub fn mean_wsr(&self) -> f64 {
        mean(self.records.iter().map(|r| r.wsr))
    }

    pub fn mean_sum_rate(&self) -> f64 {
        mean(self.records.iter().map(|r| r.rates.iter().sum()))
    }

    pub fn mean_user_rates(&self) -> Vec<f64> {
        let users = self.weights.len();
        (0..users)
            .map(|u| mean(self.records.iter().map(|r| r.rates[u])))
            .collect()
    }

    pub fn sum_rates(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rates.iter().sum()).collect()
    }

    pub fn ecdf(&self) -> Vec<(f64, f64)> {
        ecdf(&self.sum_rates())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub runs: Vec<EvalRun>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    /// `sample_id,user,rate,weight,algorithm,gamma,rho`, one row per sample
    /// per user per run.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("sample_id,user,rate,weight,algorithm,gamma,rho\n");
        for run in &self.runs {
            for r in &run.records {
                for (u, rate) in r.rates.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{}",
                        r.sample_id,
                        u,
                        rate,
                        run.weights.as_slice()[u],
                        run.algorithm,
                        run.gamma,
                        run.link.rho
                    );
                }
            }
        }
        out
    }

    /// One row per run. `wsr_ratio` compares with the `gamma = 0` run of the
    /// same algorithm, weights and TSNR when there is one.
    pub fn summary_csv(&self) -> String {
        let users = self.runs.first().map_or(0, |r| r.weights.len());
        let mut out = String::from("algorithm,gamma,rho,weights,samples,mean_wsr,mean_sum_rate");
        for u in 0..users {
            let _ = write!(out, ",mean_rate_{u}");
        }
        out.push_str(",wsr_ratio\n");
        for run in &self.runs {
            let reference = self.runs.iter().find(|o| {
                o.gamma == 0.0
                    && o.algorithm == run.algorithm
                    && o.weights == run.weights
                    && o.link == run.link
            });
            let ratio = reference.map_or(String::new(), |o| {
                format!("{}", run.mean_wsr() / o.mean_wsr())
            });
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                run.algorithm,
                run.gamma,
                run.link.rho,
                run.weights.key().replace(',', ";"),
                run.records.len(),
                run.mean_wsr(),
                run.mean_sum_rate()
            );
            for r in run.mean_user_rates() {
                let _ = write!(out, ",{r}");
            }
            let _ = writeln!(out, ",{ratio}");
        }
        out
    }

    /// `run,sum_rate,cdf` step points of every run.
    pub fn ecdf_csv(&self) -> String {
        let mut out = String::from("algorithm,gamma,rho,sum_rate,cdf\n");
        for run in &self.runs {
            for (x, y) in run.ecdf() {
                let _ = writeln!(
                    out,
                    "{},{},{},{x},{y}",
                    run.algorithm, run.gamma, run.link.rho
                );
            }
        }
        out
    }

    /// Writes `<stem>.records.csv` and `<stem>.summary.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (suffix, body) in [
            ("records", self.records_csv()),
            ("summary", self.summary_csv()),
        ] {
            let path = dir.join(format!("{stem}.{suffix}.csv"));
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// `mean_wsr(gamma) / mean_wsr(0)` for each run, in run order.
    pub fn degradation(&self) -> Vec<(f64, f64)> {
        let base = self
            .runs
            .iter()
            .find(|r| r.gamma == 0.0)
            .map(EvalRun::mean_wsr);
        self.runs
            .iter()
            .map(|r| (r.gamma, base.map_or(f64::NAN, |b| r.mean_wsr() / b)))
            .collect()
    }
}

/// Runs one pass of the measurement protocol over `split`.
pub fn evaluate(
    source: PhaseSource<'_>,
    dataset: &ChannelDataset,
    split: Split,
    w: &UserWeights,
    lb: &LinkBudget,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let run = evaluate_run(source, dataset, split, w, lb, opts)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("seed".into(), opts.seed.to_string());
    metadata.insert("algorithm".into(), run.algorithm.clone());
    Ok(EvalReport {
        runs: vec![run],
        metadata,
    })
}

fn evaluate_run(
    source: PhaseSource<'_>,
    dataset: &ChannelDataset,
    split: Split,
    w: &UserWeights,
    lb: &LinkBudget,
    opts: &EvalOptions,
) -> Result<EvalRun> {
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split:?} is empty")));
    }
    let geo = dataset.geometry();
    if w.len() != geo.users {
        return Err(Error::dims(
            "evaluate",
            format!("{} weights for {} users", w.len(), geo.users),
        ));
    }
    if !(opts.gamma >= 0.0 && opts.gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be >= 0, got {}",
            opts.gamma
        )));
    }
    if let PhaseSource::Model(m) = source {
        let a = &m.arch;
        if (a.ris_width, a.ris_height, a.users) != (geo.ris_width, geo.ris_height, geo.users) {
            return Err(Error::ShapeMismatch(format!(
                "model built for {}x{} RIS and {} users, dataset has {}x{} and {}",
                a.ris_width, a.ris_height, a.users, geo.ris_width, geo.ris_height, geo.users
            )));
        }
    }
    let offset = match split {
        Split::Test => dataset.train_count(),
        _ => 0,
    };
    let gamma_seed = derive_seed(opts.seed, "gamma", opts.gamma.to_bits());
    let h_est = if opts.gamma > 0.0 && opts.perturb_h {
        let one = crate::channel::ChannelDataset::new(geo, (**dataset.h()).clone(), Vec::new(), 0)?;
        Arc::clone(crate::channel::perturb(&one, opts.gamma, gamma_seed, true)?.h())
    } else {
        Arc::clone(dataset.h())
    };
    let pinv = matches!(source, PhaseSource::Model(_)).then(|| pseudoinverse(&h_est));

    let records: Vec<Result<SampleRecord>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, truth)| {
            let sample_id = offset + i;
            let est = if opts.gamma > 0.0 {
                perturb_sample(
                    truth,
                    Arc::clone(&h_est),
                    opts.gamma,
                    gamma_seed,
                    sample_id as u64,
                )
            } else {
                truth.clone()
            };
            let mut psi = match source {
                PhaseSource::Model(m) => {
                    let feats = build_features_with_pinv(
                        &est,
                        pinv.as_ref().expect("pinv for model source"),
                    );
                    fcn_forward(m, &feats, Mode::Eval)?.0
                }
                PhaseSource::Random => random_phase_baseline(
                    derive_seed(opts.seed, "random-baseline", sample_id as u64),
                    geo,
                ),
                PhaseSource::AlternatingGradient { steps, step_size } => {
                    alternating_gradient_baseline(&est, w, lb, steps, step_size)?
                }
            };
            if let Some(cb) = &opts.rounding {
                psi = round_phases(&psi, cb);
            }
            measure(&est, truth, &psi, w, lb, opts.wmmse, sample_id)
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let mut algorithm = source.tag().to_string();
    if opts.rounding.is_some() {
        algorithm.push_str("-rounded");
    }
    Ok(EvalRun {
        algorithm,
        gamma: opts.gamma,
        link: *lb,
        weights: w.clone(),
        records,
    })
}

/// Precodes on the estimated channel, measures on the true one.
fn measure(
    est: &crate::channel::ChannelSet,
    truth: &crate::channel::ChannelSet,
    psi: &PhaseField,
    w: &UserWeights,
    lb: &LinkBudget,
    opts: WmmseOptions,
    sample_id: usize,
) -> Result<SampleRecord> {
    let c_est = effective_channel(est, psi)?;
    let c_true = effective_channel(truth, psi)?;
    let init = mmse_precoder(&c_est, lb)?;
    let v = wmmse_precoder(&c_est, w, lb, &init, opts)?.precoder;
    let rates = user_rates(&c_true, &v, lb)?;
    let weighted = |r: &[f64]| r.iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>();
    let mmse_wsr = weighted(&user_rates(&c_true, &init, lb)?);
    Ok(SampleRecord {
        sample_id,
        wsr: weighted(&rates),
        rates,
        mmse_wsr,
    })
}

/// One evaluation per weight vector, each with the model trained for it.
pub fn rate_region(
    models: &BTreeMap<String, FcnModel>,
    dataset: &ChannelDataset,
    split: Split,
    weights: &[UserWeights],
    lb: &LinkBudget,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for w in weights {
        let model = models.get(&w.key()).ok_or_else(|| Error::MissingModel {
            key: w.key(),
            available: models
                .keys()
                .map(|k| format!("({k})"))
                .collect::<Vec<_>>()
                .join(" "),
        })?;
        report.runs.push(evaluate_run(
            PhaseSource::Model(model),
            dataset,
            split,
            w,
            lb,
            opts,
        )?);
    }
    report.metadata.insert("seed".into(), opts.seed.to_string());
    Ok(report)
}

/// Region of a baseline evaluated with every weight vector.
pub fn baseline_region(
    source: PhaseSource<'_>,
    dataset: &ChannelDataset,
    split: Split,
    weights: &[UserWeights],
    lb: &LinkBudget,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for w in weights {
        report
            .runs
            .push(evaluate_run(source, dataset, split, w, lb, opts)?);
    }
    Ok(report)
}

/// `1e11, 2e11, ..., 1e12`.
pub fn default_tsnr_grid() -> Vec<f64> {
    (1..=10).map(|k| k as f64 * 1e11).collect()
}

/// The weight vectors of the default rate region.
pub fn default_weight_grid() -> Vec<UserWeights> {
    [
        [0.0, 1.0],
        [0.25, 0.75],
        [0.5, 0.5],
        [0.75, 0.25],
        [1.0, 0.0],
    ]
    .iter()
    .map(|a| UserWeights::new(a.to_vec()).expect("valid weights"))
    .collect()
}

/// One evaluation per TSNR value, keeping the power budget of `power`.
pub fn tsnr_sweep(
    source: PhaseSource<'_>,
    dataset: &ChannelDataset,
    split: Split,
    w: &UserWeights,
    rhos: &[f64],
    power: f64,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if rhos.is_empty() {
        return Err(Error::InvalidArgument("TSNR list is empty".into()));
    }
    let mut report = EvalReport::default();
    for &rho in rhos {
        let lb = LinkBudget::new(rho, power)?;
        report
            .runs
            .push(evaluate_run(source, dataset, split, w, &lb, opts)?);
    }
    report.metadata.insert("seed".into(), opts.seed.to_string());
    Ok(report)
}

/// One evaluation per channel-error ratio.
pub fn robustness_curve(
    source: PhaseSource<'_>,
    dataset: &ChannelDataset,
    split: Split,
    w: &UserWeights,
    lb: &LinkBudget,
    gammas: &[f64],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if gammas.iter().any(|g| !(*g >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "gammas must be >= 0: {gammas:?}"
        )));
    }
    let mut report = EvalReport::default();
    for &gamma in gammas {
        let o = EvalOptions {
            gamma,
            ..opts.clone()
        };
        report
            .runs
            .push(evaluate_run(source, dataset, split, w, lb, &o)?);
    }
    report.metadata.insert("seed".into(), opts.seed.to_string());
    Ok(report)
}

/// Step points of the empirical CDF: for each distinct value `v`, the pair
/// `(v, F(v-))` followed by `(v, F(v))`.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let x = v[i];
        let mut j = i;
        while j < v.len() && v[j] == x {
            j += 1;
        }
        out.push((x, i as f64 / n));
        out.push((x, j as f64 / n));
        i = j;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synthesize_dataset, ChannelSpec};
    use crate::fcn::{init_model, ArchSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset() -> ChannelDataset {
        let spec = ChannelSpec {
            ris_width: 4,
            ris_height: 4,
            bs_antennas: 4,
            train_samples: 3,
            test_samples: 4,
            ..ChannelSpec::default()
        };
        synthesize_dataset(&spec, 3).unwrap()
    }

    fn model() -> FcnModel {
        let arch = ArchSpec {
            ris_width: 4,
            ris_height: 4,
            users: 2,
            layers: 2,
            kernel: 5,
            hidden_maps: 3,
            dropout: 0.1,
            activation: "leaky_relu".into(),
        };
        init_model(&arch, 1).unwrap()
    }

    const LB: LinkBudget = LinkBudget {
        rho: 1e11,
        power: 1.0,
    };

    #[test]
    fn ecdf_examples() {
        assert_eq!(ecdf(&[2.5]), vec![(2.5, 0.0), (2.5, 1.0)]);
        assert_eq!(ecdf(&[1.0, 1.0, 1.0]), vec![(1.0, 0.0), (1.0, 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let pts = ecdf(&xs);
        assert_eq!(pts.last().unwrap().1, 1.0);
        for w in pts.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        let ks = pts.iter().map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(ks < 0.06, "{ks}");
    }

    #[test]
    fn evaluate_is_deterministic_and_consistent() {
        let ds = dataset();
        let m = model();
        let w = UserWeights::new(vec![0.3, 0.7]).unwrap();
        let opts = EvalOptions::default();
        let a = evaluate(PhaseSource::Model(&m), &ds, Split::Test, &w, &LB, &opts).unwrap();
        let b = evaluate(PhaseSource::Model(&m), &ds, Split::Test, &w, &LB, &opts).unwrap();
        assert_eq!(a, b);
        let run = &a.runs[0];
        assert_eq!(run.records.len(), 4);
        assert_eq!(run.records[0].sample_id, 3);
        let recomputed: f64 = run
            .records
            .iter()
            .map(|r| {
                r.rates
                    .iter()
                    .zip(w.as_slice())
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 4.0;
        assert!((recomputed - run.mean_wsr()).abs() < 1e-12);
        for r in &run.records {
            assert!(r.rates.iter().all(|&x| x >= 0.0));
            assert!(r.wsr >= r.mmse_wsr - 1e-9);
        }
        assert_eq!(a.records_csv().lines().count(), 1 + 8);
        assert!(a
            .summary_csv()
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("fcn,0,100000000000,0.3;0.7,4,"));
    }

    #[test]
    fn zero_weight_user_still_reported() {
        let ds = dataset();
        let w = UserWeights::new(vec![1.0, 0.0]).unwrap();
        let rep = evaluate(
            PhaseSource::Random,
            &ds,
            Split::Test,
            &w,
            &LB,
            &EvalOptions::default(),
        )
        .unwrap();
        for r in &rep.runs[0].records {
            assert_eq!(r.rates.len(), 2);
            assert!((r.wsr - r.rates[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn sweeps_reduce_to_evaluate() {
        let ds = dataset();
        let m = model();
        let w = UserWeights::equal(2);
        let opts = EvalOptions::default();
        let plain = evaluate(PhaseSource::Model(&m), &ds, Split::Test, &w, &LB, &opts).unwrap();
        let sweep = tsnr_sweep(
            PhaseSource::Model(&m),
            &ds,
            Split::Test,
            &w,
            &[LB.rho],
            LB.power,
            &opts,
        )
        .unwrap();
        assert_eq!(sweep.runs, plain.runs);
        let rob = robustness_curve(
            PhaseSource::Model(&m),
            &ds,
            Split::Test,
            &w,
            &LB,
            &[0.0, 0.1],
            &opts,
        )
        .unwrap();
        assert_eq!(rob.runs[0], plain.runs[0]);
        assert_ne!(rob.runs[1].records, plain.runs[0].records);
        assert_eq!(rob.degradation()[0].1, 1.0);
        assert_eq!(default_tsnr_grid().len(), 10);
    }

    #[test]
    fn rate_region_uses_registry() {
        let ds = dataset();
        let weights = default_weight_grid();
        assert_eq!(weights.len(), 5);
        let mut reg = BTreeMap::new();
        for w in &weights {
            reg.insert(w.key(), model());
        }
        let rep = rate_region(
            &reg,
            &ds,
            Split::Test,
            &weights,
            &LB,
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.runs.len(), 5);
        let last = &rep.runs[4];
        assert!((last.mean_wsr() - last.mean_user_rates()[0]).abs() < 1e-12);
        reg.remove("0.5,0.5");
        match rate_region(
            &reg,
            &ds,
            Split::Test,
            &weights,
            &LB,
            &EvalOptions::default(),
        ) {
            Err(Error::MissingModel { key, available }) => {
                assert_eq!(key, "0.5,0.5");
                assert_eq!(available.matches('(').count(), 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rounding_tags_algorithm() {
        let ds = dataset();
        let m = model();
        let opts = EvalOptions {
            rounding: Some(vec![0.0, std::f64::consts::PI]),
            ..EvalOptions::default()
        };
        let rep = evaluate(
            PhaseSource::Model(&m),
            &ds,
            Split::Test,
            &UserWeights::equal(2),
            &LB,
            &opts,
        )
        .unwrap();
        assert_eq!(rep.runs[0].algorithm, "fcn-rounded");
    }
}
