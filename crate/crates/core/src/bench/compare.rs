use serde::{Deserialize, Serialize};

use super::train::{epochs_to_target, train_run, EpochRecord, RunHistory, TrainConfig};
use crate::data::Sample;
use crate::loss::{HolisticConfig, WeightFamily, WeightSpec};
use crate::{Error, Result};

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().fold(0.0, |a, v| a + v) / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().fold(0.0, |a, v| a + (v - mean).powi(2)) / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub baseline_epochs_to_target: Option<usize>,
    pub candidate_epochs_to_target: Option<usize>,
    pub speedup_ratio: Option<f64>,
    pub baseline_final: EpochRecord,
    pub candidate_final: EpochRecord,
    /// Candidate reached the target within half the baseline's epoch budget.
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub baseline_id: String,
    pub candidate_id: String,
    /// Mean final test ODS-F1 of the baseline.
    pub target_f1: f64,
    /// Epochs-to-target of the seed-averaged ODS-F1 curves.
    pub baseline_epochs_to_target: Option<usize>,
    pub candidate_epochs_to_target: Option<usize>,
    pub speedup_ratio: Option<f64>,
    pub seeds: Vec<u64>,
    pub success_fraction: f64,
    pub per_seed: Vec<SeedRow>,
    pub baseline_final_ods_f1: MeanStd,
    pub baseline_final_ois_f1: MeanStd,
    pub candidate_final_ods_f1: MeanStd,
    pub candidate_final_ois_f1: MeanStd,
}

impl SpeedupReport {
    pub const CSV_HEADER: &'static str = "baseline,candidate,seed,target_f1,baseline_epochs,candidate_epochs,speedup,baseline_final_ods_f1,candidate_final_ods_f1,baseline_final_ois_f1,candidate_final_ois_f1,success";

    /// One row per seed; contains no wall-clock values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        out.push_str(&self.csv_rows());
        out
    }

    pub fn csv_rows(&self) -> String {
        let opt = |v: Option<usize>| v.map(|e| e.to_string()).unwrap_or_default();
        let mut out = String::new();
        for r in &self.per_seed {
            out.push_str(&format!(
                "{},{},{},{:.10},{},{},{},{:.10},{:.10},{:.10},{:.10},{}\n",
                self.baseline_id,
                self.candidate_id,
                r.seed,
                self.target_f1,
                opt(r.baseline_epochs_to_target),
                opt(r.candidate_epochs_to_target),
                r.speedup_ratio.map(|s| format!("{s:.6}")).unwrap_or_default(),
                r.baseline_final.test_ods_f1,
                r.candidate_final.test_ods_f1,
                r.baseline_final.test_ois_f1,
                r.candidate_final.test_ois_f1,
                r.success,
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Report plus the underlying per-seed histories, in seed order.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: SpeedupReport,
    pub baseline_runs: Vec<RunHistory>,
    pub candidate_runs: Vec<RunHistory>,
}

/// Epoch-wise mean of several histories of equal length.
pub fn mean_history(runs: &[RunHistory]) -> RunHistory {
    let Some(first) = runs.first() else {
        return RunHistory::default();
    };
    let n = runs.len() as f64;
    let records = (0..first.records.len())
        .map(|i| {
            let mean = |f: fn(&EpochRecord) -> f64| runs.iter().fold(0.0, |a, r| a + f(&r.records[i])) / n;
            EpochRecord {
                epoch: first.records[i].epoch,
                mean_train_loss: mean(|r| r.mean_train_loss),
                train_jaccard: mean(|r| r.train_jaccard),
                test_ods_f1: mean(|r| r.test_ods_f1),
                test_ois_f1: mean(|r| r.test_ois_f1),
                wall_seconds: mean(|r| r.wall_seconds),
            }
        })
        .collect();
    RunHistory { records }
}

/// Worker-thread cap from `CRACKLOSS_THREADS`, default 1.
pub fn thread_budget() -> usize {
    std::env::var("CRACKLOSS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs every config, at most `threads` at a time; results keep input order.
pub fn run_many(
    configs: &[TrainConfig],
    train_set: &[Sample],
    test_set: &[Sample],
    threads: usize,
) -> Vec<Result<RunHistory>> {
    let threads = threads.max(1);
    if threads == 1 {
        return configs.iter().map(|c| train_run(c, train_set, test_set)).collect();
    }
    let mut results: Vec<Option<Result<RunHistory>>> = (0..configs.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in configs.chunks(threads).enumerate() {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|c| s.spawn(move || train_run(c, train_set, test_set)))
                .collect();
            for (i, h) in handles.into_iter().enumerate() {
                results[chunk_idx * threads + i] = Some(h.join().expect("training thread panicked"));
            }
        });
    }
    results.into_iter().map(|r| r.expect("every run executed")).collect()
}

/// Builds a report from already-computed histories.
pub fn summarize(
    baseline_cfg: &TrainConfig,
    candidate_cfg: &TrainConfig,
    seeds: &[u64],
    baseline_runs: &[RunHistory],
    candidate_runs: &[RunHistory],
) -> Result<SpeedupReport> {
    if seeds.is_empty() || baseline_runs.len() != seeds.len() || candidate_runs.len() != seeds.len() {
        return Err(Error::Validation("one baseline and one candidate run per seed required".into()));
    }
    let finals = |runs: &[RunHistory]| -> Result<Vec<EpochRecord>> {
        runs.iter()
            .map(|r| {
                r.final_record()
                    .cloned()
                    .ok_or_else(|| Error::Validation("run has no epochs".into()))
            })
            .collect()
    };
    let b_final = finals(baseline_runs)?;
    let c_final = finals(candidate_runs)?;
    let b_ods: Vec<f64> = b_final.iter().map(|r| r.test_ods_f1).collect();
    let target_f1 = MeanStd::of(&b_ods).mean;
    let half_budget = baseline_cfg.epochs / 2;

    let per_seed: Vec<SeedRow> = seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let b = epochs_to_target(&baseline_runs[i], target_f1);
            let c = epochs_to_target(&candidate_runs[i], target_f1);
            SeedRow {
                seed,
                baseline_epochs_to_target: b,
                candidate_epochs_to_target: c,
                speedup_ratio: b.zip(c).map(|(b, c)| b as f64 / c as f64),
                baseline_final: b_final[i].clone(),
                candidate_final: c_final[i].clone(),
                success: c.is_some_and(|c| c <= half_budget),
            }
        })
        .collect();
    let success_fraction = per_seed.iter().filter(|r| r.success).count() as f64 / seeds.len() as f64;

    let b_mean = mean_history(baseline_runs);
    let c_mean = mean_history(candidate_runs);
    let b_epochs = epochs_to_target(&b_mean, target_f1);
    let c_epochs = epochs_to_target(&c_mean, target_f1);
    let stat = |v: &[EpochRecord], f: fn(&EpochRecord) -> f64| MeanStd::of(&v.iter().map(f).collect::<Vec<_>>());
    Ok(SpeedupReport {
        baseline_id: baseline_cfg.id(),
        candidate_id: candidate_cfg.id(),
        target_f1,
        baseline_epochs_to_target: b_epochs,
        candidate_epochs_to_target: c_epochs,
        speedup_ratio: b_epochs.zip(c_epochs).map(|(b, c)| b as f64 / c as f64),
        seeds: seeds.to_vec(),
        success_fraction,
        per_seed,
        baseline_final_ods_f1: stat(&b_final, |r| r.test_ods_f1),
        baseline_final_ois_f1: stat(&b_final, |r| r.test_ois_f1),
        candidate_final_ods_f1: stat(&c_final, |r| r.test_ods_f1),
        candidate_final_ois_f1: stat(&c_final, |r| r.test_ois_f1),
    })
}

/// Trains baseline and candidate on every seed and reports how quickly the
/// candidate reaches the baseline's mean final ODS-F1.
pub fn compare(
    baseline_cfg: &TrainConfig,
    candidate_cfg: &TrainConfig,
    seeds: &[u64],
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::Validation("compare needs at least one seed".into()));
    }
    let with_seed = |cfg: &TrainConfig, seed| TrainConfig { seed, ..cfg.clone() };
    let configs: Vec<TrainConfig> = seeds
        .iter()
        .flat_map(|&s| [with_seed(baseline_cfg, s), with_seed(candidate_cfg, s)])
        .collect();
    let mut results = run_many(&configs, train_set, test_set, thread_budget()).into_iter();
    let mut baseline_runs = Vec::with_capacity(seeds.len());
    let mut candidate_runs = Vec::with_capacity(seeds.len());
    for _ in seeds {
        baseline_runs.push(results.next().expect("baseline run")?);
        candidate_runs.push(results.next().expect("candidate run")?);
    }
    let report = summarize(baseline_cfg, candidate_cfg, seeds, &baseline_runs, &candidate_runs)?;
    Ok(Comparison {
        report,
        baseline_runs,
        candidate_runs,
    })
}

/// One comparison per `beta` against a shared Xie baseline trained once per seed.
///
/// The baseline keeps everything from `candidate_cfg` except the loss, which
/// becomes plain Xie-weighted cross-entropy.
pub fn sweep(
    candidate_cfg: &TrainConfig,
    betas: &[f64],
    seeds: &[u64],
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<Vec<SpeedupReport>> {
    if seeds.is_empty() {
        return Err(Error::Validation("sweep needs at least one seed".into()));
    }
    let family = candidate_cfg.weight.family;
    let candidates = betas
        .iter()
        .map(|&beta| {
            let f = family
                .with_beta(beta)
                .ok_or_else(|| Error::config("family", format!("`{}` has no beta to sweep", family.name())))?;
            let cfg = TrainConfig {
                weight: WeightSpec { family: f, ..candidate_cfg.weight },
                ..candidate_cfg.clone()
            };
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline_cfg = TrainConfig {
        weight: WeightSpec { family: WeightFamily::Xie, ..candidate_cfg.weight },
        holistic: HolisticConfig { a: 1.0, b: 0.0, ..candidate_cfg.holistic },
        ..candidate_cfg.clone()
    };

    let mut configs = Vec::with_capacity(seeds.len() * (1 + candidates.len()));
    for cfg in std::iter::once(&baseline_cfg).chain(&candidates) {
        configs.extend(seeds.iter().map(|&seed| TrainConfig { seed, ..cfg.clone() }));
    }
    let mut runs = run_many(&configs, train_set, test_set, thread_budget())
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let baseline_runs: Vec<RunHistory> = runs.by_ref().take(seeds.len()).collect();
    candidates
        .iter()
        .map(|cfg| {
            let cand: Vec<RunHistory> = runs.by_ref().take(seeds.len()).collect();
            summarize(&baseline_cfg, cfg, seeds, &baseline_runs, &cand)
        })
        .collect()
}

/// Seeds `base, base + 1, ...`.
pub fn seed_list(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}
