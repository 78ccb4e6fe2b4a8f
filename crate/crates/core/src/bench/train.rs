use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, stack, Sample};
use crate::loss::{holistic, jaccard_probs, soft_jaccard, HolisticConfig, Reduction, WeightFamily, WeightSpec};
use crate::metrics::{default_grid, evaluate, EvalReport};
use crate::model::{adam_step, he_init, AdamState, UNet, UNetConfig};
use crate::{Error, Result, SeededRng, Tensor};

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weight: WeightSpec,
    pub holistic: HolisticConfig,
    pub reduction: Reduction,
    pub lr: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub unet: UNetConfig,
    pub eval_grid: Vec<f64>,
    /// Number of leading training samples used for the Jaccard probe.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weight: WeightSpec::smoothed(WeightFamily::Xie),
            holistic: HolisticConfig::default(),
            reduction: Reduction::Sum,
            lr: 3e-4,
            batch_size: 2,
            steps_per_epoch: 50,
            epochs: 30,
            seed: 0,
            unet: UNetConfig::default(),
            eval_grid: default_grid(),
            probe_size: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weight.validate()?;
        self.holistic.validate()?;
        self.unet.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("steps_per_epoch", self.steps_per_epoch),
            ("probe_size", self.probe_size),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.eval_grid.is_empty() {
            return Err(Error::config("eval_grid", "must not be empty"));
        }
        if let Some(t) = self.eval_grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::config("eval_grid", format!("threshold {t} outside (0, 1)")));
        }
        if self.eval_grid.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("eval_grid", "must be sorted ascending"));
        }
        Ok(())
    }

    /// Short label in the style `wce_xie`, `0.75_exp`, `0.75_exp_20_wj`.
    pub fn id(&self) -> String {
        let mut id = match self.weight.family {
            WeightFamily::Xie => "wce_xie".to_string(),
            WeightFamily::Constant { q } => format!("{q}_const"),
            f => format!("{}_{}", f.beta().unwrap_or(1.0), f.name()),
        };
        if self.holistic.b > 0.0 {
            id.push_str(&format!("_{}_wj", self.holistic.a));
        }
        id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub train_jaccard: f64,
    pub test_ods_f1: f64,
    pub test_ois_f1: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

impl RunHistory {
    pub const CSV_HEADER: &'static str = "epoch,loss,jaccard,ods_f1,ois_f1,seconds";

    /// CSV trace. With `timing == false` the `seconds` column is left empty so
    /// the file depends only on config and seed.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let secs = if timing { format!("{:.3}", r.wall_seconds) } else { String::new() };
            out.push_str(&format!(
                "{},{:.10},{:.10},{:.10},{:.10},{secs}\n",
                r.epoch, r.mean_train_loss, r.train_jaccard, r.test_ods_f1, r.test_ois_f1
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn ods_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.test_ods_f1).collect()
    }
}

/// Result of [`train_run_with_model`]: the trace plus the trained network.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub history: RunHistory,
    pub model: UNet,
}

fn check_dataset(name: &str, samples: &[Sample], unet: &UNetConfig) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Validation(format!("{name} set is empty")))?;
    let s = first.image.shape();
    if s[0] != unet.input_channels {
        return Err(Error::Validation(format!(
            "{name} images have {} channels, network expects {}",
            s[0], unet.input_channels
        )));
    }
    unet.check_input(s[1], s[2])
}

/// Sigmoid probability maps `(H, W)` for every sample.
pub fn predict_probs(net: &UNet, samples: &[Sample]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(8) {
        let batch = stack(samples, chunk)?;
        let logits = net.predict(&batch.images)?;
        let s = logits.shape();
        let hw = s[1] * s[2];
        for (i, _) in chunk.iter().enumerate() {
            let z = Tensor::from_parts(vec![s[1], s[2]], logits.data()[i * hw..(i + 1) * hw].to_vec());
            out.push(jaccard_probs(&z));
        }
    }
    Ok(out)
}

/// Evaluates ODS/OIS of `net` on `samples`.
pub fn evaluate_model(net: &UNet, samples: &[Sample], grid: &[f64]) -> Result<EvalReport> {
    let probs = predict_probs(net, samples)?;
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    evaluate(&probs, &masks, grid)
}

/// Mean of per-image soft Jaccard indices over the probe samples.
pub fn probe_jaccard(net: &UNet, probe: &[Sample], lambda: f64) -> Result<f64> {
    let probs = predict_probs(net, probe)?;
    let mut total = 0.0;
    for (p, s) in probs.iter().zip(probe) {
        total += soft_jaccard(p, &s.mask, lambda)?;
    }
    Ok(total / probe.len() as f64)
}

pub fn train_run(cfg: &TrainConfig, train_set: &[Sample], test_set: &[Sample]) -> Result<RunHistory> {
    train_run_with_model(cfg, train_set, test_set).map(|r| r.history)
}

/// Trains from a seeded He initialization for `epochs * steps_per_epoch`
/// Adam steps, scoring the test set and the Jaccard probe after each epoch.
pub fn train_run_with_model(cfg: &TrainConfig, train_set: &[Sample], test_set: &[Sample]) -> Result<TrainedRun> {
    cfg.validate()?;
    check_dataset("training", train_set, &cfg.unet)?;
    check_dataset("test", test_set, &cfg.unet)?;

    let root = SeededRng::new(cfg.seed);
    let mut net = he_init(cfg.unet, &mut root.derive(0))?;
    let mut adam = AdamState::new(net.params());
    let mut batches = batch_iter(train_set, cfg.batch_size, root.derive(1))?;
    let probe = &train_set[..cfg.probe_size.min(train_set.len())];

    let start = Instant::now();
    let mut history = RunHistory::default();
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for step in 1..=cfg.steps_per_epoch {
            let batch = batches.next().expect("endless batch stream");
            let logits = net.forward(&batch.images)?;
            let out = holistic(&logits, &batch.masks, &cfg.weight, &cfg.holistic, cfg.reduction)
                .map_err(|e| match e {
                    Error::Numerical(msg) => {
                        Error::Numerical(format!("epoch {epoch}, step {step}: {msg}"))
                    }
                    other => other,
                })?;
            if !out.value.is_finite() || out.grad_logits.data().iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            let grads = net.backward(&out.grad_logits)?;
            adam_step(net.params_mut(), &grads, &mut adam, cfg.lr)?;
            if net.params().iter().any(|p| p.kernels.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical(format!(
                    "non-finite parameters at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += out.value;
        }
        net.clear_cache();
        let report = evaluate_model(&net, test_set, &cfg.eval_grid)?;
        history.records.push(EpochRecord {
            epoch,
            mean_train_loss: loss_sum / cfg.steps_per_epoch as f64,
            train_jaccard: probe_jaccard(&net, probe, cfg.holistic.lambda)?,
            test_ods_f1: report.ods.f1,
            test_ois_f1: report.ois.f1,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainedRun { history, model: net })
}

/// First epoch whose test ODS-F1 reaches `target_f1`.
pub fn epochs_to_target(history: &RunHistory, target_f1: f64) -> Option<usize> {
    history
        .records
        .iter()
        .find(|r| r.test_ods_f1 >= target_f1)
        .map(|r| r.epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn record(epoch: usize, f1: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            mean_train_loss: 1.0,
            train_jaccard: 0.5,
            test_ods_f1: f1,
            test_ois_f1: f1,
            wall_seconds: epoch as f64,
        }
    }

    fn tiny() -> (TrainConfig, Vec<Sample>, Vec<Sample>) {
        let synth = SynthConfig { width: 16, height: 16, target_pos_rate: 0.05, n_cracks: (1, 2), seed: 3, ..Default::default() };
        let data = synth_generate(&synth, 8).unwrap();
        let cfg = TrainConfig {
            weight: WeightSpec::smoothed(WeightFamily::exp10(0.75)),
            steps_per_epoch: 3,
            epochs: 2,
            unet: UNetConfig { depth: 1, base_channels: 2, input_channels: 1 },
            seed: 9,
            ..Default::default()
        };
        (cfg, data[..6].to_vec(), data[6..].to_vec())
    }

    #[test]
    fn epochs_to_target_examples() {
        let h = RunHistory { records: vec![record(1, 0.3), record(2, 0.6), record(3, 0.9)] };
        assert_eq!(epochs_to_target(&h, 0.0), Some(1));
        assert_eq!(epochs_to_target(&h, 1.01), None);
        assert_eq!(epochs_to_target(&h, 0.6), Some(2));
    }

    #[test]
    fn zero_epochs_empty_history() {
        let (mut cfg, train, test) = tiny();
        cfg.epochs = 0;
        assert!(train_run(&cfg, &train, &test).unwrap().records.is_empty());
    }

    #[test]
    fn runs_are_reproducible() {
        let (cfg, train, test) = tiny();
        let a = train_run(&cfg, &train, &test).unwrap();
        let b = train_run(&cfg, &train, &test).unwrap();
        assert_eq!(a.to_csv(false), b.to_csv(false));
        assert_eq!(a.records.len(), 2);
        assert!(a.records.windows(2).all(|w| w[1].wall_seconds >= w[0].wall_seconds));
    }

    #[test]
    fn probe_matches_offline_recomputation() {
        let (cfg, train, test) = tiny();
        let run = train_run_with_model(&cfg, &train, &test).unwrap();
        let bytes = crate::model::checkpoint::encode(&run.model);
        let restored = crate::model::checkpoint::decode(&bytes).unwrap();
        let offline = probe_jaccard(&restored, &train[..cfg.probe_size], cfg.holistic.lambda).unwrap();
        assert_eq!(offline, run.history.final_record().unwrap().train_jaccard);
    }

    #[test]
    fn ids() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.id(), "wce_xie");
        cfg.weight = WeightSpec::smoothed(WeightFamily::exp10(0.75));
        assert_eq!(cfg.id(), "0.75_exp");
        cfg.holistic = HolisticConfig { a: 20.0, b: 1.0, lambda: 1.0 };
        assert_eq!(cfg.id(), "0.75_exp_20_wj");
    }

    #[test]
    fn rejects_incompatible_data() {
        let (cfg, train, test) = tiny();
        let odd = synth_generate(&SynthConfig { width: 15, height: 15, target_pos_rate: 0.05, ..Default::default() }, 2).unwrap();
        assert!(train_run(&cfg, &odd, &test).is_err());
        assert!(train_run(&cfg, &train, &[]).is_err());
        let bad = TrainConfig { lr: 0.0, ..cfg };
        assert!(matches!(train_run(&bad, &train, &test), Err(Error::Config { .. })));
    }
}
