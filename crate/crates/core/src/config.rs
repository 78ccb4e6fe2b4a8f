//! Flat `key = value` run configuration shared by every CLI command.
//!
//! ```toml
//! family = "exp"
//! beta = 0.75
//! a = 20
//! b = 1
//! epochs = 30
//! grid = [0.25, 0.5, 0.75]
//! output_dir = "runs/exp"
//! ```
//!
//! Missing keys take the library defaults. Unknown keys, wrongly typed values
//! and keys that do not apply to the chosen family are errors naming the key.

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::bench::TrainConfig;
use crate::data::SynthConfig;
use crate::loss::{HolisticConfig, Reduction, WeightFamily, WeightSpec};
use crate::metrics::default_grid;
use crate::model::UNetConfig;
use crate::{Error, Result};

/// The penalty schedules swept by default: quartiles plus the finer octaves near 1.
pub const DEFAULT_BETAS: [f64; 10] = [0.25, 0.375, 0.5, 0.625, 0.75, 0.85, 0.875, 0.9, 0.95, 1.0];

const KEYS: &[&str] = &[
    "family",
    "beta",
    "gamma",
    "base",
    "q",
    "count_smoothing",
    "a",
    "b",
    "lambda",
    "reduction",
    "width",
    "height",
    "target_pos_rate",
    "n_cracks",
    "noise_sigma",
    "crack_intensity_delta",
    "data_seed",
    "train_count",
    "test_count",
    "lr",
    "batch_size",
    "steps_per_epoch",
    "epochs",
    "seed",
    "seeds",
    "depth",
    "base_channels",
    "probe_size",
    "grid",
    "betas",
    "output_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub synth: SynthConfig,
    pub train_count: usize,
    pub test_count: usize,
    /// Loss, optimizer, model and evaluation grid.
    pub train: TrainConfig,
    /// Number of shared seeds for comparisons, starting at `train.seed`.
    pub seeds: usize,
    pub betas: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train_count: 200,
            test_count: 50,
            train: TrainConfig::default(),
            seeds: 5,
            betas: DEFAULT_BETAS.to_vec(),
            output_dir: PathBuf::from("out"),
        }
    }
}

struct Reader {
    table: Table,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.table.remove(key)
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Float(v)) => Ok(Some(v)),
            Some(Value::Integer(v)) => Ok(Some(v as f64)),
            Some(other) => Err(type_err(key, "a number", &other)),
        }
    }

    fn uint(&mut self, key: &str) -> Result<Option<u64>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Integer(v)) if v >= 0 => Ok(Some(v as u64)),
            Some(other) => Err(type_err(key, "a non-negative integer", &other)),
        }
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.uint(key)?.map(|v| v as usize))
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(type_err(key, "a quoted string", &other)),
        }
    }

    fn f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .enumerate()
                .map(|(i, v)| match v {
                    Value::Float(x) => Ok(*x),
                    Value::Integer(x) => Ok(*x as f64),
                    other => Err(type_err(&format!("{key}[{i}]"), "a number", other)),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(other) => Err(type_err(key, "an array of numbers", &other)),
        }
    }
}

fn type_err(key: &str, expected: &str, got: &Value) -> Error {
    Error::config(key, format!("expected {expected}, found {}", got.type_str()))
}

fn reject(key: &str, family: &str) -> Error {
    Error::config(key, format!("does not apply to family `{family}`"))
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<syntax>", e.message().to_string()))?;
        if let Some(key) = table.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::config(key.clone(), "unknown key"));
        }
        if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::config(key.clone(), "nested tables are not supported"));
        }
        let mut r = Reader { table };
        let mut cfg = CliConfig::default();

        let family = r.string("family")?.unwrap_or_else(|| "xie".into());
        let beta = r.f64("beta")?;
        let gamma = r.f64("gamma")?;
        let base = r.f64("base")?;
        let q = r.f64("q")?;
        let wf = match family.as_str() {
            "xie" => {
                for (k, v) in [("beta", beta), ("gamma", gamma), ("base", base), ("q", q)] {
                    if v.is_some() {
                        return Err(reject(k, &family));
                    }
                }
                WeightFamily::Xie
            }
            "power" => {
                for (k, v) in [("base", base), ("q", q)] {
                    if v.is_some() {
                        return Err(reject(k, &family));
                    }
                }
                WeightFamily::Power {
                    beta: beta.unwrap_or(1.0),
                    gamma: gamma.unwrap_or(1.0),
                }
            }
            "log" => {
                for (k, v) in [("gamma", gamma), ("base", base), ("q", q)] {
                    if v.is_some() {
                        return Err(reject(k, &family));
                    }
                }
                WeightFamily::Log { beta: beta.unwrap_or(1.0) }
            }
            "exp" => {
                if q.is_some() {
                    return Err(reject("q", &family));
                }
                WeightFamily::Exp {
                    beta: beta.unwrap_or(1.0),
                    base: base.unwrap_or(10.0),
                    gamma: gamma.unwrap_or(1.0),
                }
            }
            "constant" => {
                for (k, v) in [("beta", beta), ("gamma", gamma), ("base", base)] {
                    if v.is_some() {
                        return Err(reject(k, &family));
                    }
                }
                WeightFamily::Constant { q: q.unwrap_or(1.0) }
            }
            other => {
                return Err(Error::config(
                    "family",
                    format!("unknown family `{other}` (xie, power, log, exp, constant)"),
                ))
            }
        };
        let smoothing = r.f64("count_smoothing")?.unwrap_or(1.0);
        cfg.train.weight = WeightSpec {
            family: wf,
            count_smoothing: smoothing,
        };

        let h = HolisticConfig::default();
        cfg.train.holistic = HolisticConfig {
            a: r.f64("a")?.unwrap_or(h.a),
            b: r.f64("b")?.unwrap_or(h.b),
            lambda: r.f64("lambda")?.unwrap_or(h.lambda),
        };
        if let Some(red) = r.string("reduction")? {
            cfg.train.reduction = match red.as_str() {
                "sum" => Reduction::Sum,
                "mean_per_pixel" => Reduction::MeanPerPixel,
                other => {
                    return Err(Error::config(
                        "reduction",
                        format!("unknown reduction `{other}` (sum, mean_per_pixel)"),
                    ))
                }
            };
        }

        let s = &mut cfg.synth;
        s.width = r.usize("width")?.unwrap_or(s.width);
        s.height = r.usize("height")?.unwrap_or(s.height);
        s.target_pos_rate = r.f64("target_pos_rate")?.unwrap_or(s.target_pos_rate);
        if let Some(range) = r.take("n_cracks") {
            s.n_cracks = match range.as_array().map(|a| a.as_slice()) {
                Some([Value::Integer(lo), Value::Integer(hi)]) if *lo >= 0 && *hi >= 0 => (*lo as usize, *hi as usize),
                _ => return Err(type_err("n_cracks", "[min, max] integers", &range)),
            };
        }
        s.noise_sigma = r.f64("noise_sigma")?.unwrap_or(s.noise_sigma);
        s.crack_intensity_delta = r.f64("crack_intensity_delta")?.unwrap_or(s.crack_intensity_delta);
        s.seed = r.uint("data_seed")?.unwrap_or(s.seed);
        cfg.train_count = r.usize("train_count")?.unwrap_or(cfg.train_count);
        cfg.test_count = r.usize("test_count")?.unwrap_or(cfg.test_count);

        let t = &mut cfg.train;
        t.lr = r.f64("lr")?.unwrap_or(t.lr);
        t.batch_size = r.usize("batch_size")?.unwrap_or(t.batch_size);
        t.steps_per_epoch = r.usize("steps_per_epoch")?.unwrap_or(t.steps_per_epoch);
        t.epochs = r.usize("epochs")?.unwrap_or(t.epochs);
        t.seed = r.uint("seed")?.unwrap_or(t.seed);
        t.probe_size = r.usize("probe_size")?.unwrap_or(t.probe_size);
        t.unet = UNetConfig {
            depth: r.usize("depth")?.unwrap_or(t.unet.depth),
            base_channels: r.usize("base_channels")?.unwrap_or(t.unet.base_channels),
            ..t.unet
        };
        t.eval_grid = r.f64_list("grid")?.unwrap_or_else(default_grid);
        cfg.seeds = r.usize("seeds")?.unwrap_or(cfg.seeds);
        cfg.betas = r.f64_list("betas")?.unwrap_or(cfg.betas);
        if let Some(dir) = r.string("output_dir")? {
            cfg.output_dir = PathBuf::from(dir);
        }
        debug_assert!(r.table.is_empty());

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks every section; the first violation wins.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        self.synth.check_divisible(self.train.unet.depth)?;
        if self.train_count == 0 {
            return Err(Error::config("train_count", "must be positive"));
        }
        if self.test_count == 0 {
            return Err(Error::config("test_count", "must be positive"));
        }
        if self.seeds == 0 {
            return Err(Error::config("seeds", "must be positive"));
        }
        if self.train.probe_size > self.train_count {
            return Err(Error::config("probe_size", "exceeds train_count"));
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(Error::config("betas", format!("beta {b} outside (0, 1]")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(CliConfig::parse("").unwrap(), CliConfig::default());
    }

    #[test]
    fn full_file() {
        let cfg = CliConfig::parse(
            r#"
            # holistic exponential run
            family = "exp"
            beta = 0.75
            a = 20
            b = 1
            lambda = 1.0
            width = 32
            height = 32
            target_pos_rate = 0.02
            n_cracks = [1, 2]
            train_count = 10
            test_count = 4
            epochs = 3
            seed = 9
            grid = [0.25, 0.5, 0.75]
            betas = [0.5, 1]
            output_dir = "runs/x"
            reduction = "mean_per_pixel"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.train.weight.family, WeightFamily::Exp { beta: 0.75, base: 10.0, gamma: 1.0 });
        assert_eq!(cfg.train.holistic, HolisticConfig { a: 20.0, b: 1.0, lambda: 1.0 });
        assert_eq!(cfg.train.reduction, Reduction::MeanPerPixel);
        assert_eq!((cfg.synth.width, cfg.synth.n_cracks), (32, (1, 2)));
        assert_eq!(cfg.train.eval_grid, vec![0.25, 0.5, 0.75]);
        assert_eq!(cfg.betas, vec![0.5, 1.0]);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/x"));
        assert_eq!(cfg.train.id(), "0.75_exp_20_wj");
    }

    fn key_of(text: &str) -> String {
        match CliConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{text}: {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of("colour = 1"), "colour");
        assert_eq!(key_of("beta = \"high\"\nfamily = \"exp\""), "beta");
        assert_eq!(key_of("family = \"exp\"\nbeta = 1.5"), "beta");
        assert_eq!(key_of("family = \"xie\"\nbeta = 0.5"), "beta");
        assert_eq!(key_of("family = \"exp\"\nq = 2"), "q");
        assert_eq!(key_of("family = \"cubic\""), "family");
        assert_eq!(key_of("lambda = 0"), "lambda");
        assert_eq!(key_of("epochs = -1"), "epochs");
        assert_eq!(key_of("grid = [0.5, \"x\"]"), "grid[1]");
        assert_eq!(key_of("grid = [0.5, 1.5]"), "eval_grid");
        assert_eq!(key_of("width = 30"), "width");
        assert_eq!(key_of("n_cracks = 3"), "n_cracks");
        assert_eq!(key_of("[section]\nx = 1"), "section");
        assert_eq!(key_of("a = = 1"), "<syntax>");
        assert_eq!(key_of("seeds = 0"), "seeds");
        assert_eq!(key_of("betas = [0]"), "betas");
    }
}
