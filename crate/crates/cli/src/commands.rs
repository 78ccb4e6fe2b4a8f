use std::fmt;
use std::path::{Path, PathBuf};

use crackloss::bench::{seed_list, sweep, train_run_with_model, SpeedupReport};
use crackloss::config::CliConfig;
use crackloss::data::pgm::{self, PgmImage};
use crackloss::data::{
    binarize_gt, load_dataset, load_pgm, manifest_json, positive_rate, synth_generate, ManifestEntry, Sample,
};
use crackloss::gradcheck;
use crackloss::metrics::{evaluate, EvalReport};
use crackloss::model::checkpoint;
use crackloss::Error;

use crate::output::{ensure_dir, write_atomic};
use crate::{Cli, Command};

#[derive(Debug)]
pub enum Failure {
    Lib(Error),
    Gradcheck(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Gradcheck(names) => write!(f, "gradient check failed: {}", names.join(", ")),
        }
    }
}

impl Failure {
    /// 1 for bad configuration or inputs, 2 for I/O, 3 for numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Gradcheck(_) => 3,
            Failure::Lib(e) => match e {
                Error::Io { .. } | Error::Parse { .. } => 2,
                Error::Numerical(_) => 3,
                _ => 1,
            },
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn load_config(cli: &Cli) -> Result<CliConfig> {
    let mut cfg = match &cli.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(n) = cli.seeds {
        cfg.seeds = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gradcheck { instances } => {
            let seed = cli.seed.unwrap_or(0);
            gradcheck_cmd(*instances, seed)
        }
        Command::Synth { count } => {
            let cfg = load_config(&cli)?;
            synth_cmd(&cfg, count.unwrap_or(cfg.train_count + cfg.test_count))
        }
        Command::Train { train, test, timing } => {
            let cfg = load_config(&cli)?;
            let data = match (train, test) {
                (Some(tr), Some(te)) => Some((tr.as_path(), te.as_path())),
                _ => None,
            };
            train_cmd(&cfg, data, *timing)
        }
        Command::Eval { probs_dir, masks_dir } => {
            let cfg = load_config(&cli)?;
            eval_cmd(&cfg, probs_dir, masks_dir)
        }
        Command::Sweep { betas } => {
            let mut cfg = load_config(&cli)?;
            if let Some(b) = betas {
                cfg.betas = b.clone();
                cfg.validate()?;
            }
            sweep_cmd(&cfg)
        }
    }
}

fn gradcheck_cmd(instances: usize, seed: u64) -> Result<()> {
    let reports = gradcheck::run_all(instances, seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} instances={:<4} max_rel_err={:.3e} tol={:.0e} {verdict}",
            r.name, r.instances, r.max_rel_err, r.tolerance
        );
        if !r.passed() {
            failed.push(r.name.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gradcheck(failed))
    }
}

fn pgm_bytes(t: &crackloss::Tensor) -> Result<Vec<u8>> {
    Ok(pgm::encode(&PgmImage::from_tensor(t)?))
}

fn synth_cmd(cfg: &CliConfig, count: usize) -> Result<()> {
    let samples = synth_generate(&cfg.synth, count)?;
    let out = &cfg.output_dir;
    ensure_dir(&out.join("images"))?;
    ensure_dir(&out.join("masks"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let entry = ManifestEntry {
            image_path: format!("images/{i:05}.pgm"),
            mask_path: format!("masks/{i:05}.pgm"),
        };
        write_atomic(&out.join(&entry.image_path), &pgm_bytes(&s.image)?)?;
        write_atomic(&out.join(&entry.mask_path), &pgm_bytes(&s.mask)?)?;
        entries.push(entry);
    }
    // The manifest goes last: it only ever lists complete pairs.
    write_atomic(&out.join("manifest.json"), manifest_json(&entries).as_bytes())?;
    println!(
        "wrote {} pairs to {}; positive rate {:.6} (target {})",
        entries.len(),
        out.display(),
        positive_rate(&samples),
        cfg.synth.target_pos_rate
    );
    Ok(())
}

fn datasets(cfg: &CliConfig, manifests: Option<(&Path, &Path)>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    Ok(match manifests {
        Some((train, test)) => (load_dataset(train)?, load_dataset(test)?),
        None => {
            let mut all = synth_generate(&cfg.synth, cfg.train_count + cfg.test_count)?;
            let test = all.split_off(cfg.train_count);
            (all, test)
        }
    })
}

fn train_cmd(cfg: &CliConfig, manifests: Option<(&Path, &Path)>, timing: bool) -> Result<()> {
    let (train, test) = datasets(cfg, manifests)?;
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let run = train_run_with_model(&cfg.train, &train, &test)?;
    write_atomic(&out.join("history.csv"), run.history.to_csv(timing).as_bytes())?;
    write_atomic(&out.join("history.json"), run.history.to_json().as_bytes())?;
    write_atomic(&out.join("model.ckpt"), &checkpoint::encode(&run.model))?;
    if let Some(last) = run.history.final_record() {
        println!(
            "{} seed {}: epoch {} loss {:.4} jaccard {:.4} ods_f1 {:.4} ois_f1 {:.4}",
            cfg.train.id(),
            cfg.train.seed,
            last.epoch,
            last.mean_train_loss,
            last.train_jaccard,
            last.test_ods_f1,
            last.test_ois_f1
        );
    }
    Ok(())
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if path.extension().is_some_and(|e| e == "pgm") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn eval_cmd(cfg: &CliConfig, probs_dir: &Path, masks_dir: &Path) -> Result<()> {
    let files = pgm_files(probs_dir)?;
    if files.is_empty() {
        return Err(Error::Validation(format!("no .pgm files in {}", probs_dir.display())).into());
    }
    let mut probs = Vec::with_capacity(files.len());
    let mut masks = Vec::with_capacity(files.len());
    for f in &files {
        probs.push(load_pgm(f)?);
        let name = f.file_name().expect("listed files have names");
        masks.push(binarize_gt(&load_pgm(&masks_dir.join(name))?, 0.5));
    }
    let report: EvalReport = evaluate(&probs, &masks, &cfg.train.eval_grid)?;
    let csv = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row("eval", None, None, None));
    print!("{csv}");
    ensure_dir(&cfg.output_dir)?;
    write_atomic(&cfg.output_dir.join("eval.csv"), csv.as_bytes())?;
    write_atomic(&cfg.output_dir.join("eval.json"), report.to_json().as_bytes())?;
    Ok(())
}

const SWEEP_HEADER: &str = "beta,candidate,baseline,target_f1,baseline_epochs,candidate_epochs,speedup,success_fraction,candidate_ods_f1_mean,candidate_ods_f1_std,candidate_ois_f1_mean,candidate_ois_f1_std,baseline_ods_f1_mean,baseline_ods_f1_std";

fn sweep_row(beta: f64, r: &SpeedupReport) -> String {
    let opt = |v: Option<usize>| v.map(|e| e.to_string()).unwrap_or_default();
    format!(
        "{beta},{},{},{:.6},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        r.candidate_id,
        r.baseline_id,
        r.target_f1,
        opt(r.baseline_epochs_to_target),
        opt(r.candidate_epochs_to_target),
        r.speedup_ratio.map(|s| format!("{s:.6}")).unwrap_or_default(),
        r.success_fraction,
        r.candidate_final_ods_f1.mean,
        r.candidate_final_ods_f1.std,
        r.candidate_final_ois_f1.mean,
        r.candidate_final_ois_f1.std,
        r.baseline_final_ods_f1.mean,
        r.baseline_final_ods_f1.std,
    )
}

fn sweep_cmd(cfg: &CliConfig) -> Result<()> {
    let (train, test) = datasets(cfg, None)?;
    let seeds = seed_list(cfg.train.seed, cfg.seeds);
    let reports = sweep(&cfg.train, &cfg.betas, &seeds, &train, &test)?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for (beta, r) in cfg.betas.iter().zip(&reports) {
        csv.push_str(&sweep_row(*beta, r));
        csv.push('\n');
    }
    print!("{csv}");
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    ensure_dir(&cfg.output_dir)?;
    write_atomic(&cfg.output_dir.join("sweep.csv"), csv.as_bytes())?;
    write_atomic(&cfg.output_dir.join("sweep.json"), json.as_bytes())?;
    Ok(())
}
