use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
family = "exp"
beta = 0.75
width = 16
height = 16
target_pos_rate = 0.05
n_cracks = [1, 2]
train_count = 6
test_count = 2
epochs = 2
steps_per_epoch = 2
depth = 1
base_channels = 2
probe_size = 2
seeds = 2
"#;

fn crackloss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackloss"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_passes_and_reports_each_suite() {
    let o = crackloss(&["gradcheck", "--instances", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    for suite in ["wce_grad_logits", "jaccard_distance_grad", "conv2d", "relu", "maxpool2x2", "deconv2x2s2", "concat", "unet_depth1"] {
        assert!(out.contains(suite), "{suite} missing from\n{out}");
    }
    assert!(out.contains("max_rel_err="));
}

#[test]
fn synth_writes_manifest_and_pgms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("data");
    let o = crackloss(&["synth", "--config", &cfg, "--out", out.to_str().unwrap(), "--count", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("positive rate"));
    let manifest: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.len(), 5);
    let samples = crackloss::data::load_dataset(&out.join("manifest.json")).unwrap();
    assert_eq!(samples.len(), 5);
    assert_eq!(samples[0].image.shape(), &[1, 16, 16]);
}

#[test]
fn synth_default_rate_is_printed_in_band() {
    let dir = tempfile::tempdir().unwrap();
    let o = crackloss(&["synth", "--out", dir.path().to_str().unwrap(), "--count", "100"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let rate: f64 = out
        .split("positive rate ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0055..=0.0165).contains(&rate), "{out}");
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("sub");
    let o = crackloss(&["synth", "--out", target.to_str().unwrap(), "--count", "2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_1_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "family = \"exp\"\nbeta = 3\n");
    let o = crackloss(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`beta`"), "{}", stderr(&o));
    assert!(!dir.path().join("history.csv").exists());

    let missing = dir.path().join("nope.toml");
    let o = crackloss(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = crackloss(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "4"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let csv = std::fs::read(a.join("history.csv")).unwrap();
    assert_eq!(csv, std::fs::read(b.join("history.csv")).unwrap());
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    let net = crackloss::model::checkpoint::load(&a.join("model.ckpt")).unwrap();
    assert_eq!(net.config().depth, 1);
    assert!(a.join("history.json").exists());
    let leftovers: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn eval_of_masks_against_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = crackloss(&["synth", "--out", data.to_str().unwrap(), "--count", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let masks = data.join("masks");
    let o = crackloss(&["eval", masks.to_str().unwrap(), masks.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[6], "1.000000");
    assert_eq!(row[9], "1.000000");
    assert_eq!(stdout(&o), csv);
}

#[test]
fn eval_with_missing_mask_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    crackloss(&["synth", "--out", data.to_str().unwrap(), "--count", "2"]);
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = crackloss(&["eval", data.join("masks").to_str().unwrap(), empty.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("eval.csv").exists());
}

#[test]
fn sweep_writes_one_row_per_beta_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = crackloss(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--betas", "0.5,1"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        std::fs::read_to_string(out.join("sweep.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.5,0.5_exp,wce_xie,"));
    assert!(lines[2].starts_with("1,1_exp,wce_xie,"));
}

#[test]
fn sweep_needs_a_family_with_beta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("family = \"exp\"\nbeta = 0.75", "family = \"xie\""));
    let o = crackloss(&["sweep", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
