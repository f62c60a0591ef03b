use std::fs;
use std::path::Path;

use ris_cli::{config_hash, parse_config, run};

const TINY: &str = r#"
seed = 11

[system]
weights = [0.5, 0.5]
rho = 5e13

[channel]
ris_width = 4
ris_height = 4
users = 2
bs_antennas = 4
train_samples = 12
test_samples = 4

[model]
layers = 2
kernel = 5
hidden_maps = 4

[train]
lr_phase1 = 1e-3
lr_phase2 = 1e-4
epochs_phase1 = 2
epochs_phase2 = 2
batch_size = 4
wmmse_refresh_epochs = 1
stage_epochs = 2
kappa_cap = 0.2
penalty_threshold = 10.0

[eval]
gammas = [0.0, 0.1]
rhos = [1e13, 5e13]
baseline_steps = 5
"#;

fn cli(args: &[&str]) -> anyhow::Result<()> {
    let mut v = vec!["ris-muxer"];
    v.extend_from_slice(args);
    run(v)
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn pipeline_gen_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.display().to_string();
    let ch = out.join("channels.txt").display().to_string();
    let model = out.join("model.ckpt").display().to_string();

    cli(&["--config", &cfg, "--out", &out_s, "gen-channels"]).unwrap();
    cli(&[
        "--config",
        &cfg,
        "--out",
        &out_s,
        "train",
        "--channels",
        &ch,
    ])
    .unwrap();
    cli(&[
        "--config",
        &cfg,
        "--out",
        &out_s,
        "eval",
        "--channels",
        &ch,
        "--model",
        &model,
    ])
    .unwrap();
    cli(&[
        "--config",
        &cfg,
        "--out",
        &out_s,
        "robustness",
        "--channels",
        &ch,
        "--baseline",
        "random",
    ])
    .unwrap();
    cli(&[
        "--config",
        &cfg,
        "--out",
        &out_s,
        "tsnr-sweep",
        "--channels",
        &ch,
        "--model",
        &model,
    ])
    .unwrap();
    cli(&[
        "--config",
        &cfg,
        "--out",
        &out_s,
        "ecdf",
        "--channels",
        &ch,
        "--baseline",
        "alt-gradient",
    ])
    .unwrap();

    for f in [
        "gen-channels.manifest.json",
        "train.manifest.json",
        "train.trace.csv",
        "train.config.toml",
        "eval.records.csv",
        "eval.summary.csv",
        "robustness.summary.csv",
        "tsnr-sweep.summary.csv",
        "ecdf.ecdf.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary = fs::read_to_string(out.join("robustness.summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "{summary}");
    let trace = fs::read_to_string(out.join("train.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 5);

    let echoed = parse_config(&out.join("train.config.toml")).unwrap();
    assert_eq!(echoed.seed, 11);
    assert_eq!(echoed.channel.ris_width, 4);
}

#[test]
fn train_discrete_and_rate_region() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.display().to_string();
    let ch = out.join("channels.txt").display().to_string();
    let model = out.join("d.ckpt").display().to_string();

    cli(&["--config", &cfg, "--out", &out_s, "gen-channels"]).unwrap();
    cli(&[
        "--config",
        &cfg,
        "--out",
        &out_s,
        "train-discrete",
        "--channels",
        &ch,
        "--out-model",
        &model,
        "--codebook",
        "0,pi",
    ])
    .unwrap();
    let spec = format!("0.5,0.5={model}");
    // the default weight grid has five vectors; only one model is registered
    let err = cli(&[
        "--config",
        &cfg,
        "--out",
        &out_s,
        "rate-region",
        "--channels",
        &ch,
        "--model",
        &spec,
    ])
    .unwrap_err();
    assert!(
        format!("{err:#}").contains("no model registered"),
        "{err:#}"
    );

    cli(&[
        "--config",
        &cfg,
        "--out",
        &out_s,
        "eval",
        "--channels",
        &ch,
        "--model",
        &model,
        "--round",
        "0,pi",
    ])
    .unwrap();
    let records = fs::read_to_string(out.join("eval.records.csv")).unwrap();
    assert!(records.contains("fcn-rounded"));
}

#[test]
fn missing_channels_file_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_s = dir.path().join("run").display().to_string();
    let missing = dir.path().join("nope.txt").display().to_string();
    let err = cli(&[
        "--config",
        &cfg,
        "--out",
        &out_s,
        "train",
        "--channels",
        &missing,
    ])
    .unwrap_err();
    assert!(format!("{err:#}").contains(&missing), "{err:#}");
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[train]\nlr_phase1 = 0.0\n").unwrap();
    let err = cli(&["--config", &p.display().to_string(), "gen-channels"]).unwrap_err();
    assert!(format!("{err:#}").contains("lr_phase1"), "{err:#}");
}

#[test]
fn identical_inputs_give_identical_outputs_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut hashes = Vec::new();
    let mut channels = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        let out_s = out.display().to_string();
        cli(&[
            "--config",
            &cfg,
            "--out",
            &out_s,
            "--seed",
            "5",
            "gen-channels",
        ])
        .unwrap();
        let m: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(out.join("gen-channels.manifest.json")).unwrap(),
        )
        .unwrap();
        hashes.push(m["config_sha256"].as_str().unwrap().to_string());
        assert_eq!(m["seed"], 5);
        channels.push(fs::read(out.join("channels.txt")).unwrap());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(channels[0], channels[1]);

    let mut c = parse_config(Path::new(&cfg)).unwrap();
    let h = config_hash(&c);
    c.seed += 1;
    assert_ne!(h, config_hash(&c));
}
