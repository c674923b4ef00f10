//! End-to-end CLI checks with a deliberately tiny model configuration.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tamperloc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tamperloc")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_CONFIG: &str = r#"
[mae]
resolution = 32
patch_size = 8
encoder_depth = 1
decoder_depth = 1
dim = 16
decoder_dim = 8
heads = 2
mask_ratio = 0.75

[dssn]
stage_dims = [8, 16]
stage_downsample = [4, 2]
stage_heads = [1, 2]
sr_ratios = [2, 1]
decoder_dim = 16
fusion_feedforward = true
dual_stream = true

[prompt]
channels = [4, 8]
token_dim = 8

[train]
lr = 1e-3
weight_decay = 1e-5
batch_size = 4
max_epochs = 2
patience = 0
alpha = 0.5
seed = 0
grad_clip = 1.0
stage2_start_epoch = 0
detach_prompt = false

[train.flags]
use_dssn_dual = true
use_tapi = true
use_adaptive_decoder = true

[pretrain]
epochs = 2
batch_size = 4
lr = 1e-3
weight_decay = 1e-5
seed = 0

[gen]
seed = 0
resolution = 32
patch_size = 8
n_train = 6
n_val = 3
n_test = 3
authentic_frac = 0.0

[gen.texture_mix]
random_field = 0.4
gradient = 0.2
checker = 0.2
blob = 0.2

[gen.forge]
area_range = [0.05, 0.35]
feather_px = 2.0

jpeg_levels = [100, 50]
blur_levels = [0, 7]
"#;

fn write_tiny_config(dir: &Path) -> String {
    // top-level keys must precede tables in TOML; rebuild accordingly
    let mut text = String::from("jpeg_levels = [100, 50]\nblur_levels = [0, 7]\n");
    for line in TINY_CONFIG.lines() {
        if line.starts_with("jpeg_levels") || line.starts_with("blur_levels") {
            continue;
        }
        text.push_str(line);
        text.push('\n');
    }
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in [
        "gen-data",
        "pretrain-mae",
        "train",
        "eval",
        "robustness",
        "ablate",
    ] {
        let out = run(&[sub, "--help"]);
        assert_ok(&out);
        assert!(!out.stdout.is_empty());
    }
    assert_ok(&run(&["--help"]));
}

#[test]
fn eval_with_missing_checkpoint_fails_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("nope.ckpt.json");
    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope.ckpt.json"), "stderr: {stderr}");
}

#[test]
fn full_workflow_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();

    // gen-data: forged splits for training plus a real-only set for the prior
    assert_ok(&run(&["gen-data", "--out", data_s, "--config", &cfg]));
    assert!(data.join("manifest.json").exists());
    assert!(data.join("images").join("train_00000.png").exists());

    let real = dir.path().join("real");
    let real_s = real.to_str().unwrap();
    assert_ok(&run(&[
        "gen-data",
        "--out",
        real_s,
        "--config",
        &cfg,
        "--authentic-frac",
        "1.0",
        "--seed",
        "99",
    ]));

    let mae_ckpt = dir.path().join("mae.ckpt.json");
    assert_ok(&run(&[
        "pretrain-mae",
        "--data",
        real_s,
        "--out",
        mae_ckpt.to_str().unwrap(),
        "--config",
        &cfg,
    ]));
    assert!(mae_ckpt.exists());

    let model_ckpt = dir.path().join("model.ckpt.json");
    assert_ok(&run(&[
        "train",
        "--data",
        data_s,
        "--mae",
        mae_ckpt.to_str().unwrap(),
        "--out",
        model_ckpt.to_str().unwrap(),
        "--config",
        &cfg,
    ]));
    assert!(model_ckpt.exists());
    assert!(dir.path().join("model.ckpt.log.csv").exists());

    let metrics = dir.path().join("metrics.csv");
    let out = run(&[
        "eval",
        "--checkpoint",
        model_ckpt.to_str().unwrap(),
        "--data",
        data_s,
        "--split",
        "val",
        "--out",
        metrics.to_str().unwrap(),
        "--config",
        &cfg,
    ]);
    assert_ok(&out);
    let metrics_text = std::fs::read_to_string(&metrics).unwrap();
    assert!(metrics_text.contains("image_id,iou,f1,stage"));
    assert!(metrics_text.contains(",refined"));

    let rob = dir.path().join("robustness.csv");
    let plot = dir.path().join("robustness.svg");
    assert_ok(&run(&[
        "robustness",
        "--checkpoint",
        model_ckpt.to_str().unwrap(),
        "--data",
        data_s,
        "--split",
        "val",
        "--out",
        rob.to_str().unwrap(),
        "--plot",
        plot.to_str().unwrap(),
        "--config",
        &cfg,
    ]));
    let rob_text = std::fs::read_to_string(&rob).unwrap();
    assert!(rob_text.contains("kind,level,mean_iou,mean_f1,n_images"));
    assert_eq!(rob_text.lines().filter(|l| l.starts_with("jpeg")).count(), 2);
    assert!(plot.exists());

    // Perturbation must never touch dataset files: manifest checksums still hold.
    assert_ok(&run(&["eval", "--checkpoint", model_ckpt.to_str().unwrap(), "--data", data_s, "--split", "val", "--config", &cfg]));
}

#[test]
fn ablate_emits_four_rows_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    assert_ok(&run(&["gen-data", "--out", data_s, "--config", &cfg]));
    let real = dir.path().join("real");
    let real_s = real.to_str().unwrap();
    assert_ok(&run(&[
        "gen-data", "--out", real_s, "--config", &cfg, "--authentic-frac", "1.0", "--seed", "99",
    ]));
    let mae_ckpt = dir.path().join("mae.ckpt.json");
    assert_ok(&run(&[
        "pretrain-mae",
        "--data",
        real_s,
        "--out",
        mae_ckpt.to_str().unwrap(),
        "--config",
        &cfg,
    ]));

    let table = dir.path().join("ablation.csv");
    assert_ok(&run(&[
        "ablate",
        "--data",
        data_s,
        "--mae",
        mae_ckpt.to_str().unwrap(),
        "--out",
        table.to_str().unwrap(),
        "--seeds",
        "1",
        "--epochs",
        "1",
        "--config",
        &cfg,
    ]));
    let text = std::fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("index") && !l.is_empty())
        .collect();
    assert_eq!(rows.len(), 4, "{text}");
    for idx in ["I,", "II,", "III,", "IV,"] {
        assert!(rows.iter().any(|r| r.starts_with(idx)), "{text}");
    }
}
