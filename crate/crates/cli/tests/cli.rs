use std::path::{Path, PathBuf};
use std::process::Command;

use pixelfold_cli::checks::{run_scope, Scope};
use pixelfold_cli::config::{resolve_out_root, DatasetSpec, RunConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pixelfold"))
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn shipped_configs_load_and_validate() {
    for name in ["toy.toml", "reference.toml"] {
        let run = RunConfig::load(&config_path(name)).unwrap();
        run.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn the_config_blob_round_trips_identically() {
    let run = RunConfig::load(&config_path("toy.toml")).unwrap();
    let blob = run.to_blob().unwrap();
    let again = RunConfig::from_blob(&blob).unwrap().to_blob().unwrap();
    assert_eq!(blob, again);
}

#[test]
fn unknown_config_sections_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let mut text = std::fs::read_to_string(config_path("toy.toml")).unwrap();
    text.push_str("\n[extra]\nfoo = 1\n");
    std::fs::write(&path, text).unwrap();
    assert!(RunConfig::load(&path).is_err());
}

#[test]
fn synthetic_dataset_specs_build_at_the_discriminator_resolution() {
    let spec = DatasetSpec::Blobs { count: 3, seed: 9 };
    let data = spec.build::<f32>(16).unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(data.resolution(), 16);
}

#[test]
fn out_root_resolution_prefers_flag_then_config_then_environment() {
    let flag = Some(PathBuf::from("from-flag"));
    let cfg = PathBuf::from("from-config");
    assert_eq!(resolve_out_root(flag, Some(&cfg)), PathBuf::from("from-flag"));
    assert_eq!(resolve_out_root(None, Some(&cfg)), PathBuf::from("from-config"));
    std::env::set_var("PIXELFOLD_OUT", "from-env");
    assert_eq!(resolve_out_root(None, None), PathBuf::from("from-env"));
    std::env::remove_var("PIXELFOLD_OUT");
    assert_eq!(resolve_out_root(None, None), PathBuf::from("runs"));
}

#[test]
fn help_lists_every_subcommand_and_unknown_flags_fail() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["train", "generate", "interpolate", "mix", "trace", "cost", "gradcheck"] {
        assert!(text.contains(sub), "help does not mention {sub}");
    }

    let out = bin()
        .args(["trace", "--config"])
        .arg(config_path("toy.toml"))
        .arg("--definitely-not-a-flag")
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn trace_and_cost_agree_on_the_toy_layout() {
    let trace = bin().args(["trace", "--config"]).arg(config_path("toy.toml")).output().unwrap();
    assert!(trace.status.success());
    let text = String::from_utf8(trace.stdout).unwrap();
    assert!(text.contains("stage0.folding"));
    assert!(text.contains("stage1.to_rgb"));

    let cost = bin()
        .args(["cost", "--verify", "--config"])
        .arg(config_path("toy.toml"))
        .output()
        .unwrap();
    assert!(cost.status.success());
    let text = String::from_utf8(cost.stdout).unwrap();
    assert!(text.contains("verified: instrumented forward matches"));
}

#[test]
fn short_training_runs_are_reproducible_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let out = bin()
            .args(["train", "--steps", "3", "--batch-size", "4", "--checkpoint-every", "2"])
            .arg("--config")
            .arg(config_path("toy.toml"))
            .arg("--out")
            .arg(dir.path().join(run))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["logs/train.log", "ckpt/step000002.ckpt", "ckpt/step000003.ckpt"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn sampling_commands_are_deterministic_and_validate_their_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--steps", "1", "--batch-size", "4"])
        .arg("--config")
        .arg(config_path("toy.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("ckpt/step000001.ckpt");

    let mut images = Vec::new();
    for run in ["g1", "g2"] {
        let out = bin()
            .args(["generate", "--count", "1", "--seed", "5", "--stages"])
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--out")
            .arg(dir.path().join(run))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        images.push(std::fs::read(dir.path().join(run).join("samples/sample000.png")).unwrap());
    }
    assert_eq!(images[0], images[1]);
    assert!(dir.path().join("g1/samples/sample000_stage1.png").exists());

    let out = bin()
        .args(["interpolate", "--frames", "1"])
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.path().join("i"))
        .output()
        .unwrap();
    assert!(!out.status.success(), "one frame cannot include both endpoints");

    let out = bin()
        .args(["mix", "--stages", "7"])
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.path().join("m"))
        .output()
        .unwrap();
    assert!(!out.status.success(), "stage 7 exceeds the toy stage count");
}

#[test]
fn the_folding_checks_pass_and_fault_injection_is_loud() {
    let clean = run_scope(Scope::Folding, false).unwrap();
    assert!(!clean.is_empty());
    assert!(clean.iter().all(|o| o.passed()));

    let faulted = run_scope(Scope::Losses, true).unwrap();
    assert!(faulted.iter().any(|o| !o.passed()), "injected fault went unnoticed");
}
