use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "experiment.demo_count=4",
    "experiment.eval_episodes=2",
    "experiment.modalities=[\"vision_tactile\"]",
    "pretrain.epochs=1",
    "act.head_epochs=1",
    "act.finetune_steps=1",
    "diffusion.head_epochs=1",
    "diffusion.finetune_steps=1",
];

fn vitac(args: &[&str], overrides: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vitac"));
    cmd.args(args).env("RUST_LOG", "warn");
    for o in overrides {
        cmd.arg("--set").arg(o);
    }
    let out = cmd.output().expect("spawn vitac");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn collect_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(vitac(&["collect", "--out", p(&data)], TINY).status.success());
    assert!(data.join("index.json").exists());
    assert!(data.join("config.resolved.toml").exists());

    let dataset = format!("experiment.dataset=\"{}\"", p(&data));
    let mut layered: Vec<&str> = TINY.to_vec();
    layered.push(&dataset);

    let pre = dir.path().join("pre");
    assert!(vitac(&["pretrain", "--out", p(&pre)], &layered).status.success());
    assert!(pre.join("encoders.json").exists());
    assert!(pre.join("pretrain_loss.csv").exists());

    let run = dir.path().join("train");
    let enc = pre.join("encoders");
    let out = vitac(
        &["train", "--modality", "vision_tactile", "--encoders", p(&enc), "--out", p(&run)],
        &layered,
    );
    assert!(out.status.success());
    assert!(run.join("policy.json").exists());

    let eval = dir.path().join("eval");
    let ck = run.join("policy");
    let out = vitac(&["eval", "--modality", "vision_tactile", "--checkpoint", p(&ck), "--out", p(&eval)], &layered);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("cell,success_rate,median_strain,episodes,seed\n"), "{stdout}");
    assert!(eval.join("act_vision_tactile_pretrained.json").exists());
    assert!(eval.join("config.resolved.toml").exists());
}

#[test]
fn matrix_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("m");
    let cfg = dir.path().join("layer.toml");
    std::fs::write(&cfg, "[experiment]\npretrained = [false]\n").unwrap();
    let out = vitac(&["matrix", "--config", p(&cfg), "--out", p(&out_dir)], TINY);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(out_dir.join("matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.contains("act_vision_tactile_scratch"));
    let resolved = std::fs::read_to_string(out_dir.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("pretrained = [false]"));

    std::fs::remove_file(out_dir.join("matrix.csv")).unwrap();
    assert!(vitac(&["report", "--dir", p(&out_dir)], &[]).status.success());
    assert_eq!(std::fs::read_to_string(out_dir.join("matrix.csv")).unwrap(), csv);
}

#[test]
fn bad_override_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = vitac(&["collect", "--out", p(dir.path())], &["act.no_such_key=1"]);
    assert!(!out.status.success());
    let out = vitac(&["report", "--dir", p(dir.path())], &[]);
    assert!(!out.status.success());
}
