use std::path::Path;
use std::process::Command;

fn psoctseg(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_psoctseg")).args(args).output().expect("spawn psoctseg");
    assert!(out.status.success(), "psoctseg {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let critic = tmp.path().join("critic.ckpt");
    let run = tmp.path().join("run");
    let eval = tmp.path().join("eval");

    psoctseg(&["generate", "--count", "8", "--r", "16", "--a", "32", "--frames-per-patient", "2", "--seed", "3", "--out", p(&data)]);
    assert!(data.read_dir().unwrap().count() > 1);

    psoctseg(&["train-critic", "--data", p(&data), "--steps", "2", "--batch-size", "2", "--out", p(&critic)]);
    assert!(critic.exists());

    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 1\nbatch_size = 4\nb = 2\n").unwrap();
    psoctseg(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--critic", p(&critic), "--sigma", "norm2", "--lambda-bc", "0.5", "--out",
        p(&run),
    ]);
    for f in ["config.json", "split.json", "segnet.ckpt", "train_log.csv", "epochs.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["epochs"], 1);
    assert_eq!(saved["loss"]["b"], 2);
    assert_eq!(saved["loss"]["lambda_bc"], 0.5);

    for pp in ["on", "off"] {
        psoctseg(&[
            "evaluate", "--data", p(&data), "--model", p(&run.join("segnet.ckpt")), "--postprocess", pp, "--partition", "all", "--out",
            p(&eval),
        ]);
    }
    assert!(eval.join("frames.csv").exists());
    let md = psoctseg(&["report", p(&eval.join("report.json"))]);
    assert!(md.contains("| class |"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "not_a_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_psoctseg"))
        .args(["train", "--config", p(&cfg), "--data", p(tmp.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}

#[test]
fn missing_critic_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    psoctseg(&["generate", "--count", "6", "--r", "16", "--a", "32", "--frames-per-patient", "1", "--out", p(&data)]);
    let out = Command::new(env!("CARGO_BIN_EXE_psoctseg"))
        .args(["train", "--data", p(&data), "--epochs", "1", "--out", p(&tmp.path().join("run"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
