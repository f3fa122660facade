use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const QUICK: &str = "\
# small enough to run in a couple of seconds
pretrain_steps = 60
finetune_steps = 40
sparsity_end = 30
sparsity_interval = 10
train_examples = 64
eval_examples = 20
calib_batches = 2
calib_batch_size = 4
";

fn lfam(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("quick.cfg");
    if !cfg.exists() {
        fs::write(&cfg, QUICK).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_lfam"))
        .arg("--config")
        .arg(&cfg)
        .arg("--work-dir")
        .arg(dir.join("work"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stage_commands_chain_into_a_report() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train", "sparsify", "capture", "calibrate", "quantize", "amp", "pack", "evaluate"] {
        let o = lfam(dir.path(), &[cmd]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let o = lfam(dir.path(), &["report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("[summary]"));
    assert!(out.contains("row=KL\n"));
    assert!(dir.path().join("work/model.lfam").exists());

    let o = lfam(dir.path(), &["inspect", dir.path().join("work/model.lfam").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("compression ratio"), "{}", stdout(&o));
}

#[test]
fn run_matches_stage_by_stage_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = lfam(a.path(), &["run", "--set", "amp_k=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("KL+AMP(2)"));
    for cmd in ["train", "sparsify", "capture", "calibrate", "quantize", "amp", "pack"] {
        assert!(lfam(b.path(), &[cmd, "-s", "amp_k=2"]).status.success(), "{cmd}");
    }
    assert_eq!(
        fs::read(a.path().join("work/model.lfam")).unwrap(),
        fs::read(b.path().join("work/model.lfam")).unwrap()
    );
}

#[test]
fn evaluate_accepts_an_explicit_plan() {
    let dir = tempfile::tempdir().unwrap();
    assert!(lfam(dir.path(), &["run"]).status.success());
    let plan = fs::read_to_string(dir.path().join("work/plan.txt")).unwrap();
    let all_float = plan.replace(" int8 ", " float32 ");
    let path = dir.path().join("float.plan");
    fs::write(&path, all_float).unwrap();
    let o = lfam(dir.path(), &["evaluate", "--plan", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("logits_mse=0.0\n"), "{}", stdout(&o));
}

#[test]
fn config_overrides_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let o = lfam(dir.path(), &["config", "-s", "sparsity=0.3", "-s", "strategy=kl-admm"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("sparsity=0.3"), "{out}");
    assert!(out.contains("strategy=kl-admm"), "{out}");
    assert!(out.contains("pretrain_steps=60"), "{out}");
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = lfam(dir.path(), &["config", "-s", "sparsity"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("KEY=VALUE"));

    let o = lfam(dir.path(), &["config", "-s", "bogus=1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bogus"));

    // A stage without its inputs names itself.
    let o = lfam(dir.path(), &["pack"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `pack` failed"), "{}", stderr(&o));

    let o = lfam(dir.path(), &["inspect", "/nonexistent.lfam"]);
    assert!(!o.status.success());
}
