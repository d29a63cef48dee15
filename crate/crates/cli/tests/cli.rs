use std::path::Path;
use std::process::{Command, Output};

const TINY_REACH: &str = r#"
env.kind = "reach"
env.dims = 4
asa.kind = "rvq"
asa.codes = 8
asa.latent = 8
asa.hidden = 16
asa.epochs = 1
asa.min_steps = 40
asa.batch_size = 64
policy.width = 16
policy.layers = 1
policy.heads = 2
policy.context = 2
policy.head_hidden = 16
train.demos = 12
train.steps = 20
train.batch_size = 8
train.log_every = 5
train.eval_episodes = 6
train.sweep_values = [4, 8]
"#;

const TINY_GRID: &str = r#"
env.kind = "grid"
asa.kind = "semlang"
policy.width = 16
policy.layers = 1
policy.heads = 2
policy.context = 2
policy.head_hidden = 16
train.env_steps = 256
train.rollout_envs = 4
train.rollout_len = 8
train.log_every = 64
train.eval_episodes = 4
"#;

fn asa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asa"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = asa(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], dir: &Path) -> i32 {
    asa(args, dir).status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn reach_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = write_config(dir, "c.toml", TINY_REACH);
    let base = ["--config", cfg.as_str(), "--seed", "5", "--out", "run"];
    let mut stdout = String::new();
    for cmd in [
        "gen-demos",
        "train-codec",
        "train-bc",
        "eval",
        "inspect-codec",
        "sweep",
    ] {
        let mut args = vec![cmd];
        args.extend_from_slice(&base);
        stdout.push_str(&ok(&args, dir));
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.join("run"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files.push(("stdout".into(), stdout.into_bytes()));
    files
}

#[test]
fn reach_pipeline_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = reach_pipeline(a.path());
    let fb = reach_pipeline(b.path());
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for want in [
        "codec.bin",
        "demos.jsonl",
        "eval.toml",
        "metrics.csv",
        "policy.ckpt",
        "summary.toml",
        "sweep.csv",
    ] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
}

#[test]
fn seed_flag_changes_outputs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY_REACH);
    ok(
        &["gen-demos", "--config", &cfg, "--seed", "1", "--out", "a"],
        d.path(),
    );
    ok(
        &["gen-demos", "--config", &cfg, "--seed", "2", "--out", "b"],
        d.path(),
    );
    let a = std::fs::read(d.path().join("a/demos.jsonl")).unwrap();
    let b = std::fs::read(d.path().join("b/demos.jsonl")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn grid_policy_gradient_runs_and_repeats() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "g.toml", TINY_GRID);
    let first = ok(
        &["train-pg", "--config", &cfg, "--seed", "3", "--out", "a"],
        d.path(),
    );
    let second = ok(
        &["train-pg", "--config", &cfg, "--seed", "3", "--out", "b"],
        d.path(),
    );
    assert_eq!(first, second);
    assert!(first.contains("command = \"train-pg\""), "{first}");
    for f in ["metrics.csv", "policy.ckpt", "vocab.tsv"] {
        assert_eq!(
            std::fs::read(d.path().join("a").join(f)).unwrap(),
            std::fs::read(d.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let eval = ok(
        &["eval", "--config", &cfg, "--seed", "3", "--out", "a"],
        d.path(),
    );
    assert!(eval.contains("success_rate"), "{eval}");
}

#[test]
fn config_errors_exit_with_2() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    write_config(p, "bad.toml", "seed = 1\nasa.bogus = 3\n");
    write_config(p, "ok.toml", TINY_REACH);
    write_config(
        p,
        "mismatch.toml",
        "seed = 1\nenv.kind = \"reach\"\nasa.kind = \"semlang\"\n",
    );
    assert_eq!(code(&["gen-demos", "--config", "bad.toml"], p), 2);
    assert_eq!(
        code(&["gen-demos", "--config", "ok.toml"], p),
        2,
        "seed missing"
    );
    assert_eq!(
        code(&["gen-demos", "--config", "missing.toml", "--seed", "1"], p),
        2
    );
    assert_eq!(code(&["train-bc", "--config", "mismatch.toml"], p), 2);
    assert_eq!(code(&["train-bc", "--bogus-flag"], p), 2);
}

#[test]
fn data_errors_exit_with_3() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let cfg = write_config(p, "c.toml", TINY_REACH);
    assert_eq!(
        code(
            &["train-codec", "--config", &cfg, "--seed", "1", "--out", "x"],
            p
        ),
        3,
        "no demos"
    );
    ok(
        &["gen-demos", "--config", &cfg, "--seed", "1", "--out", "x"],
        p,
    );
    assert_eq!(
        code(
            &["train-bc", "--config", &cfg, "--seed", "1", "--out", "x"],
            p
        ),
        3,
        "no codec"
    );
    assert_eq!(
        code(&["eval", "--config", &cfg, "--seed", "1", "--out", "x"], p),
        3,
        "no checkpoint"
    );
    std::fs::write(p.join("x/demos.jsonl"), "{not json\n").unwrap();
    assert_eq!(
        code(
            &["train-codec", "--config", &cfg, "--seed", "1", "--out", "x"],
            p
        ),
        3,
        "corrupt demos"
    );
}

#[test]
fn diverging_training_exits_with_4() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let text = TINY_REACH.replace("asa.kind = \"rvq\"", "asa.kind = \"pred\"")
        + "train.lr = 1e300\ntrain.grad_clip = 0.0\ntrain.warmup = 0.0\n";
    let cfg = write_config(p, "c.toml", &text);
    ok(
        &["gen-demos", "--config", &cfg, "--seed", "1", "--out", "x"],
        p,
    );
    assert_eq!(
        code(
            &["train-bc", "--config", &cfg, "--seed", "1", "--out", "x"],
            p
        ),
        4
    );
}
