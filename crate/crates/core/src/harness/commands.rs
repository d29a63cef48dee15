//! One function per CLI subcommand. Each reads its inputs from the paths in
//! the config, writes its outputs under the output directory and returns a
//! summary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::env::{
    generate_demos, DemonstrationSet, EnvConfig, GridEnv, GridExpert, ReachEnv, ReachExpert,
};
use crate::error::{Error, Result};
use crate::policy::{sha256_hex, Binding, Policy, PolicyCheckpoint};
use crate::quant::{reconstruction_mse, train_codec, CodecReport, ResidualCodec};
use crate::rng::{stream, CODEC_INIT, DATA_SHUFFLE, POLICY_INIT};

use super::adapter::{artifact_ref, binding_from_header, header, policy_config, resolve, Resolved};
use super::bc::{train_bc, BcConfig, BcData};
use super::config::{ExperimentConfig, SweepAxis};
use super::eval::{evaluate, EvalReport};
use super::metrics::{MetricsLog, Summary};
use super::pg::{train_pg, PgConfig};

pub const SUMMARY_FILE: &str = "summary.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.toml";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "axis,value,holdout_mse,success,seed";

/// Environments evaluated per batched policy call.
const EVAL_BATCH: usize = 50;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub summary: Summary,
    pub files: Vec<PathBuf>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(path.to_path_buf())
}

fn read(path: &Path, what: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{what} {}: {e}", path.display()),
        ))
    })
}

pub fn read_demos(path: &Path) -> Result<DemonstrationSet> {
    let bytes = read(path, "demonstrations")?;
    DemonstrationSet::read(&bytes[..])
}

/// Rolls out the scripted expert of `env` for `n` successful episodes.
pub fn make_demos(env: &EnvConfig, n: usize, seed: u64) -> Result<DemonstrationSet> {
    match env {
        EnvConfig::Reach(c) => generate_demos(
            &mut ReachEnv::new(c.clone()),
            &mut ReachExpert::default(),
            n,
            seed,
        ),
        EnvConfig::Grid(c) => {
            generate_demos(&mut GridEnv::new(c.clone()), &mut GridExpert, n, seed)
        }
    }
}

pub fn gen_demos(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let demos = make_demos(&cfg.env, cfg.train.demos, cfg.seed()?)?;
    let path = write(&cfg.demos_path(), demos.to_jsonl().as_bytes())?;
    let mut s = Summary::default();
    s.set("command", "gen-demos")
        .set("episodes", demos.len() as i64)
        .set("steps", demos.num_steps() as i64)
        .set("sha256", demos.checksum());
    Ok(Outcome {
        summary: s,
        files: vec![path],
    })
}

pub struct CodecFit {
    pub codec: ResidualCodec<f64>,
    pub report: CodecReport,
    pub train_mse: f64,
    pub holdout_mse: f64,
}

/// Trains a codec on the non-held-out episodes and measures reconstruction
/// error on the held-out ones.
pub fn fit_codec(cfg: &ExperimentConfig, demos: &DemonstrationSet, seed: u64) -> Result<CodecFit> {
    let bounds = cfg.env.action_space().as_box()?.clone();
    let (train, hold) = demos.split_holdout(cfg.asa.holdout);
    let train_actions = train.continuous_actions()?;
    let hold_actions = if hold.is_empty() {
        train_actions.clone()
    } else {
        hold.continuous_actions()?
    };
    let (codec, report) = train_codec(
        &train_actions,
        bounds,
        &cfg.asa.codec_config(),
        &mut stream(seed, CODEC_INIT, 0),
        &mut stream(seed, DATA_SHUFFLE, 0),
    )?;
    let train_mse = reconstruction_mse(&codec, &train_actions)?;
    let holdout_mse = reconstruction_mse(&codec, &hold_actions)?;
    Ok(CodecFit {
        codec,
        report,
        train_mse,
        holdout_mse,
    })
}

pub fn cmd_train_codec(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    if !cfg.asa.kind.uses_codec() {
        return Err(Error::Config(format!(
            "train-codec needs asa.kind vq or rvq, not {}",
            cfg.asa.kind.name()
        )));
    }
    let demos = read_demos(&cfg.demos_path())?;
    let fit = fit_codec(cfg, &demos, cfg.seed()?)?;
    let bytes = fit.codec.to_bytes();
    let path = write(&cfg.codec_path(), &bytes)?;
    let shape = fit.codec.shape();
    let mut s = Summary::default();
    s.set("command", "train-codec")
        .set("codebooks", shape.codebooks as i64)
        .set("codes", shape.codes as i64)
        .set("latent", shape.latent_dim as i64)
        .set("steps", fit.report.steps as i64)
        .set("epochs", fit.report.epochs as i64)
        .set("dead_code_resets", fit.report.dead_code_resets as i64)
        .set("final_loss", fit.report.final_loss)
        .set("train_mse", fit.train_mse)
        .set("holdout_mse", fit.holdout_mse)
        .set("sha256", sha256_hex(&bytes));
    Ok(Outcome {
        summary: s,
        files: vec![path],
    })
}

fn bc_config(cfg: &ExperimentConfig) -> BcConfig {
    let t = &cfg.train;
    BcConfig {
        steps: t.steps,
        batch_size: t.batch_size,
        lr: t.lr,
        warmup: t.warmup,
        weight_decay: t.weight_decay,
        grad_clip: t.grad_clip,
        log_every: t.log_every,
    }
}

/// Builds a fresh policy for the config's environment around `binding`.
pub fn new_policy(cfg: &ExperimentConfig, binding: Binding<f64>, seed: u64) -> Result<Policy<f64>> {
    let env = cfg.env.build();
    Policy::new(
        policy_config(cfg, env.as_ref()),
        binding,
        &mut stream(seed, POLICY_INIT, 0),
    )
}

/// Behaviour cloning followed by a greedy evaluation. Weights are rounded to
/// their stored precision before evaluating, so a reloaded checkpoint
/// behaves identically.
pub fn fit_bc(
    cfg: &ExperimentConfig,
    demos: &DemonstrationSet,
    binding: Binding<f64>,
    seed: u64,
) -> Result<(Policy<f64>, MetricsLog, EvalReport)> {
    let data = BcData::new(demos, &binding)?;
    let mut policy = new_policy(cfg, binding, seed)?;
    let mut log = train_bc(
        &mut policy,
        &data,
        &bc_config(cfg),
        &mut stream(seed, DATA_SHUFFLE, 1),
    )?;
    policy.params_mut().round_to_f32();
    let report = evaluate(&policy, &cfg.env, cfg.train.eval_episodes, seed, EVAL_BATCH)?;
    if let Some(last) = log.records.last_mut() {
        last.success = Some(report.success_rate);
        last.valid_fraction = Some(report.valid_fraction);
    }
    Ok((policy, log, report))
}

fn eval_summary(s: &mut Summary, r: &EvalReport) {
    s.set("episodes", r.episodes as i64)
        .set("successes", r.successes as i64)
        .set("success_rate", r.success_rate)
        .set("mean_return", r.mean_return)
        .set("mean_length", r.mean_length)
        .set("valid_fraction", r.valid_fraction);
    let mut per = Summary::default();
    for st in &r.per_instruction {
        let mut row = Summary::default();
        row.set("id", st.id as i64)
            .set("episodes", st.episodes as i64)
            .set("successes", st.successes as i64);
        if st.episodes > 0 {
            row.set("success_rate", st.successes as f64 / st.episodes as f64);
        }
        per.section(&st.name, row);
    }
    s.section("per_instruction", per);
}

/// Writes the checkpoint, the vocabulary (for word adapters), the metrics
/// and the summary.
fn save_run(
    cfg: &ExperimentConfig,
    policy: &Policy<f64>,
    resolved: &Resolved,
    log: &MetricsLog,
    mut s: Summary,
) -> Result<Outcome> {
    let out = cfg.out_dir();
    let mut files = Vec::new();
    let artifact = match &resolved.artifact {
        Some(a) => {
            let path = if a.generated {
                let p = out.join(&a.path);
                files.push(write(&p, &a.bytes)?);
                p
            } else {
                a.path.clone()
            };
            Some(artifact_ref(&path, &out, &a.bytes))
        }
        None => None,
    };
    let ckpt = PolicyCheckpoint::new(header(&cfg.asa, policy.config(), artifact.as_ref()), policy);
    let bytes = ckpt.to_bytes();
    files.push(write(&cfg.checkpoint_path(), &bytes)?);
    files.push(write(&out.join(METRICS_FILE), log.to_csv().as_bytes())?);
    s.set("checkpoint_sha256", sha256_hex(&bytes));
    files.push(write(&out.join(SUMMARY_FILE), s.to_text().as_bytes())?);
    Ok(Outcome { summary: s, files })
}

fn recon(
    resolved: &Resolved,
    cfg: &ExperimentConfig,
    demos: &DemonstrationSet,
) -> Result<Option<f64>> {
    let Some(q) = &resolved.round_trip else {
        return Ok(None);
    };
    let (_, hold) = demos.split_holdout(cfg.asa.holdout);
    let set = if hold.is_empty() { demos } else { &hold };
    Ok(Some(reconstruction_mse(
        q.as_ref(),
        &set.continuous_actions()?,
    )?))
}

pub fn cmd_train_bc(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let demos = read_demos(&cfg.demos_path())?;
    let resolved = resolve(&cfg.asa, &cfg.env.action_space(), &cfg.codec_path())?;
    let (policy, mut log, report) = fit_bc(cfg, &demos, resolved.binding.clone(), seed)?;
    let mse = recon(&resolved, cfg, &demos)?;
    if let Some(last) = log.records.last_mut() {
        last.recon_mse = mse;
    }
    let mut s = Summary::default();
    s.set("command", "train-bc")
        .set("asa", cfg.asa.kind.name())
        .set("seed", seed as i64);
    s.set("steps", cfg.train.steps as i64);
    if let Some(l) = log.last(|r| r.loss) {
        s.set("final_loss", l);
    }
    if let Some(m) = mse {
        s.set("recon_mse", m);
    }
    eval_summary(&mut s, &report);
    save_run(cfg, &policy, &resolved, &log, s)
}

fn pg_config(cfg: &ExperimentConfig) -> PgConfig {
    let t = &cfg.train;
    PgConfig {
        env_steps: t.env_steps,
        rollout_envs: t.rollout_envs,
        rollout_len: t.rollout_len,
        lr: t.lr,
        warmup: t.warmup,
        grad_clip: t.grad_clip,
        gamma: t.gamma,
        entropy: t.entropy,
        value_coef: t.value_coef,
        temperature: t.temperature,
        log_every: t.log_every,
    }
}

/// Policy-gradient training followed by a greedy evaluation.
pub fn fit_pg(
    cfg: &ExperimentConfig,
    binding: Binding<f64>,
    seed: u64,
) -> Result<(Policy<f64>, MetricsLog, EvalReport)> {
    let mut policy = new_policy(cfg, binding, seed)?;
    let log = train_pg(&mut policy, &cfg.env, &pg_config(cfg), seed)?;
    policy.params_mut().round_to_f32();
    let report = evaluate(&policy, &cfg.env, cfg.train.eval_episodes, seed, EVAL_BATCH)?;
    Ok((policy, log, report))
}

pub fn cmd_train_pg(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    if cfg.env.action_space().is_continuous() || !cfg.asa.kind.uses_vocab() {
        return Err(Error::Config(
            "train-pg needs a discrete environment and asa.kind semlang or lang".into(),
        ));
    }
    let seed = cfg.seed()?;
    let resolved = resolve(&cfg.asa, &cfg.env.action_space(), &cfg.codec_path())?;
    let (policy, log, report) = fit_pg(cfg, resolved.binding.clone(), seed)?;
    let mut s = Summary::default();
    s.set("command", "train-pg")
        .set("asa", cfg.asa.kind.name())
        .set("filter", cfg.asa.filter)
        .set("seed", seed as i64)
        .set("env_steps", log.records.last().map_or(0, |r| r.step) as i64);
    if let Some(x) = log.last(|r| r.success) {
        s.set("train_success", x);
    }
    if let Some(x) = log.last(|r| r.valid_fraction) {
        s.set("train_valid_fraction", x);
    }
    eval_summary(&mut s, &report);
    save_run(cfg, &policy, &resolved, &log, s)
}

/// Loads a checkpoint and rebuilds its policy, checking the adapter
/// artifact against the recorded hash.
pub fn load_policy(path: &Path, env: &EnvConfig) -> Result<Policy<f64>> {
    let bytes = read(path, "checkpoint")?;
    let ckpt = PolicyCheckpoint::<f64>::from_bytes(&bytes)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let binding = binding_from_header(&ckpt.header, &env.action_space(), dir)?;
    ckpt.into_policy(binding)
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let path = cfg.checkpoint_path();
    let policy = load_policy(&path, &cfg.env)?;
    let report = evaluate(&policy, &cfg.env, cfg.train.eval_episodes, seed, EVAL_BATCH)?;
    let mut s = Summary::default();
    s.set("command", "eval").set("seed", seed as i64);
    eval_summary(&mut s, &report);
    let file = write(&cfg.out_dir().join(EVAL_FILE), s.to_text().as_bytes())?;
    Ok(Outcome {
        summary: s,
        files: vec![file],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub holdout_mse: f64,
    pub success: f64,
    pub seed: u64,
}

fn axis_name(a: SweepAxis) -> &'static str {
    match a {
        SweepAxis::K => "K",
        SweepAxis::M => "M",
    }
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            axis_name(r.axis),
            r.value,
            r.holdout_mse,
            r.success,
            r.seed
        ));
    }
    s
}

pub fn sweep_from_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(Error::Parse("sweep file lacks the expected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Parse(format!("sweep line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let axis = match f[0] {
                "K" => SweepAxis::K,
                "M" => SweepAxis::M,
                _ => return Err(bad()),
            };
            Ok(SweepRow {
                axis,
                value: f[1].parse().map_err(|_| bad())?,
                holdout_mse: f[2].parse().map_err(|_| bad())?,
                success: f[3].parse().map_err(|_| bad())?,
                seed: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Codec plus behaviour cloning for every axis value and seed.
pub fn run_sweep(cfg: &ExperimentConfig, demos: &DemonstrationSet) -> Result<Vec<SweepRow>> {
    if cfg.train.sweep_values.is_empty() {
        return Err(Error::Config("train.sweep_values is empty".into()));
    }
    if !cfg.asa.kind.uses_codec() {
        return Err(Error::Config("sweep needs asa.kind vq or rvq".into()));
    }
    let base = cfg.seed()?;
    let mut rows = Vec::new();
    for &value in &cfg.train.sweep_values {
        for k in 0..cfg.train.sweep_seeds.max(1) {
            let seed = base + k as u64;
            let mut c = cfg.clone();
            match cfg.train.sweep_axis {
                SweepAxis::K => c.asa.codes = value,
                SweepAxis::M => c.asa.codebooks = value,
            }
            c.seed = Some(seed);
            let fit = fit_codec(&c, demos, seed)?;
            let (_, _, report) = fit_bc(&c, demos, Binding::Tokens(Arc::new(fit.codec)), seed)?;
            rows.push(SweepRow {
                axis: cfg.train.sweep_axis,
                value,
                holdout_mse: fit.holdout_mse,
                success: report.success_rate,
                seed,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let demos = read_demos(&cfg.demos_path())?;
    let rows = run_sweep(cfg, &demos)?;
    let file = write(
        &cfg.out_dir().join(SWEEP_FILE),
        sweep_to_csv(&rows).as_bytes(),
    )?;
    let mut s = Summary::default();
    s.set("command", "sweep")
        .set("axis", axis_name(cfg.train.sweep_axis))
        .set("runs", rows.len() as i64);
    for &v in &cfg.train.sweep_values {
        let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.value == v).collect();
        let n = sel.len() as f64;
        let mut row = Summary::default();
        row.set(
            "holdout_mse",
            sel.iter().map(|r| r.holdout_mse).sum::<f64>() / n,
        )
        .set("success", sel.iter().map(|r| r.success).sum::<f64>() / n);
        s.section(&v.to_string(), row);
    }
    Ok(Outcome {
        summary: s,
        files: vec![file],
    })
}

pub fn cmd_inspect_codec(cfg: &ExperimentConfig) -> Result<Outcome> {
    let path = cfg.codec_path();
    let bytes = read(&path, "codec")?;
    let codec = ResidualCodec::<f64>::from_bytes(&bytes)?;
    let shape = codec.shape();
    let mut s = Summary::default();
    s.set("command", "inspect-codec")
        .set("action_dim", shape.action_dim as i64)
        .set("latent", shape.latent_dim as i64)
        .set("codebooks", shape.codebooks as i64)
        .set("codes", shape.codes as i64)
        .set("hidden", shape.hidden as i64)
        .set(
            "sequences",
            (shape.codes as f64).powi(shape.codebooks as i32),
        )
        .set("sha256", sha256_hex(&bytes));
    let demo_path = cfg.demos_path();
    if demo_path.exists() {
        let actions = read_demos(&demo_path)?.continuous_actions()?;
        s.set("recon_mse", reconstruction_mse(&codec, &actions)?);
        let tokens = codec.tokenize_batch(&actions)?;
        let mut usage = Summary::default();
        for m in 0..shape.codebooks {
            let mut seen = vec![false; shape.codes];
            for t in &tokens {
                seen[t.0[m]] = true;
            }
            usage.set(
                &format!("codebook{m}"),
                seen.iter().filter(|&&b| b).count() as i64,
            );
        }
        s.section("codes_used", usage);
    }
    Ok(Outcome {
        summary: s,
        files: Vec::new(),
    })
}
