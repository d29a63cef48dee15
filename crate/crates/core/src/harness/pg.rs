//! REINFORCE with a learned value baseline, sampling actions through the
//! bound token adapter.

use crate::action::TokenAdapter;
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::grad::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule, Graph};
use crate::policy::{Binding, Decoding, Policy, Sequence};
use crate::rng::{derive_seed, stream, ENV, SAMPLING};

use super::eval::History;
use super::metrics::{MetricsLog, Record};

#[derive(Clone, Debug)]
pub struct PgConfig {
    pub env_steps: usize,
    pub rollout_envs: usize,
    pub rollout_len: usize,
    pub lr: f64,
    pub warmup: f64,
    pub grad_clip: f64,
    pub gamma: f64,
    pub entropy: f64,
    pub value_coef: f64,
    pub temperature: f64,
    /// Updates between metric records.
    pub log_every: usize,
}

struct Transition {
    /// Context including the tokens emitted at this step.
    seq: Sequence<f64>,
    reward: f64,
    done: bool,
    value: f64,
}

/// Exact probability that one unconstrained draw from `probs` at every
/// position yields a sequence naming a valid action, by enumerating every
/// token sequence up to the adapter's length (each position sees the same
/// distribution, as an untrained token head does).
pub fn valid_probability(adapter: &dyn TokenAdapter<f64>, probs: &[f64]) -> Result<f64> {
    fn walk(
        adapter: &dyn TokenAdapter<f64>,
        probs: &[f64],
        prefix: &mut Vec<usize>,
        p: f64,
    ) -> Result<f64> {
        if adapter.is_complete(prefix) {
            return Ok(if adapter.decode(prefix)?.is_noop() {
                0.0
            } else {
                p
            });
        }
        let mut total = 0.0;
        for (tok, &q) in probs.iter().enumerate() {
            if q > 0.0 {
                prefix.push(tok);
                total += walk(adapter, probs, prefix, p * q)?;
                prefix.pop();
            }
        }
        Ok(total)
    }
    walk(adapter, probs, &mut Vec::new(), 1.0)
}

/// Trains `policy` on the environment for `cfg.env_steps` steps.
pub fn train_pg(
    policy: &mut Policy<f64>,
    env_cfg: &EnvConfig,
    cfg: &PgConfig,
    seed: u64,
) -> Result<MetricsLog> {
    let Binding::Tokens(adapter) = policy.binding().clone() else {
        return Err(Error::Config(
            "policy-gradient training needs a token adapter".into(),
        ));
    };
    let context = policy.config().context;
    let per_update = cfg.rollout_envs * cfg.rollout_len;
    let updates = cfg.env_steps.div_ceil(per_update).max(1);
    let mut opt = AdamW::new(policy.params(), AdamWConfig::default());
    let sched = CosineSchedule {
        peak_lr: cfg.lr,
        total: updates,
        warmup_frac: cfg.warmup,
    };
    let mut rng = stream(seed, SAMPLING, 0);
    let mut next_episode = 0u64;
    let mut reset = |env: &mut Box<dyn Env>| {
        let obs = env.reset(derive_seed(seed, ENV, next_episode));
        next_episode += 1;
        History::new(env.instruction(), obs, context)
    };
    let mut envs: Vec<Box<dyn Env>> = (0..cfg.rollout_envs).map(|_| env_cfg.build()).collect();
    let mut hist: Vec<History> = envs.iter_mut().map(&mut reset).collect();
    let mut log = MetricsLog::default();
    let (mut done_eps, mut won_eps, mut steps_seen, mut valid_seen) =
        (0usize, 0usize, 0usize, 0usize);
    let (mut loss_acc, mut loss_n) = (0.0, 0usize);
    let mut env_steps = 0usize;
    for update in 0..updates {
        let mut traj: Vec<Vec<Transition>> = (0..cfg.rollout_envs).map(|_| Vec::new()).collect();
        for _ in 0..cfg.rollout_len {
            let ctx: Vec<Sequence<f64>> = hist.iter().map(History::context).collect();
            let outs = policy.act(
                &ctx,
                Decoding::Sample {
                    temperature: cfg.temperature,
                },
                &mut rng,
            )?;
            for (k, (out, mut seq)) in outs.into_iter().zip(ctx).enumerate() {
                let s = envs[k].step(&out.action)?;
                env_steps += 1;
                steps_seen += 1;
                if !out.action.is_noop() {
                    valid_seen += 1;
                }
                seq.tokens.push(out.tokens.clone());
                traj[k].push(Transition {
                    seq,
                    reward: s.reward,
                    done: s.done,
                    value: out.value,
                });
                if s.done {
                    done_eps += 1;
                    won_eps += usize::from(s.success);
                    hist[k] = reset(&mut envs[k]);
                } else {
                    hist[k].push(out.tokens, s.obs);
                }
            }
        }
        let boot = policy.state_values(&hist.iter().map(History::context).collect::<Vec<_>>())?;
        let mut batch = Vec::with_capacity(per_update);
        let mut returns = Vec::with_capacity(per_update);
        let mut adv = Vec::with_capacity(per_update);
        for (k, tr) in traj.into_iter().enumerate() {
            let mut ret = vec![0.0; tr.len()];
            let mut next = boot[k];
            for i in (0..tr.len()).rev() {
                next = tr[i].reward + if tr[i].done { 0.0 } else { cfg.gamma * next };
                ret[i] = next;
            }
            for (t, r) in tr.into_iter().zip(ret) {
                adv.push(r - t.value);
                returns.push(r);
                batch.push(t.seq);
            }
        }
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        for a in &mut adv {
            *a = (*a - mean) / (std + 1e-8);
        }
        let value = update_step(
            policy,
            adapter.as_ref(),
            &batch,
            &adv,
            &returns,
            cfg,
            &mut opt,
            sched.lr(update),
        )?;
        loss_acc += value;
        loss_n += 1;
        if (update + 1) % cfg.log_every.max(1) == 0 || update + 1 == updates {
            log.push(Record {
                step: env_steps,
                loss: Some(loss_acc / loss_n as f64),
                success: (done_eps > 0).then(|| won_eps as f64 / done_eps as f64),
                recon_mse: None,
                valid_fraction: Some(valid_seen as f64 / steps_seen.max(1) as f64),
            });
            (done_eps, won_eps, steps_seen, valid_seen, loss_acc, loss_n) = (0, 0, 0, 0, 0.0, 0);
        }
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn update_step(
    policy: &mut Policy<f64>,
    adapter: &dyn TokenAdapter<f64>,
    batch: &[Sequence<f64>],
    adv: &[f64],
    returns: &[f64],
    cfg: &PgConfig,
    opt: &mut AdamW<f64>,
    lr: f64,
) -> Result<f64> {
    let vocab = adapter.vocab_size();
    let n = batch.len() as f64;
    let mut g = Graph::new();
    let p = policy.params().bind(&mut g);
    let (hidden, layout) = policy.hidden(&mut g, &p, batch)?;
    let (mut rows, mut targets, mut weights, mut ent_w, mut allowed) =
        (vec![], vec![], vec![], vec![], vec![]);
    let mut value_rows = Vec::with_capacity(batch.len());
    let mut masked = false;
    for (b, seq) in batch.iter().enumerate() {
        let t = seq.obs.len() - 1;
        let toks = &seq.tokens[t];
        value_rows.push(layout.obs_rows[b][t]);
        for (j, &tok) in toks.iter().enumerate() {
            rows.push(if j == 0 {
                layout.obs_rows[b][t]
            } else {
                layout.token_rows[b][t][j - 1]
            });
            targets.push(tok);
            weights.push(adv[b] / n);
            ent_w.push(1.0 / n);
            match adapter.next_token_mask(&toks[..j])? {
                Some(m) => {
                    masked = true;
                    allowed.extend(m);
                }
                None => allowed.extend(std::iter::repeat_n(true, vocab)),
            }
        }
    }
    let allowed = masked.then_some(&allowed[..]);
    let logits = policy.logits(&mut g, &p, hidden, &rows)?;
    let pg = g.cross_entropy(logits, &targets, &weights, allowed)?;
    let ent = g.entropy(logits, &ent_w, allowed)?;
    let v = policy.values(&mut g, &p, hidden, &value_rows)?;
    let r = g.constant(crate::grad::Tensor::matrix(
        returns.len(),
        1,
        returns.to_vec(),
    )?);
    let vl = g.mse(v, r)?;
    let ent = g.scale(ent, -cfg.entropy);
    let vl = g.scale(vl, cfg.value_coef);
    let loss = g.add(pg, ent)?;
    let loss = g.add(loss, vl)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("policy-gradient loss is {value}")));
    }
    let mut grads = g.backward(loss)?;
    let mut grads = policy.params().collect_grads(&p, &mut grads);
    drop(g);
    clip_grad_norm(&mut grads, cfg.grad_clip);
    opt.step(policy.params_mut(), &grads, lr);
    Ok(value)
}
