//! Behaviour cloning: teacher-forced training on context windows sampled
//! from demonstrations.

use rand::Rng;

use crate::action::Action;
use crate::env::{DemoAction, DemonstrationSet};
use crate::error::{Error, Result};
use crate::grad::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule, Graph};
use crate::policy::{Binding, Policy, Sequence};

use super::metrics::{MetricsLog, Record};

#[derive(Clone, Debug)]
pub struct BcConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub log_every: usize,
}

/// Demonstrations converted to what the bound adapter trains on.
pub struct BcData {
    episodes: Vec<Targets>,
    /// `(episode, step)` for every demonstrated step.
    index: Vec<(usize, usize)>,
}

struct Targets {
    instruction: usize,
    obs: Vec<Vec<f64>>,
    tokens: Vec<Vec<usize>>,
    actions: Vec<Vec<f64>>,
}

impl BcData {
    /// Encodes every demonstrated action with the adapter. Fails with
    /// `EncodeFailure` when one cannot be encoded.
    pub fn new(demos: &DemonstrationSet, binding: &Binding<f64>) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut episodes = Vec::with_capacity(demos.len());
        let mut index = Vec::new();
        for (e, ep) in demos.episodes.iter().enumerate() {
            let mut tokens = Vec::with_capacity(ep.actions.len());
            let mut actions = Vec::new();
            for a in &ep.actions {
                match (binding, a) {
                    (Binding::Tokens(ad), a) => tokens.push(ad.encode(&a.to_action())?.0),
                    (Binding::Regress(_), DemoAction::Continuous(v)) => {
                        tokens.push(Vec::new());
                        actions.push(v.clone());
                    }
                    (Binding::Categorical(n), DemoAction::Discrete(k)) if k < n => {
                        tokens.push(vec![*k])
                    }
                    (_, a) => {
                        return Err(Error::EncodeFailure(format!(
                            "{binding:?} cannot encode {a:?}"
                        )))
                    }
                }
            }
            index.extend((0..ep.actions.len()).map(|t| (e, t)));
            episodes.push(Targets {
                instruction: ep.instruction_id,
                obs: ep.observations[..ep.actions.len()].to_vec(),
                tokens,
                actions,
            });
        }
        if index.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { episodes, index })
    }

    pub fn num_steps(&self) -> usize {
        self.index.len()
    }

    /// The window of at most `context` steps ending at `(episode, step)`,
    /// with regression targets for every step in it.
    pub fn window(
        &self,
        episode: usize,
        step: usize,
        context: usize,
    ) -> (Sequence<f64>, Vec<Vec<f64>>) {
        let ep = &self.episodes[episode];
        let lo = (step + 1).saturating_sub(context);
        let seq = Sequence {
            instruction: ep.instruction,
            obs: ep.obs[lo..=step].to_vec(),
            tokens: ep.tokens[lo..=step].to_vec(),
        };
        let targets = if ep.actions.is_empty() {
            Vec::new()
        } else {
            ep.actions[lo..=step].to_vec()
        };
        (seq, targets)
    }

    /// `n` windows ending at uniformly drawn demonstration steps.
    pub fn sample<R: Rng>(
        &self,
        n: usize,
        context: usize,
        rng: &mut R,
    ) -> (Vec<Sequence<f64>>, Vec<Vec<Vec<f64>>>) {
        (0..n)
            .map(|_| {
                let (e, t) = self.index[rng.random_range(0..self.index.len())];
                self.window(e, t, context)
            })
            .unzip()
    }
}

/// Batch loss of the policy on the given windows.
pub fn batch_loss(
    policy: &Policy<f64>,
    seqs: &[Sequence<f64>],
    targets: &[Vec<Vec<f64>>],
) -> Result<f64> {
    let mut g = Graph::new();
    let p = policy.params().bind_frozen(&mut g);
    let t = matches!(policy.binding(), Binding::Regress(_)).then_some(targets);
    let l = policy.teacher_forced_loss(&mut g, &p, seqs, t)?;
    Ok(g.value(l).item())
}

/// Trains `policy` in place. Logs the mean training loss every
/// `log_every` steps and at the last step.
pub fn train_bc<R: Rng>(
    policy: &mut Policy<f64>,
    data: &BcData,
    cfg: &BcConfig,
    rng: &mut R,
) -> Result<MetricsLog> {
    let mut opt = AdamW::new(
        policy.params(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let sched = CosineSchedule {
        peak_lr: cfg.lr,
        total: cfg.steps,
        warmup_frac: cfg.warmup,
    };
    let context = policy.config().context;
    let regress = matches!(policy.binding(), Binding::Regress(_));
    let mut log = MetricsLog::default();
    let (mut acc, mut count) = (0.0, 0usize);
    for step in 0..cfg.steps {
        let (seqs, targets) = data.sample(cfg.batch_size, context, rng);
        let mut g = Graph::new();
        let p = policy.params().bind(&mut g);
        let loss =
            policy.teacher_forced_loss(&mut g, &p, &seqs, regress.then_some(&targets[..]))?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "behaviour-cloning loss is {value} at step {step}"
            )));
        }
        let mut grads = g.backward(loss)?;
        let mut grads = policy.params().collect_grads(&p, &mut grads);
        drop(g);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(policy.params_mut(), &grads, sched.lr(step));
        acc += value;
        count += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.push(Record {
                step: step + 1,
                loss: Some(acc / count as f64),
                ..Default::default()
            });
            acc = 0.0;
            count = 0;
        }
    }
    Ok(log)
}

/// First-step action the policy takes on `obs`, for probing what a head
/// has learned.
pub fn first_action(
    policy: &Policy<f64>,
    instruction: usize,
    obs: Vec<f64>,
) -> Result<Action<f64>> {
    let ctx = Sequence {
        instruction,
        obs: vec![obs],
        tokens: Vec::new(),
    };
    // Greedy decoding never draws from this.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    Ok(policy
        .act(&[ctx], crate::policy::Decoding::Greedy, &mut rng)?
        .remove(0)
        .action)
}
