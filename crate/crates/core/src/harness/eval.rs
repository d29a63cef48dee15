//! Batched greedy rollouts with a per-instruction breakdown.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::env::{Env, EnvConfig, Expert, GridEnv, GridExpert, ReachEnv, ReachExpert};
use crate::error::Result;
use crate::policy::{Decoding, Policy, Sequence};
use crate::rng::derive_seed;

/// Random stream name for evaluation episode seeds, kept apart from the
/// demonstration seeds.
pub const EVAL_STREAM: &str = "env-eval";

/// Sliding window of the last `context` observations and the tokens emitted
/// after each of them.
#[derive(Clone, Debug)]
pub struct History {
    pub instruction: usize,
    obs: VecDeque<Vec<f64>>,
    tokens: VecDeque<Vec<usize>>,
    context: usize,
}

impl History {
    pub fn new(instruction: usize, first_obs: Vec<f64>, context: usize) -> Self {
        Self {
            instruction,
            obs: VecDeque::from([first_obs]),
            tokens: VecDeque::new(),
            context: context.max(1),
        }
    }

    /// Context awaiting the current step's action.
    pub fn context(&self) -> Sequence<f64> {
        Sequence {
            instruction: self.instruction,
            obs: self.obs.iter().cloned().collect(),
            tokens: self.tokens.iter().cloned().collect(),
        }
    }

    pub fn push(&mut self, tokens: Vec<usize>, next_obs: Vec<f64>) {
        self.tokens.push_back(tokens);
        self.obs.push_back(next_obs);
        while self.obs.len() > self.context {
            self.obs.pop_front();
            self.tokens.pop_front();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstructionStats {
    pub id: usize,
    pub name: String,
    pub episodes: usize,
    pub successes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
    /// Fraction of steps whose tokens decoded to a real action.
    pub valid_fraction: f64,
    pub per_instruction: Vec<InstructionStats>,
}

/// Seed of evaluation episode `i`.
pub fn eval_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, EVAL_STREAM, i as u64)
}

struct Tally {
    per: Vec<InstructionStats>,
    successes: usize,
    total_return: f64,
    total_len: usize,
    steps: usize,
    valid: usize,
}

impl Tally {
    fn new(env_cfg: &EnvConfig) -> Self {
        let probe = env_cfg.build();
        let per = (0..probe.num_instructions())
            .map(|id| InstructionStats {
                id,
                name: probe.instruction_name(id),
                episodes: 0,
                successes: 0,
            })
            .collect();
        Self {
            per,
            successes: 0,
            total_return: 0.0,
            total_len: 0,
            steps: 0,
            valid: 0,
        }
    }

    fn step(&mut self, valid: bool) {
        self.steps += 1;
        self.total_len += 1;
        self.valid += valid as usize;
    }

    fn episode(&mut self, instruction: usize, won: bool, ret: f64) {
        let st = &mut self.per[instruction];
        st.episodes += 1;
        st.successes += won as usize;
        self.successes += won as usize;
        self.total_return += ret;
    }

    fn report(self, episodes: usize) -> EvalReport {
        let denom = episodes.max(1) as f64;
        EvalReport {
            episodes,
            successes: self.successes,
            success_rate: self.successes as f64 / denom,
            mean_return: self.total_return / denom,
            mean_length: self.total_len as f64 / denom,
            valid_fraction: if self.steps == 0 {
                1.0
            } else {
                self.valid as f64 / self.steps as f64
            },
            per_instruction: self.per,
        }
    }
}

/// Runs `episodes` episodes, `batch` at a time, acting on every live
/// environment with one batched policy call per step.
pub fn evaluate(
    policy: &Policy<f64>,
    env_cfg: &EnvConfig,
    episodes: usize,
    seed: u64,
    batch: usize,
) -> Result<EvalReport> {
    let mut tally = Tally::new(env_cfg);
    // Greedy decoding never draws from this.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let context = policy.config().context;
    let mut start = 0;
    while start < episodes {
        let n = batch.max(1).min(episodes - start);
        let mut envs: Vec<Box<dyn Env>> = (0..n).map(|_| env_cfg.build()).collect();
        let mut hist: Vec<History> = envs
            .iter_mut()
            .enumerate()
            .map(|(k, e)| {
                let obs = e.reset(eval_seed(seed, start + k));
                History::new(e.instruction(), obs, context)
            })
            .collect();
        let mut ret = vec![0.0; n];
        let mut won = vec![false; n];
        let mut live: Vec<usize> = (0..n).collect();
        while !live.is_empty() {
            let ctx: Vec<Sequence<f64>> = live.iter().map(|&k| hist[k].context()).collect();
            let outs = policy.act(&ctx, Decoding::Greedy, &mut rng)?;
            let mut still = Vec::with_capacity(live.len());
            for (&k, out) in live.iter().zip(outs) {
                tally.step(!out.action.is_noop());
                let s = envs[k].step(&out.action)?;
                ret[k] += s.reward;
                won[k] |= s.success;
                hist[k].push(out.tokens, s.obs);
                if !s.done {
                    still.push(k);
                }
            }
            live = still;
        }
        for k in 0..n {
            tally.episode(hist[k].instruction, won[k], ret[k]);
        }
        start += n;
    }
    Ok(tally.report(episodes))
}

/// The scripted expert on the same episodes [`evaluate`] would run.
pub fn evaluate_expert(env_cfg: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    let mut tally = Tally::new(env_cfg);
    match env_cfg {
        EnvConfig::Reach(c) => expert_episodes(
            &mut ReachEnv::new(c.clone()),
            &mut ReachExpert::default(),
            episodes,
            seed,
            &mut tally,
        )?,
        EnvConfig::Grid(c) => expert_episodes(
            &mut GridEnv::new(c.clone()),
            &mut GridExpert,
            episodes,
            seed,
            &mut tally,
        )?,
    }
    Ok(tally.report(episodes))
}

fn expert_episodes<E: Env, X: Expert<E>>(
    env: &mut E,
    expert: &mut X,
    episodes: usize,
    seed: u64,
    tally: &mut Tally,
) -> Result<()> {
    for i in 0..episodes {
        let s = eval_seed(seed, i);
        env.reset(s);
        expert.begin(env, s);
        let (mut won, mut ret) = (false, 0.0);
        while !env.is_done() {
            let a = expert.act(env)?;
            tally.step(!a.is_noop());
            let st = env.step(&a)?;
            won |= st.success;
            ret += st.reward;
        }
        tally.episode(env.instruction(), won, ret);
    }
    Ok(())
}
