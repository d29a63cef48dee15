//! Demonstration datasets: generation from scripted experts and a
//! line-delimited JSON file format (one episode per line).

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::action::Action;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, ENV};

use super::{Env, Expert};

/// Generation aborts once more than this fraction of attempts fail.
pub const MAX_FAILURE_RATE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub enum DemoAction {
    Continuous(Vec<f64>),
    Discrete(usize),
}

impl DemoAction {
    pub fn to_action(&self) -> Action<f64> {
        match self {
            DemoAction::Continuous(a) => Action::Continuous(a.clone()),
            DemoAction::Discrete(i) => Action::Discrete(*i),
        }
    }

    pub fn continuous(&self) -> Option<&[f64]> {
        match self {
            DemoAction::Continuous(a) => Some(a),
            DemoAction::Discrete(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Also the seed the environment was reset with.
    pub episode_id: u64,
    pub instruction_id: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<DemoAction>,
    pub success: bool,
}

impl Episode {
    /// Re-runs the stored actions in a fresh episode with the same seed.
    /// Returns whether the observations match exactly and the episode ends
    /// in success.
    pub fn replay(&self, env: &mut dyn Env) -> Result<bool> {
        let obs = env.reset(self.episode_id);
        if obs != self.observations[0] || env.instruction() != self.instruction_id {
            return Ok(false);
        }
        let mut success = false;
        for (a, expected) in self.actions.iter().zip(&self.observations[1..]) {
            let s = env.step(&a.to_action())?;
            if &s.obs != expected {
                return Ok(false);
            }
            success = s.success;
        }
        Ok(success == self.success && env.is_done())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemonstrationSet {
    pub episodes: Vec<Episode>,
}

fn fmt_f32(out: &mut String, x: f64) {
    // Nine significant digits recover any f32 exactly.
    let _ = write!(out, "{:.8e}", x as f32);
}

impl DemonstrationSet {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.actions.len()).sum()
    }

    /// Every continuous action, in episode order.
    pub fn continuous_actions(&self) -> Result<Vec<Vec<f64>>> {
        self.episodes
            .iter()
            .flat_map(|e| &e.actions)
            .map(|a| {
                a.continuous()
                    .map(<[f64]>::to_vec)
                    .ok_or(Error::NotContinuous)
            })
            .collect()
    }

    /// Splits off the last `ceil(frac * len)` episodes (at least one when
    /// `frac > 0` and there are two or more episodes).
    pub fn split_holdout(&self, frac: f64) -> (DemonstrationSet, DemonstrationSet) {
        let n = self.episodes.len();
        let mut k = (frac * n as f64).ceil() as usize;
        if n < 2 {
            k = 0;
        }
        k = k.min(n.saturating_sub(1));
        let (a, b) = self.episodes.split_at(n - k);
        (
            DemonstrationSet {
                episodes: a.to_vec(),
            },
            DemonstrationSet {
                episodes: b.to_vec(),
            },
        )
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.episodes {
            let _ = write!(
                out,
                "{{\"episode_id\":{},\"instruction_id\":{},\"observations\":[",
                e.episode_id, e.instruction_id
            );
            for (i, o) in e.observations.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('[');
                for (j, &x) in o.iter().enumerate() {
                    if j > 0 {
                        out.push(',');
                    }
                    fmt_f32(&mut out, x);
                }
                out.push(']');
            }
            out.push_str("],\"actions\":[");
            for (i, a) in e.actions.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                match a {
                    DemoAction::Discrete(k) => {
                        let _ = write!(out, "{k}");
                    }
                    DemoAction::Continuous(v) => {
                        out.push('[');
                        for (j, &x) in v.iter().enumerate() {
                            if j > 0 {
                                out.push(',');
                            }
                            fmt_f32(&mut out, x);
                        }
                        out.push(']');
                    }
                }
            }
            let _ = writeln!(out, "],\"success\":{}}}", e.success);
        }
        out
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut episodes = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            episodes.push(parse_episode(&line, n + 1)?);
        }
        Ok(Self { episodes })
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::read(text.as_bytes())
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_jsonl().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_episode(line: &str, lineno: usize) -> Result<Episode> {
    let bad = |what: String| Error::Parse(format!("dataset line {lineno}: {what}"));
    let v: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    let field = |k: &str| v.get(k).ok_or_else(|| bad(format!("missing field {k:?}")));
    let episode_id = field("episode_id")?
        .as_u64()
        .ok_or_else(|| bad("episode_id is not an integer".into()))?;
    let bad_ep = |what: &str| {
        Error::Parse(format!(
            "dataset line {lineno}, episode {episode_id}: {what}"
        ))
    };
    let instruction_id = field("instruction_id")?
        .as_u64()
        .ok_or_else(|| bad_ep("instruction_id is not an integer"))?
        as usize;
    let floats = |v: &Value| -> Option<Vec<f64>> {
        v.as_array()?
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32 as f64))
            .collect()
    };
    let observations = field("observations")?
        .as_array()
        .and_then(|rows| rows.iter().map(floats).collect::<Option<Vec<_>>>())
        .ok_or_else(|| bad_ep("observations must be arrays of numbers"))?;
    let actions = field("actions")?
        .as_array()
        .and_then(|rows| {
            rows.iter()
                .map(|a| match a {
                    Value::Number(k) => k.as_u64().map(|k| DemoAction::Discrete(k as usize)),
                    other => floats(other).map(DemoAction::Continuous),
                })
                .collect::<Option<Vec<_>>>()
        })
        .ok_or_else(|| bad_ep("actions must be integers or arrays of numbers"))?;
    let success = field("success")?
        .as_bool()
        .ok_or_else(|| bad_ep("success is not a boolean"))?;
    if observations.len() != actions.len() + 1 {
        return Err(bad_ep(&format!(
            "{} observations for {} actions (expected one more observation than actions)",
            observations.len(),
            actions.len()
        )));
    }
    Ok(Episode {
        episode_id,
        instruction_id,
        observations,
        actions,
        success,
    })
}

fn to_demo_action(a: &Action<f64>) -> Result<DemoAction> {
    match a {
        Action::Continuous(v) => Ok(DemoAction::Continuous(
            v.iter().map(|&x| x as f32 as f64).collect(),
        )),
        Action::Discrete(k) => Ok(DemoAction::Discrete(*k)),
        Action::NoOp => Err(Error::EncodeFailure("expert emitted a no-op".into())),
    }
}

/// Rolls out `expert` until `n` successful episodes are collected. Failed
/// attempts are discarded and re-rolled with the next attempt seed.
pub fn generate_demos<E: Env, X: Expert<E>>(
    env: &mut E,
    expert: &mut X,
    n: usize,
    seed: u64,
) -> Result<DemonstrationSet> {
    if n == 0 {
        return Err(Error::Config("need at least one demonstration".into()));
    }
    let mut episodes = Vec::with_capacity(n);
    let (mut attempts, mut failures) = (0usize, 0usize);
    while episodes.len() < n {
        let ep_seed = derive_seed(seed, ENV, attempts as u64);
        attempts += 1;
        match rollout(env, expert, ep_seed) {
            Ok(ep) if ep.success => episodes.push(ep),
            Ok(_) | Err(Error::NoPathFound) => failures += 1,
            Err(e) => return Err(e),
        }
        if attempts >= 10 && failures as f64 > MAX_FAILURE_RATE * attempts as f64 {
            return Err(Error::ExpertFailureRate { failures, attempts });
        }
    }
    Ok(DemonstrationSet { episodes })
}

fn rollout<E: Env, X: Expert<E>>(env: &mut E, expert: &mut X, seed: u64) -> Result<Episode> {
    let mut observations = vec![env.reset(seed)];
    let instruction_id = env.instruction();
    expert.begin(env, seed);
    let mut actions = Vec::new();
    let mut success = false;
    while !env.is_done() {
        let a = expert.act(env)?;
        let demo = to_demo_action(&a)?;
        let s = env.step(&demo.to_action())?;
        observations.push(s.obs);
        actions.push(demo);
        success = s.success;
    }
    Ok(Episode {
        episode_id: seed,
        instruction_id,
        observations,
        actions,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{GridConfig, GridEnv, GridExpert, ReachConfig, ReachEnv, ReachExpert};

    fn reach(n: usize, dims: usize) -> (ReachEnv, DemonstrationSet) {
        let mut env = ReachEnv::new(ReachConfig {
            dims,
            ..Default::default()
        });
        let set = generate_demos(&mut env, &mut ReachExpert::default(), n, 42).unwrap();
        (env, set)
    }

    #[test]
    fn single_trivial_episode() {
        let mut env = ReachEnv::new(ReachConfig {
            dims: 2,
            obstacle: false,
            ..Default::default()
        });
        let set = generate_demos(&mut env, &mut ReachExpert::default(), 1, 0).unwrap();
        assert_eq!(set.len(), 1);
        let e = &set.episodes[0];
        assert!(e.success);
        assert_eq!(e.observations.len(), e.actions.len() + 1);
    }

    #[test]
    fn write_read_round_trip() {
        let (_, set) = reach(20, 4);
        let text = set.to_jsonl();
        let back = DemonstrationSet::from_jsonl(&text).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.checksum(), set.checksum());
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn demos_replay_to_success() {
        let (mut env, set) = reach(30, 8);
        for e in &set.episodes {
            assert!(e.replay(&mut env).unwrap());
        }
        let mut grid = GridEnv::new(GridConfig::default());
        let gset = generate_demos(&mut grid, &mut GridExpert, 30, 1).unwrap();
        for e in &gset.episodes {
            assert!(e.replay(&mut grid).unwrap());
        }
        let back = DemonstrationSet::from_jsonl(&gset.to_jsonl()).unwrap();
        assert_eq!(back, gset);
    }

    #[test]
    fn expert_actions_inside_box() {
        let (_, set) = reach(30, 8);
        for a in set.continuous_actions().unwrap() {
            assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn reader_rejects_length_mismatch() {
        let line = r#"{"episode_id":7,"instruction_id":0,"observations":[[0.0]],"actions":[[1.0]],"success":true}"#;
        let err = DemonstrationSet::from_jsonl(line).unwrap_err().to_string();
        assert!(err.contains("episode 7"), "{err}");
    }

    #[test]
    fn hopeless_expert_aborts() {
        let mut env = ReachEnv::new(ReachConfig {
            dims: 2,
            max_steps: 1,
            ..Default::default()
        });
        let err = generate_demos(&mut env, &mut ReachExpert::default(), 5, 0).unwrap_err();
        assert!(matches!(err, Error::ExpertFailureRate { .. }));
    }

    #[test]
    fn mirror_first_actions_are_bimodal() {
        let (mut env, set) = reach(200, 8);
        let firsts: Vec<Vec<f64>> = set
            .episodes
            .iter()
            .map(|e| e.actions[0].continuous().unwrap().to_vec())
            .collect();
        // Two clusters along the detour direction of each episode.
        let mut plus = 0;
        for (e, a) in set.episodes.iter().zip(&firsts) {
            env.reset(e.episode_id);
            let n = env.detour_direction();
            let proj: f64 = n.iter().zip(a).map(|(x, y)| x * y).sum();
            if proj > 0.0 {
                plus += 1;
            }
        }
        let frac = plus as f64 / firsts.len() as f64;
        assert!((0.3..=0.7).contains(&frac), "{frac}");
    }
}
