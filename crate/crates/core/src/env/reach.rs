//! Continuous reaching around an obstacle.
//!
//! The agent starts near `-0.6 * 1` and must reach a goal near `+0.6 * 1`.
//! A ball obstacle sits on the start-goal line a short way ahead of the
//! start, so the expert detours through a waypoint on one side of it and
//! heading straight for the goal ends in a collision. In mirror mode the side
//! depends on the parity of the episode seed, which the observation does not
//! reveal. Obstacle and waypoint sizes scale with the start-goal distance, so
//! the geometry looks the same in every dimension.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::action::{clamp_action, Action, ActionSpace, BoxSpace};
use crate::error::{Error, Result};
use crate::rng::stream;

use super::{round_f32, Env, Expert, Step};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachConfig {
    pub dims: usize,
    pub mirror: bool,
    pub obstacle: bool,
    pub gain: f64,
    pub success_radius: f64,
    pub max_steps: usize,
    /// Per-dimension jitter of start and goal.
    pub jitter: f64,
    /// Position of the obstacle centre along the start-goal line, as a
    /// fraction of the distance.
    pub obstacle_at: f64,
    /// Obstacle radius as a fraction of the start-goal distance.
    pub obstacle_frac: f64,
    /// Sideways waypoint offset from the obstacle centre, same units.
    pub detour_frac: f64,
    /// Expert step length.
    pub expert_step: f64,
    pub expert_noise: f64,
    pub shaping: f64,
}

impl Default for ReachConfig {
    fn default() -> Self {
        Self {
            dims: 8,
            mirror: true,
            obstacle: true,
            gain: 0.25,
            success_radius: 0.4,
            max_steps: 30,
            jitter: 0.15,
            obstacle_at: 0.25,
            obstacle_frac: 0.17,
            detour_frac: 0.42,
            expert_step: 0.3,
            expert_noise: 0.1,
            shaping: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReachEnv {
    cfg: ReachConfig,
    agent: Vec<f64>,
    goal: Vec<f64>,
    start: Vec<f64>,
    centre: Vec<f64>,
    radius: f64,
    seed: u64,
    steps: usize,
    done: bool,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl ReachEnv {
    pub fn new(cfg: ReachConfig) -> Self {
        let d = cfg.dims;
        Self {
            cfg,
            agent: vec![0.0; d],
            goal: vec![0.0; d],
            start: vec![0.0; d],
            centre: vec![0.0; d],
            radius: 0.0,
            seed: 0,
            steps: 0,
            done: true,
        }
    }

    pub fn config(&self) -> &ReachConfig {
        &self.cfg
    }

    pub fn agent(&self) -> &[f64] {
        &self.agent
    }

    pub fn goal(&self) -> &[f64] {
        &self.goal
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Places the agent and goal directly, for tests.
    pub fn set_state(&mut self, agent: Vec<f64>, goal: Vec<f64>) {
        self.start = agent.clone();
        self.agent = agent;
        self.goal = goal;
        self.refresh_obstacle();
        self.steps = 0;
        self.done = false;
    }

    fn refresh_obstacle(&mut self) {
        let at = self.cfg.obstacle_at;
        self.centre = self
            .start
            .iter()
            .zip(&self.goal)
            .map(|(s, g)| s + at * (g - s))
            .collect();
        self.radius = self.cfg.obstacle_frac * dist(&self.start, &self.goal);
    }

    /// Unit vector orthogonal to the start-goal line, built from the
    /// alternating-sign vector `(1, -1, 1, ...)`.
    pub fn detour_direction(&self) -> Vec<f64> {
        let d = self.cfg.dims;
        let axis: Vec<f64> = self
            .goal
            .iter()
            .zip(&self.start)
            .map(|(g, s)| g - s)
            .collect();
        let axis_sq: f64 = axis.iter().map(|x| x * x).sum();
        let mut n: Vec<f64> = (0..d)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        if d == 1 {
            return n;
        }
        let proj: f64 = n.iter().zip(&axis).map(|(a, b)| a * b).sum::<f64>() / axis_sq.max(1e-12);
        for (x, a) in n.iter_mut().zip(&axis) {
            *x -= proj * a;
        }
        let norm = n.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        n.iter().map(|x| x / norm).collect()
    }

    /// Detour waypoint on side `sign` (+1 or -1).
    pub fn waypoint(&self, sign: f64) -> Vec<f64> {
        let offset = self.cfg.detour_frac * dist(&self.start, &self.goal);
        let n = self.detour_direction();
        self.centre
            .iter()
            .zip(&n)
            .map(|(c, n)| c + sign * offset * n)
            .collect()
    }

    /// Side the expert detours on: seed parity in mirror mode, else `+1`.
    pub fn detour_sign(&self) -> f64 {
        if self.cfg.mirror && self.seed % 2 == 1 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn obstacle(&self) -> Option<(&[f64], f64)> {
        self.cfg.obstacle.then_some((&self.centre, self.radius))
    }

    fn observe(&self) -> Vec<f64> {
        self.agent
            .iter()
            .chain(&self.goal)
            .chain(&self.centre)
            .map(|&x| round_f32(x))
            .collect()
    }
}

impl Env for ReachEnv {
    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(BoxSpace::symmetric(self.cfg.dims, 1.0))
    }

    fn obs_dim(&self) -> usize {
        3 * self.cfg.dims
    }

    fn proprio_dim(&self) -> usize {
        self.cfg.dims
    }

    fn num_instructions(&self) -> usize {
        1
    }

    fn instruction_name(&self, _id: usize) -> String {
        "reach".into()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "reach-reset", 0);
        let j = self.cfg.jitter;
        let d = self.cfg.dims;
        self.seed = seed;
        self.start = (0..d)
            .map(|_| round_f32(-0.6 + rng.random_range(-j..=j)))
            .collect();
        self.goal = (0..d)
            .map(|_| round_f32(0.6 + rng.random_range(-j..=j)))
            .collect();
        self.agent = self.start.clone();
        self.refresh_obstacle();
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn instruction(&self) -> usize {
        0
    }

    fn step(&mut self, action: &Action<f64>) -> Result<Step> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let before = dist(&self.agent, &self.goal);
        if let Action::Continuous(a) = action {
            let a = clamp_action(a, &BoxSpace::symmetric(self.cfg.dims, 1.0))?;
            for (p, x) in self.agent.iter_mut().zip(a) {
                *p += self.cfg.gain * round_f32(x);
            }
        } else if !action.is_noop() {
            return Err(Error::NotContinuous);
        }
        self.steps += 1;
        let after = dist(&self.agent, &self.goal);
        let success = after < self.cfg.success_radius;
        let crashed =
            self.cfg.obstacle && !success && dist(&self.agent, &self.centre) < self.radius;
        self.done = success || crashed || self.steps >= self.cfg.max_steps;
        let reward = self.cfg.shaping * (before - after) + if success { 1.0 } else { 0.0 };
        Ok(Step {
            obs: self.observe(),
            reward,
            done: self.done,
            success,
        })
    }

    fn is_done(&self) -> bool {
        self.done
    }
}

/// Proportional controller through the detour waypoint, with Gaussian
/// action noise.
pub struct ReachExpert {
    rng: ChaCha8Rng,
    reached_waypoint: bool,
}

impl Default for ReachExpert {
    fn default() -> Self {
        Self {
            rng: stream(0, "reach-expert", 0),
            reached_waypoint: false,
        }
    }
}

impl ReachExpert {
    /// The noiseless action towards the current target.
    pub fn clean_action(&mut self, env: &ReachEnv) -> Vec<f64> {
        let cfg = env.config();
        let waypoint = env.waypoint(env.detour_sign());
        if !env.cfg.obstacle || dist(env.agent(), &waypoint) < cfg.expert_step {
            self.reached_waypoint = true;
        }
        let target = if self.reached_waypoint {
            env.goal().to_vec()
        } else {
            waypoint
        };
        let delta: Vec<f64> = target.iter().zip(env.agent()).map(|(t, p)| t - p).collect();
        let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = if norm > 0.0 {
            (cfg.expert_step / norm).min(1.0)
        } else {
            0.0
        };
        delta.iter().map(|x| x * scale / cfg.gain).collect()
    }
}

impl Expert<ReachEnv> for ReachExpert {
    fn begin(&mut self, _env: &ReachEnv, seed: u64) {
        self.rng = stream(seed, "reach-expert", 0);
        self.reached_waypoint = false;
    }

    fn act(&mut self, env: &ReachEnv) -> Result<Action<f64>> {
        let clean = self.clean_action(env);
        let noise = Normal::new(0.0, env.config().expert_noise)
            .map_err(|e| Error::Config(e.to_string()))?;
        let noisy: Vec<f64> = clean
            .iter()
            .map(|x| x + noise.sample(&mut self.rng))
            .collect();
        let a = clamp_action(&noisy, &BoxSpace::symmetric(env.config().dims, 1.0))?;
        Ok(Action::Continuous(a.into_iter().map(round_f32).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_action_reaches_goal_in_closed_form_steps() {
        let cfg = ReachConfig {
            dims: 4,
            obstacle: false,
            ..Default::default()
        };
        let mut env = ReachEnv::new(cfg.clone());
        for seed in 0..50 {
            env.reset(seed);
            let d0 = dist(env.agent(), env.goal());
            let bound = (d0 / cfg.gain).ceil() as usize;
            let mut steps = 0;
            loop {
                let a: Vec<f64> = env
                    .goal()
                    .iter()
                    .zip(env.agent())
                    .map(|(g, p)| (g - p) / cfg.gain)
                    .collect();
                let s = env.step(&Action::Continuous(a)).unwrap();
                steps += 1;
                if s.done {
                    assert!(s.success);
                    break;
                }
            }
            assert!(steps <= bound, "{steps} > {bound}");
        }
    }

    #[test]
    fn expert_at_goal_is_noise_only() {
        let mut env = ReachEnv::new(ReachConfig {
            dims: 4,
            obstacle: false,
            ..Default::default()
        });
        env.set_state(vec![0.5; 4], vec![0.5; 4]);
        let mut ex = ReachExpert::default();
        assert_eq!(ex.clean_action(&env), vec![0.0; 4]);
        let mut total = 0.0;
        for _ in 0..2000 {
            let a = ex.act(&env).unwrap();
            total += a.continuous().unwrap().iter().sum::<f64>();
        }
        assert!((total / 8000.0).abs() < 0.01);
    }

    #[test]
    fn mirror_waypoints_reflect() {
        let mut env = ReachEnv::new(ReachConfig::default());
        env.reset(10);
        let plus = env.waypoint(env.detour_sign());
        let centre = env.obstacle().unwrap().0.to_vec();
        env.reset(10);
        assert_eq!(env.detour_sign(), 1.0);
        // Same geometry with opposite parity: reflect through the centre.
        env.seed = 11;
        assert_eq!(env.detour_sign(), -1.0);
        let minus = env.waypoint(env.detour_sign());
        for ((p, m), c) in plus.iter().zip(&minus).zip(&centre) {
            assert!((p + m - 2.0 * c).abs() < 1e-12);
        }
        assert!(dist(&plus, &minus) > 0.5);
    }

    #[test]
    fn detour_is_orthogonal() {
        let mut env = ReachEnv::new(ReachConfig::default());
        env.reset(3);
        let n = env.detour_direction();
        let axis: Vec<f64> = env
            .goal()
            .iter()
            .zip(&env.start)
            .map(|(g, s)| g - s)
            .collect();
        let dot: f64 = n.iter().zip(&axis).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-9);
    }

    #[test]
    fn straight_line_hits_obstacle() {
        let mut env = ReachEnv::new(ReachConfig::default());
        env.reset(4);
        let mut last = None;
        while !env.is_done() {
            let a: Vec<f64> = env
                .goal()
                .iter()
                .zip(env.agent())
                .map(|(g, p)| 0.4 * (g - p).signum())
                .collect();
            last = Some(env.step(&Action::Continuous(a)).unwrap());
        }
        assert!(!last.unwrap().success);
    }

    #[test]
    fn averaging_both_detours_collides() {
        for dims in [4, 8] {
            let mut env = ReachEnv::new(ReachConfig {
                dims,
                ..Default::default()
            });
            let mut ex = ReachExpert::default();
            for seed in 0..40 {
                env.reset(seed);
                let mut mean = vec![0.0; dims];
                for sign in [1.0, -1.0] {
                    env.seed = if sign > 0.0 { 0 } else { 1 };
                    ex.reached_waypoint = false;
                    for (m, a) in mean.iter_mut().zip(ex.clean_action(&env)) {
                        *m += 0.5 * a;
                    }
                }
                let mut crashed = false;
                for _ in 0..2 {
                    let s = env.step(&Action::Continuous(mean.clone())).unwrap();
                    crashed |= s.done && !s.success;
                    if s.done {
                        break;
                    }
                }
                assert!(crashed, "dims {dims} seed {seed}");
            }
        }
    }

    #[test]
    fn noisy_expert_is_reliable() {
        for dims in [4, 8] {
            let mut env = ReachEnv::new(ReachConfig {
                dims,
                ..Default::default()
            });
            let mut ex = ReachExpert::default();
            let mut wins = 0;
            for seed in 0..300 {
                env.reset(seed);
                ex.begin(&env, seed);
                let mut ok = false;
                while !env.is_done() {
                    let a = ex.act(&env).unwrap();
                    ok = env.step(&a).unwrap().success;
                }
                wins += usize::from(ok);
            }
            assert!(wins >= 291, "dims {dims}: {wins}/300");
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = || {
            let mut env = ReachEnv::new(ReachConfig::default());
            let mut ex = ReachExpert::default();
            let mut obs = vec![env.reset(77)];
            ex.begin(&env, 77);
            while !env.is_done() {
                let a = ex.act(&env).unwrap();
                obs.push(env.step(&a).unwrap().obs);
            }
            obs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn finished_episode_errors() {
        let mut env = ReachEnv::new(ReachConfig {
            dims: 2,
            ..Default::default()
        });
        assert!(matches!(
            env.step(&Action::NoOp),
            Err(Error::EpisodeFinished)
        ));
    }
}
