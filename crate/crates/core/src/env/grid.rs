//! A small open gridworld with coloured objects and word actions.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::{Action, ActionSpace, DiscreteSpace};
use crate::error::{Error, Result};
use crate::rng::stream;

use super::{round_f32, Env, Expert, Step};

pub const GRID_ACTIONS: [&str; 6] = ["left", "right", "forward", "pick", "drop", "toggle"];
pub const COLORS: [&str; 5] = ["red", "green", "blue", "purple", "yellow"];
pub const KINDS: [&str; 3] = ["ball", "box", "key"];

const LEFT: usize = 0;
const RIGHT: usize = 1;
const FORWARD: usize = 2;
const PICK: usize = 3;
const DROP: usize = 4;

/// East, south, west, north.
const DIRS: [(i32, i32); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    GoTo,
    PickUp,
}

impl Template {
    fn index(self) -> usize {
        match self {
            Template::GoTo => 0,
            Template::PickUp => 1,
        }
    }

    fn from_index(i: usize) -> Self {
        if i == 0 {
            Template::GoTo
        } else {
            Template::PickUp
        }
    }

    fn words(self) -> &'static str {
        match self {
            Template::GoTo => "go to",
            Template::PickUp => "pick up",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub size: usize,
    pub objects: usize,
    pub max_steps: usize,
    pub templates: Vec<Template>,
    pub shaping: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            size: 6,
            objects: 3,
            max_steps: 50,
            templates: vec![Template::GoTo, Template::PickUp],
            shaping: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub pos: (i32, i32),
    pub color: usize,
    pub kind: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridState {
    pub agent: (i32, i32),
    pub dir: usize,
    /// Objects on the board; a carried object has no position.
    pub objects: Vec<Object>,
    pub carrying: Option<Object>,
    pub template: Template,
    pub target_color: usize,
}

#[derive(Clone, Debug)]
pub struct GridEnv {
    cfg: GridConfig,
    state: GridState,
    steps: usize,
    done: bool,
}

impl GridEnv {
    pub fn new(cfg: GridConfig) -> Self {
        let state = GridState {
            agent: (0, 0),
            dir: 0,
            objects: Vec::new(),
            carrying: None,
            template: Template::GoTo,
            target_color: 0,
        };
        Self {
            cfg,
            state,
            steps: 0,
            done: true,
        }
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    /// Replaces the board, for tests and hand-built scenes.
    pub fn set_state(&mut self, state: GridState) {
        self.state = state;
        self.steps = 0;
        self.done = false;
    }

    fn in_bounds(&self, (x, y): (i32, i32)) -> bool {
        let n = self.cfg.size as i32;
        (0..n).contains(&x) && (0..n).contains(&y)
    }

    fn object_at(&self, p: (i32, i32)) -> Option<usize> {
        self.state.objects.iter().position(|o| o.pos == p)
    }

    fn front(&self) -> (i32, i32) {
        let (dx, dy) = DIRS[self.state.dir];
        (self.state.agent.0 + dx, self.state.agent.1 + dy)
    }

    fn target_pos(&self) -> Option<(i32, i32)> {
        self.state
            .objects
            .iter()
            .find(|o| o.color == self.state.target_color)
            .map(|o| o.pos)
    }

    fn succeeded(&self) -> bool {
        match self.state.template {
            Template::GoTo => self
                .object_at(self.front())
                .is_some_and(|i| self.state.objects[i].color == self.state.target_color),
            Template::PickUp => self
                .state
                .carrying
                .is_some_and(|o| o.color == self.state.target_color),
        }
    }

    fn target_distance(&self) -> f64 {
        let t = self.target_pos().unwrap_or(self.state.agent);
        ((t.0 - self.state.agent.0).abs() + (t.1 - self.state.agent.1).abs()) as f64
    }

    fn observe(&self) -> Vec<f64> {
        let n = (self.cfg.size - 1).max(1) as f64;
        let s = &self.state;
        let mut obs = vec![s.agent.0 as f64 / n, s.agent.1 as f64 / n];
        obs.extend((0..4).map(|d| if d == s.dir { 1.0 } else { 0.0 }));
        obs.push(if s.carrying.is_some() { 1.0 } else { 0.0 });
        let front = self.front();
        obs.push(if self.in_bounds(front) { 0.0 } else { 1.0 });
        let ahead = self.object_at(front).map(|i| s.objects[i].color);
        obs.extend((0..COLORS.len()).map(|c| if ahead == Some(c) { 1.0 } else { 0.0 }));
        let (fx, fy) = DIRS[s.dir];
        let (rx, ry) = DIRS[(s.dir + 1) % 4];
        for color in 0..COLORS.len() {
            match s.objects.iter().find(|o| o.color == color) {
                Some(o) => {
                    let (dx, dy) = (o.pos.0 - s.agent.0, o.pos.1 - s.agent.1);
                    obs.push(1.0);
                    obs.push((dx * fx + dy * fy) as f64 / n);
                    obs.push((dx * rx + dy * ry) as f64 / n);
                    obs.extend((0..KINDS.len()).map(|k| if k == o.kind { 1.0 } else { 0.0 }));
                }
                None => obs.extend([0.0; 3 + KINDS.len()]),
            }
        }
        obs.into_iter().map(round_f32).collect()
    }

    /// Instruction id of a template and colour.
    pub fn instruction_id(template: Template, color: usize) -> usize {
        template.index() * COLORS.len() + color
    }
}

impl Env for GridEnv {
    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(DiscreteSpace::new(GRID_ACTIONS))
    }

    fn obs_dim(&self) -> usize {
        8 + COLORS.len() * (4 + KINDS.len())
    }

    fn num_instructions(&self) -> usize {
        2 * COLORS.len()
    }

    fn instruction_name(&self, id: usize) -> String {
        format!(
            "{} {}",
            Template::from_index(id / COLORS.len()).words(),
            COLORS[id % COLORS.len()]
        )
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "grid-reset", 0);
        let n = self.cfg.size as i32;
        let mut cells: Vec<(i32, i32)> = (0..n).flat_map(|y| (0..n).map(move |x| (x, y))).collect();
        cells.shuffle(&mut rng);
        let mut colors: Vec<usize> = (0..COLORS.len()).collect();
        colors.shuffle(&mut rng);
        let count = self.cfg.objects.clamp(1, COLORS.len()).min(cells.len() - 1);
        let objects: Vec<Object> = (0..count)
            .map(|i| Object {
                pos: cells[i + 1],
                color: colors[i],
                kind: rng.random_range(0..KINDS.len()),
            })
            .collect();
        let template = self.cfg.templates[rng.random_range(0..self.cfg.templates.len())];
        let target_color = objects[rng.random_range(0..objects.len())].color;
        self.state = GridState {
            agent: cells[0],
            dir: rng.random_range(0..4),
            objects,
            carrying: None,
            template,
            target_color,
        };
        // Never start an episode already solved.
        while self.succeeded() {
            self.state.dir = (self.state.dir + 1) % 4;
        }
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn instruction(&self) -> usize {
        Self::instruction_id(self.state.template, self.state.target_color)
    }

    fn step(&mut self, action: &Action<f64>) -> Result<Step> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let before = self.target_distance();
        match action {
            Action::NoOp => {}
            Action::Discrete(a) => match *a {
                LEFT => self.state.dir = (self.state.dir + 3) % 4,
                RIGHT => self.state.dir = (self.state.dir + 1) % 4,
                FORWARD => {
                    let f = self.front();
                    if self.in_bounds(f) && self.object_at(f).is_none() {
                        self.state.agent = f;
                    }
                }
                PICK => {
                    if self.state.carrying.is_none() {
                        if let Some(i) = self.object_at(self.front()) {
                            self.state.carrying = Some(self.state.objects.remove(i));
                        }
                    }
                }
                DROP => {
                    let f = self.front();
                    if self.in_bounds(f) && self.object_at(f).is_none() && f != self.state.agent {
                        if let Some(mut o) = self.state.carrying.take() {
                            o.pos = f;
                            self.state.objects.push(o);
                        }
                    }
                }
                a if a < GRID_ACTIONS.len() => {}
                a => {
                    return Err(Error::TokenOutOfRange {
                        token: a,
                        vocab: GRID_ACTIONS.len(),
                    })
                }
            },
            Action::Continuous(_) => return Err(Error::NotDiscrete),
        }
        // A no-op changes nothing on the board but still uses up a step.
        self.steps += 1;
        if action.is_noop() {
            self.done = self.steps >= self.cfg.max_steps;
            return Ok(Step {
                obs: self.observe(),
                reward: 0.0,
                done: self.done,
                success: false,
            });
        }
        let success = self.succeeded();
        self.done = success || self.steps >= self.cfg.max_steps;
        let shaping = if self.target_pos().is_some() {
            self.cfg.shaping * (before - self.target_distance())
        } else {
            0.0
        };
        let reward = shaping + if success { 1.0 } else { 0.0 };
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

/// Breadth-first planner over `(x, y, direction)`.
#[derive(Default)]
pub struct GridExpert;

impl GridExpert {
    /// Shortest action sequence to face the target (and pick it up for the
    /// pick-up template).
    pub fn plan(env: &GridEnv) -> Result<Vec<usize>> {
        let s = env.state();
        if env.succeeded() {
            return Ok(Vec::new());
        }
        let target = env.target_pos().ok_or(Error::NoPathFound)?;
        let n = env.config().size as i32;
        let idx = |p: (i32, i32), d: usize| ((p.1 * n + p.0) as usize) * 4 + d;
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; (n * n) as usize * 4];
        let start = idx(s.agent, s.dir);
        let mut seen = vec![false; prev.len()];
        seen[start] = true;
        let mut queue = VecDeque::from([(s.agent, s.dir)]);
        let mut goal = None;
        while let Some((p, d)) = queue.pop_front() {
            let (dx, dy) = DIRS[d];
            if (p.0 + dx, p.1 + dy) == target {
                goal = Some(idx(p, d));
                break;
            }
            let f = (p.0 + dx, p.1 + dy);
            let moves = [
                (LEFT, p, (d + 3) % 4),
                (RIGHT, p, (d + 1) % 4),
                (FORWARD, f, d),
            ];
            for (a, np, nd) in moves {
                if a == FORWARD && (!env.in_bounds(np) || env.object_at(np).is_some()) {
                    continue;
                }
                let k = idx(np, nd);
                if !seen[k] {
                    seen[k] = true;
                    prev[k] = Some((idx(p, d), a));
                    queue.push_back((np, nd));
                }
            }
        }
        let mut at = goal.ok_or(Error::NoPathFound)?;
        let mut plan = Vec::new();
        while let Some((from, a)) = prev[at] {
            plan.push(a);
            at = from;
        }
        plan.reverse();
        if s.template == Template::PickUp {
            if s.carrying.is_some() {
                // Put the wrong object down first; replan afterwards.
                return Ok(vec![DROP]);
            }
            plan.push(PICK);
        }
        Ok(plan)
    }
}

impl Expert<GridEnv> for GridExpert {
    fn begin(&mut self, _env: &GridEnv, _seed: u64) {}

    fn act(&mut self, env: &GridEnv) -> Result<Action<f64>> {
        let plan = Self::plan(env)?;
        Ok(plan.first().map_or(Action::NoOp, |&a| Action::Discrete(a)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_expert(env: &mut GridEnv) -> (bool, usize) {
        let mut ex = GridExpert;
        let mut steps = 0;
        while !env.is_done() {
            let a = ex.act(env).unwrap();
            let s = env.step(&a).unwrap();
            steps += 1;
            if s.success {
                return (true, steps);
            }
        }
        (false, steps)
    }

    #[test]
    fn noop_leaves_state_unchanged() {
        let mut env = GridEnv::new(GridConfig::default());
        let obs = env.reset(5);
        let before = env.state().clone();
        let s = env.step(&Action::NoOp).unwrap();
        assert_eq!(s.reward, 0.0);
        assert_eq!(s.obs, obs);
        assert_eq!(env.state(), &before);
    }

    #[test]
    fn agent_never_leaves_grid() {
        let mut env = GridEnv::new(GridConfig::default());
        env.reset(1);
        for i in 0..50 {
            let a = if i % 7 == 0 { LEFT } else { FORWARD };
            if env.is_done() {
                break;
            }
            env.step(&Action::Discrete(a)).unwrap();
            let (x, y) = env.state().agent;
            assert!((0..6).contains(&x) && (0..6).contains(&y));
        }
    }

    #[test]
    fn expert_on_open_board_within_2n() {
        let mut env = GridEnv::new(GridConfig::default());
        let n = 6;
        for tx in 0..n {
            for ty in 0..n {
                for ax in 0..n {
                    for ay in 0..n {
                        if (ax, ay) == (tx, ty) {
                            continue;
                        }
                        for dir in 0..4 {
                            env.set_state(GridState {
                                agent: (ax, ay),
                                dir,
                                objects: vec![Object {
                                    pos: (tx, ty),
                                    color: 0,
                                    kind: 0,
                                }],
                                carrying: None,
                                template: Template::GoTo,
                                target_color: 0,
                            });
                            if env.succeeded() {
                                continue;
                            }
                            let (ok, steps) = run_expert(&mut env);
                            assert!(
                                ok && steps <= 2 * n as usize,
                                "({ax},{ay},{dir}) -> ({tx},{ty}): {steps}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn expert_solves_random_boards() {
        let mut env = GridEnv::new(GridConfig::default());
        for seed in 0..200 {
            env.reset(seed);
            assert!(run_expert(&mut env).0, "seed {seed}");
        }
    }

    #[test]
    fn blocked_target_has_no_path() {
        let mut env = GridEnv::new(GridConfig::default());
        let o = |x, y, c| Object {
            pos: (x, y),
            color: c,
            kind: 0,
        };
        env.set_state(GridState {
            agent: (5, 5),
            dir: 0,
            objects: vec![o(0, 0, 0), o(1, 0, 1), o(0, 1, 2)],
            carrying: None,
            template: Template::GoTo,
            target_color: 0,
        });
        assert!(matches!(GridExpert.act(&env), Err(Error::NoPathFound)));
    }

    #[test]
    fn pick_up_carries_target() {
        let mut env = GridEnv::new(GridConfig {
            templates: vec![Template::PickUp],
            ..Default::default()
        });
        env.reset(9);
        assert!(run_expert(&mut env).0);
        assert_eq!(
            env.state().carrying.map(|o| o.color),
            Some(env.state().target_color)
        );
    }

    #[test]
    fn instruction_names() {
        let env = GridEnv::new(GridConfig::default());
        assert_eq!(
            env.instruction_name(GridEnv::instruction_id(Template::GoTo, 2)),
            "go to blue"
        );
        assert_eq!(
            env.instruction_name(GridEnv::instruction_id(Template::PickUp, 0)),
            "pick up red"
        );
        assert_eq!(env.obs_dim(), env.clone().reset(0).len());
    }
}
