use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::{clamp_action, Action, BoxSpace, TokenAdapter};
use crate::discrete::{masked_softmax, CategoricalHead};
use crate::error::{Error, Result};
use crate::grad::nn::{matrix_param, Init, LayerNorm, Linear};
use crate::grad::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::quant::RegressionHead;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Timesteps of history in one context window.
    pub context: usize,
    /// Embedding slots per observation.
    pub obs_slots: usize,
    /// Size of the learned position table.
    pub max_seq_len: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the regression and categorical heads.
    pub head_hidden: usize,
    pub obs_dim: usize,
    pub num_instructions: usize,
    /// Leading observation components passed to the regression head.
    pub proprio_dims: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 4,
            heads: 4,
            context: 4,
            obs_slots: 1,
            max_seq_len: 64,
            mlp_ratio: 4,
            head_hidden: 128,
            obs_dim: 0,
            num_instructions: 1,
            proprio_dims: 0,
        }
    }
}

/// What the policy emits and how it becomes an environment action.
#[derive(Clone)]
pub enum Binding<S: Scalar> {
    /// Autoregressive action tokens through an adapter.
    Tokens(Arc<dyn TokenAdapter<S>>),
    /// One continuous action regressed from the first hidden state.
    Regress(BoxSpace),
    /// A categorical distribution over this many actions.
    Categorical(usize),
}

impl<S: Scalar> Binding<S> {
    /// Sequence slots that follow the observation slots of a completed step.
    pub fn slots_per_action(&self) -> usize {
        match self {
            Binding::Tokens(a) => a.tokens_per_action(),
            Binding::Regress(_) => 0,
            Binding::Categorical(_) => 1,
        }
    }

    /// Tokens emitted per step, at most.
    pub fn tokens_per_action(&self) -> usize {
        self.slots_per_action().max(1)
    }
}

impl<S: Scalar> std::fmt::Debug for Binding<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Binding::Tokens(a) => write!(
                f,
                "Tokens(vocab {}, m {})",
                a.vocab_size(),
                a.tokens_per_action()
            ),
            Binding::Regress(b) => write!(f, "Regress(D {})", b.dims()),
            Binding::Categorical(n) => write!(f, "Categorical({n})"),
        }
    }
}

/// One context window: the instruction, up to `context` observations and the
/// action tokens of the steps taken so far. `tokens` has one entry per
/// completed step and possibly a partial entry for the current one.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence<S> {
    pub instruction: usize,
    pub obs: Vec<Vec<S>>,
    pub tokens: Vec<Vec<usize>>,
}

/// Row indices into the `[batch * seq_len, width]` hidden-state matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub seq_len: usize,
    /// `obs_rows[b][t]`: last observation slot of step `t`.
    pub obs_rows: Vec<Vec<usize>>,
    /// `token_rows[b][t][j]`: embedding of token `j` of step `t`.
    pub token_rows: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput<S> {
    pub tokens: Vec<usize>,
    pub action: Action<S>,
    /// Value-head estimate at the first hidden state.
    pub value: S,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
enum Head {
    Tokens { emb: ParamId, out: Linear },
    Regress(RegressionHead),
    Categorical { head: CategoricalHead, emb: ParamId },
}

#[derive(Clone)]
pub struct Policy<S: Scalar> {
    cfg: PolicyConfig,
    binding: Binding<S>,
    store: ParamStore<S>,
    instr: ParamId,
    gate: ParamId,
    pos: ParamId,
    obs_proj: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Head,
    value: Linear,
}

/// Gate parameters are stored divided by this, so they move faster under Adam.
const GATE_SCALE: f64 = 10.0;

enum Src {
    Instr(usize),
    Obs(usize),
    Tok(usize),
}

impl<S: Scalar> Policy<S> {
    /// Trunk parameters are named `trunk.*`, adapter parameters `adapter.*`.
    pub fn new<R: Rng>(cfg: PolicyConfig, binding: Binding<S>, rng: &mut R) -> Result<Self> {
        if cfg.width == 0 || cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                cfg.width, cfg.heads
            )));
        }
        if cfg.context == 0 || cfg.obs_slots == 0 || cfg.obs_dim == 0 || cfg.num_instructions == 0 {
            return Err(Error::Config(
                "context, obs_slots, obs_dim and num_instructions must be positive".into(),
            ));
        }
        let need = 1 + cfg.context * (cfg.obs_slots + binding.slots_per_action());
        if need > cfg.max_seq_len {
            return Err(Error::ContextOverflow {
                got: need,
                capacity: cfg.max_seq_len,
            });
        }
        let w = cfg.width;
        let mut store = ParamStore::new();
        let emb_init = Init::Normal(0.02);
        let instr = matrix_param(
            &mut store,
            "trunk.instr",
            cfg.num_instructions,
            w,
            emb_init,
            rng,
        );
        let pos = matrix_param(&mut store, "trunk.pos", cfg.max_seq_len, w, emb_init, rng);
        let gate = matrix_param(
            &mut store,
            "trunk.gate",
            cfg.num_instructions,
            cfg.obs_dim,
            Init::Zeros,
            rng,
        );
        let obs_proj = Linear::new(
            &mut store,
            "trunk.obs",
            cfg.obs_dim,
            cfg.obs_slots * w,
            Init::FanIn,
            rng,
        );
        let blocks = (0..cfg.layers)
            .map(|i| {
                let n = |s: &str| format!("trunk.block{i}.{s}");
                Block {
                    ln1: LayerNorm::new(&mut store, &n("ln1"), w),
                    qkv: Linear::new(&mut store, &n("qkv"), w, 3 * w, Init::FanIn, rng),
                    proj: Linear::new(&mut store, &n("proj"), w, w, Init::FanIn, rng),
                    ln2: LayerNorm::new(&mut store, &n("ln2"), w),
                    fc1: Linear::new(
                        &mut store,
                        &n("fc1"),
                        w,
                        cfg.mlp_ratio * w,
                        Init::FanIn,
                        rng,
                    ),
                    fc2: Linear::new(
                        &mut store,
                        &n("fc2"),
                        cfg.mlp_ratio * w,
                        w,
                        Init::FanIn,
                        rng,
                    ),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "trunk.ln_f", w);
        let head = match &binding {
            Binding::Tokens(a) => {
                let v = a.vocab_size();
                let emb = matrix_param(&mut store, "adapter.emb", v, w, emb_init, rng);
                // Zero output layer: the untrained policy is uniform over tokens.
                let out = Linear::new(&mut store, "adapter.head", w, v, Init::Zeros, rng);
                Head::Tokens { emb, out }
            }
            Binding::Regress(b) => Head::Regress(RegressionHead::new(
                &mut store,
                "adapter.pred",
                w + cfg.proprio_dims,
                cfg.head_hidden,
                b.dims(),
                rng,
            )),
            Binding::Categorical(n) => {
                let head =
                    CategoricalHead::new(&mut store, "adapter.pred", w, cfg.head_hidden, *n, rng);
                let emb = matrix_param(&mut store, "adapter.emb", *n, w, emb_init, rng);
                Head::Categorical { head, emb }
            }
        };
        let value = Linear::new(&mut store, "value", w, 1, Init::Zeros, rng);
        Ok(Self {
            cfg,
            binding,
            store,
            instr,
            gate,
            pos,
            obs_proj,
            blocks,
            ln_f,
            head,
            value,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn binding(&self) -> &Binding<S> {
        &self.binding
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    fn token_table(&self) -> Option<ParamId> {
        match &self.head {
            Head::Tokens { emb, .. } | Head::Categorical { emb, .. } => Some(*emb),
            Head::Regress(_) => None,
        }
    }

    /// Final hidden states `[batch * seq_len, width]` for a batch of
    /// windows, right-padded to the longest.
    pub fn hidden(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        seqs: &[Sequence<S>],
    ) -> Result<(Var, Layout)> {
        let (mut x, layout) = self.embed(g, p, seqs)?;
        let batch = seqs.len();
        for blk in &self.blocks {
            let h = blk.ln1.forward(g, p, x)?;
            let qkv = blk.qkv.forward(g, p, h)?;
            let a = g.causal_attention(qkv, batch, layout.seq_len, self.cfg.heads)?;
            let a = blk.proj.forward(g, p, a)?;
            x = g.add(x, a)?;
            let h = blk.ln2.forward(g, p, x)?;
            let h = blk.fc1.forward(g, p, h)?;
            let h = g.relu(h);
            let h = blk.fc2.forward(g, p, h)?;
            x = g.add(x, h)?;
        }
        let x = self.ln_f.forward(g, p, x)?;
        Ok((x, layout))
    }

    /// Input embeddings (token, observation or instruction embedding plus
    /// position) before the transformer blocks.
    pub fn embed(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        seqs: &[Sequence<S>],
    ) -> Result<(Var, Layout)> {
        if seqs.is_empty() {
            return Err(Error::shape("policy", "empty batch"));
        }
        let cfg = &self.cfg;
        let (w, n_obs) = (cfg.width, cfg.obs_slots);
        let slots = self.binding.slots_per_action();
        let mut instr_ids = Vec::with_capacity(seqs.len());
        let mut obs_flat: Vec<S> = Vec::new();
        let mut tok_ids = Vec::new();
        let mut plans: Vec<Vec<Src>> = Vec::with_capacity(seqs.len());
        let mut obs_pos = Vec::with_capacity(seqs.len());
        let mut tok_pos = Vec::with_capacity(seqs.len());
        let mut n_steps = 0;
        for (b, s) in seqs.iter().enumerate() {
            if s.obs.is_empty() || s.obs.len() > cfg.context {
                return Err(Error::ContextOverflow {
                    got: s.obs.len(),
                    capacity: cfg.context,
                });
            }
            if s.tokens.len() > s.obs.len() {
                return Err(Error::shape("policy", "more token steps than observations"));
            }
            if s.instruction >= cfg.num_instructions {
                return Err(Error::TokenOutOfRange {
                    token: s.instruction,
                    vocab: cfg.num_instructions,
                });
            }
            instr_ids.push(s.instruction);
            let mut plan = vec![Src::Instr(b)];
            let mut op = Vec::with_capacity(s.obs.len());
            let mut tp = Vec::with_capacity(s.obs.len());
            for (t, o) in s.obs.iter().enumerate() {
                if o.len() != cfg.obs_dim {
                    return Err(Error::DimensionMismatch {
                        expected: cfg.obs_dim,
                        got: o.len(),
                    });
                }
                obs_flat.extend_from_slice(o);
                for k in 0..n_obs {
                    plan.push(Src::Obs(n_steps * n_obs + k));
                }
                op.push(plan.len() - 1);
                n_steps += 1;
                let toks: &[usize] = if slots > 0 {
                    s.tokens.get(t).map_or(&[], Vec::as_slice)
                } else {
                    &[]
                };
                if toks.len() > slots {
                    return Err(Error::WrongTokenCount {
                        expected: slots,
                        got: toks.len(),
                    });
                }
                let mut rows = Vec::with_capacity(toks.len());
                for &tok in toks {
                    tok_ids.push(tok);
                    plan.push(Src::Tok(tok_ids.len() - 1));
                    rows.push(plan.len() - 1);
                }
                tp.push(rows);
            }
            plans.push(plan);
            obs_pos.push(op);
            tok_pos.push(tp);
        }
        let seq_len = plans.iter().map(Vec::len).max().unwrap_or(0);
        if seq_len > cfg.max_seq_len {
            return Err(Error::ContextOverflow {
                got: seq_len,
                capacity: cfg.max_seq_len,
            });
        }
        let batch = seqs.len();

        let instr_e = g.embedding(p.var(self.instr), &instr_ids)?;
        let obs_in = g.constant(Tensor::matrix(n_steps, cfg.obs_dim, obs_flat)?);
        // Per-instruction multiplicative gate on the raw observation, zero at init.
        let step_instr: Vec<usize> = seqs
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.instruction, s.obs.len()))
            .collect();
        let gate = g.embedding(p.var(self.gate), &step_instr)?;
        let gate = g.scale(gate, S::of(GATE_SCALE));
        let gated = g.mul(obs_in, gate)?;
        let obs_in = g.add(obs_in, gated)?;
        let obs_e = self.obs_proj.forward(g, p, obs_in)?;
        let obs_e = g.reshape(obs_e, &[n_steps * n_obs, w])?;
        let mut parts = vec![instr_e, obs_e];
        if !tok_ids.is_empty() {
            let table = self.token_table().expect("token slots imply a token table");
            parts.push(g.embedding(p.var(table), &tok_ids)?);
        }
        let all = g.concat(&parts, 0)?;
        let (obs_off, tok_off) = (batch, batch + n_steps * n_obs);
        let mut order = Vec::with_capacity(batch * seq_len);
        for plan in &plans {
            for i in 0..seq_len {
                order.push(match plan.get(i) {
                    Some(Src::Instr(b)) => *b,
                    Some(Src::Obs(k)) => obs_off + k,
                    Some(Src::Tok(k)) => tok_off + k,
                    None => 0,
                });
            }
        }
        let x = g.gather(all, &order)?;
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();
        let pe = g.embedding(p.var(self.pos), &pos_ids)?;
        let x = g.add(x, pe)?;
        let off = |b: usize, r: usize| b * seq_len + r;
        let layout = Layout {
            seq_len,
            obs_rows: obs_pos
                .iter()
                .enumerate()
                .map(|(b, v)| v.iter().map(|&r| off(b, r)).collect())
                .collect(),
            token_rows: tok_pos
                .iter()
                .enumerate()
                .map(|(b, v)| {
                    v.iter()
                        .map(|rows| rows.iter().map(|&r| off(b, r)).collect())
                        .collect()
                })
                .collect(),
        };
        Ok((x, layout))
    }

    /// Token (or categorical) logits at the given hidden rows.
    pub fn logits(&self, g: &mut Graph<S>, p: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather(hidden, rows)?;
        match &self.head {
            Head::Tokens { out, .. } => out.forward(g, p, h),
            Head::Categorical { head, .. } => head.logits(g, p, h),
            Head::Regress(_) => Err(Error::NotDiscrete),
        }
    }

    /// Regressed actions at the given rows; `proprio` is `[rows, proprio_dims]`.
    pub fn regress(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        hidden: Var,
        rows: &[usize],
        proprio: Vec<S>,
    ) -> Result<Var> {
        let Head::Regress(head) = &self.head else {
            return Err(Error::NotContinuous);
        };
        let mut h = g.gather(hidden, rows)?;
        if self.cfg.proprio_dims > 0 {
            let pr = g.constant(Tensor::matrix(rows.len(), self.cfg.proprio_dims, proprio)?);
            h = g.concat(&[h, pr], 1)?;
        }
        head.forward(g, p, h)
    }

    pub fn values(&self, g: &mut Graph<S>, p: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather(hidden, rows)?;
        self.value.forward(g, p, h)
    }

    fn proprio_of(&self, obs: &[S]) -> Vec<S> {
        obs[..self.cfg.proprio_dims].to_vec()
    }

    /// Supervised loss averaged over every step of every window.
    ///
    /// Token bindings: the sum over each step's target tokens of the
    /// cross-entropy, where the targets are `seq.tokens`. Regression: MSE
    /// against `targets` (one action per step). Categorical: cross-entropy
    /// against `seq.tokens[t][0]`.
    pub fn teacher_forced_loss(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        seqs: &[Sequence<S>],
        targets: Option<&[Vec<Vec<S>>]>,
    ) -> Result<Var> {
        let (hidden, layout) = self.hidden(g, p, seqs)?;
        let steps: usize = seqs.iter().map(|s| s.obs.len()).sum();
        let per_step = S::one() / S::of(steps as f64);
        match &self.binding {
            Binding::Regress(bounds) => {
                let targets = targets.ok_or_else(|| {
                    Error::EncodeFailure("regression needs action targets".into())
                })?;
                let mut rows = Vec::new();
                let mut prop = Vec::new();
                let mut y = Vec::new();
                for (b, s) in seqs.iter().enumerate() {
                    if targets[b].len() != s.obs.len() {
                        return Err(Error::shape("teacher_forced_loss", "one target per step"));
                    }
                    for (t, o) in s.obs.iter().enumerate() {
                        rows.push(layout.obs_rows[b][t]);
                        prop.extend(self.proprio_of(o));
                        if targets[b][t].len() != bounds.dims() {
                            return Err(Error::DimensionMismatch {
                                expected: bounds.dims(),
                                got: targets[b][t].len(),
                            });
                        }
                        y.extend_from_slice(&targets[b][t]);
                    }
                }
                let pred = self.regress(g, p, hidden, &rows, prop)?;
                let yv = g.constant(Tensor::matrix(rows.len(), bounds.dims(), y)?);
                g.mse(pred, yv)
            }
            Binding::Tokens(_) | Binding::Categorical(_) => {
                let (rows, tgt) = self.prediction_sites(seqs, &layout)?;
                let logits = self.logits(g, p, hidden, &rows)?;
                g.cross_entropy(logits, &tgt, &vec![per_step; rows.len()], None)
            }
        }
    }

    /// Hidden rows and target tokens for every predicted token: the last
    /// observation slot predicts the first token, token `j` predicts `j + 1`.
    pub fn prediction_sites(
        &self,
        seqs: &[Sequence<S>],
        layout: &Layout,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut rows = Vec::new();
        let mut tgt = Vec::new();
        for (b, s) in seqs.iter().enumerate() {
            if s.tokens.len() != s.obs.len() {
                return Err(Error::shape(
                    "teacher_forced_loss",
                    "every step needs target tokens",
                ));
            }
            for (t, toks) in s.tokens.iter().enumerate() {
                if toks.is_empty() {
                    return Err(Error::WrongTokenCount {
                        expected: 1,
                        got: 0,
                    });
                }
                for (j, &tok) in toks.iter().enumerate() {
                    rows.push(if j == 0 {
                        layout.obs_rows[b][t]
                    } else {
                        layout.token_rows[b][t][j - 1]
                    });
                    tgt.push(tok);
                }
            }
        }
        Ok((rows, tgt))
    }

    fn choose<R: Rng>(
        logits: &[S],
        mask: Option<&[bool]>,
        mode: Decoding,
        rng: &mut R,
    ) -> Result<usize> {
        if mask.is_some_and(|m| !m.iter().any(|&b| b)) {
            return Err(Error::Numerical("token mask allows nothing".into()));
        }
        let allowed = |i: usize| mask.is_none_or(|m| m[i]);
        match mode {
            Decoding::Greedy => {
                let mut best: Option<usize> = None;
                for (i, &x) in logits.iter().enumerate() {
                    if allowed(i) && best.is_none_or(|b| x > logits[b]) {
                        best = Some(i);
                    }
                }
                best.ok_or_else(|| Error::Numerical("no finite logit".into()))
            }
            Decoding::Sample { temperature } => {
                let t = S::of(temperature.max(1e-6));
                let scaled: Vec<S> = logits.iter().map(|&x| x / t).collect();
                let probs = masked_softmax(&scaled, mask);
                let mut u = S::of(rng.random::<f64>());
                let mut last = 0;
                for (i, &q) in probs.iter().enumerate() {
                    if q > S::zero() {
                        last = i;
                        if u < q {
                            return Ok(i);
                        }
                        u -= q;
                    }
                }
                Ok(last)
            }
        }
    }

    /// Value-head estimates for contexts awaiting an action.
    pub fn state_values(&self, contexts: &[Sequence<S>]) -> Result<Vec<S>> {
        if contexts.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let (hidden, layout) = self.hidden(&mut g, &p, contexts)?;
        let rows: Vec<usize> = layout
            .obs_rows
            .iter()
            .map(|r| *r.last().expect("non-empty"))
            .collect();
        let v = self.values(&mut g, &p, hidden, &rows)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Appends tokens the mask leaves no choice about, which need no forward
    /// pass. Returns whether the action is complete.
    fn extend_forced(adapter: &dyn TokenAdapter<S>, emitted: &mut Vec<usize>) -> Result<bool> {
        loop {
            if adapter.is_complete(emitted) {
                return Ok(true);
            }
            let Some(mask) = adapter.next_token_mask(emitted)? else {
                return Ok(false);
            };
            let mut allowed = mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i);
            match (allowed.next(), allowed.next()) {
                (Some(only), None) => emitted.push(only),
                _ => return Ok(false),
            }
        }
    }

    /// Emits one action per context. Each context's last observation is the
    /// current one and has no tokens yet.
    pub fn act<R: Rng>(
        &self,
        contexts: &[Sequence<S>],
        mode: Decoding,
        rng: &mut R,
    ) -> Result<Vec<ActOutput<S>>> {
        for c in contexts {
            if c.tokens.len() + 1 != c.obs.len() {
                return Err(Error::shape(
                    "act",
                    "context must end with an observation awaiting an action",
                ));
            }
        }
        let n = contexts.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let (hidden, layout) = self.hidden(&mut g, &p, contexts)?;
        let first_rows: Vec<usize> = layout
            .obs_rows
            .iter()
            .map(|r| *r.last().expect("non-empty"))
            .collect();
        let vals = self.values(&mut g, &p, hidden, &first_rows)?;
        let values: Vec<S> = g.value(vals).data().to_vec();
        match &self.binding {
            Binding::Regress(bounds) => {
                let prop: Vec<S> = contexts
                    .iter()
                    .flat_map(|c| self.proprio_of(c.obs.last().expect("obs")))
                    .collect();
                let out = self.regress(&mut g, &p, hidden, &first_rows, prop)?;
                let out = g.value(out);
                (0..n)
                    .map(|i| {
                        Ok(ActOutput {
                            tokens: Vec::new(),
                            action: Action::Continuous(clamp_action(out.row(i), bounds)?),
                            value: values[i],
                        })
                    })
                    .collect()
            }
            Binding::Categorical(_) => {
                let logits = self.logits(&mut g, &p, hidden, &first_rows)?;
                let lt = g.value(logits);
                (0..n)
                    .map(|i| {
                        let a = Self::choose(lt.row(i), None, mode, rng)?;
                        Ok(ActOutput {
                            tokens: vec![a],
                            action: Action::Discrete(a),
                            value: values[i],
                        })
                    })
                    .collect()
            }
            Binding::Tokens(adapter) => {
                let m = adapter.tokens_per_action();
                let mut emitted: Vec<Vec<usize>> = vec![Vec::with_capacity(m); n];
                let mut active: Vec<usize> = (0..n).collect();
                // The first token comes from the pass above.
                let logits = self.logits(&mut g, &p, hidden, &first_rows)?;
                let lt = g.value(logits).clone();
                let mut next_active = Vec::new();
                for &i in &active {
                    let mask = adapter.next_token_mask(&[])?;
                    let tok = Self::choose(lt.row(i), mask.as_deref(), mode, rng)?;
                    emitted[i].push(tok);
                    if !Self::extend_forced(adapter.as_ref(), &mut emitted[i])? {
                        next_active.push(i);
                    }
                }
                active = next_active;
                while !active.is_empty() {
                    let batch: Vec<Sequence<S>> = active
                        .iter()
                        .map(|&i| {
                            let mut c = contexts[i].clone();
                            c.tokens.push(emitted[i].clone());
                            c
                        })
                        .collect();
                    let mut g = Graph::new();
                    let p = self.store.bind_frozen(&mut g);
                    let (hidden, layout) = self.hidden(&mut g, &p, &batch)?;
                    let rows: Vec<usize> = layout
                        .token_rows
                        .iter()
                        .map(|steps| *steps.last().and_then(|t| t.last()).expect("emitted token"))
                        .collect();
                    let logits = self.logits(&mut g, &p, hidden, &rows)?;
                    let lt = g.value(logits);
                    let mut next_active = Vec::new();
                    for (k, &i) in active.iter().enumerate() {
                        let mask = adapter.next_token_mask(&emitted[i])?;
                        let tok = Self::choose(lt.row(k), mask.as_deref(), mode, rng)?;
                        emitted[i].push(tok);
                        if !Self::extend_forced(adapter.as_ref(), &mut emitted[i])? {
                            next_active.push(i);
                        }
                    }
                    active = next_active;
                }
                emitted
                    .into_iter()
                    .zip(values)
                    .map(|(tokens, value)| {
                        let action = adapter.decode(&tokens)?;
                        Ok(ActOutput {
                            tokens,
                            action,
                            value,
                        })
                    })
                    .collect()
            }
        }
    }

    /// Copies every parameter of `other` whose name and shape match.
    /// Returns how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore<S>) -> usize {
        let mut copied = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id).to_string();
            if let Some(src) = other.find(&name) {
                if other.get(src).shape() == self.store.get(id).shape() {
                    *self.store.get_mut(id) = other.get(src).clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
