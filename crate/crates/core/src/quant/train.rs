//! Codec training: reconstruction + commitment loss through a straight-through
//! quantizer, EMA codebook updates, k-means codebook seeding after an
//! unquantized warm-up, and dead-code resets.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::action::BoxSpace;
use crate::error::{Error, Result};
use crate::grad::{AdamW, AdamWConfig, CosineSchedule, Graph, Tensor};
use crate::scalar::Scalar;

use super::codec::{CodecShape, ResidualCodec};
use super::kmeans::kmeans;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecTrainConfig {
    pub latent_dim: usize,
    pub codebooks: usize,
    pub codes: usize,
    pub hidden: usize,
    pub beta: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    /// Lower bound on optimizer steps; small datasets get extra passes.
    pub min_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of steps trained as a plain autoencoder before the codebooks
    /// are seeded from the latents.
    pub warmup: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            codebooks: 2,
            codes: 64,
            hidden: 128,
            beta: 0.25,
            ema_decay: 0.99,
            epochs: 3,
            min_steps: 2000,
            batch_size: 256,
            lr: 1e-3,
            warmup: 0.25,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CodecReport {
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub dead_code_resets: usize,
    /// `(step, loss)` samples.
    pub losses: Vec<(usize, f64)>,
}

const LAPLACE_EPS: f64 = 1e-5;
const SEED_ITERS: usize = 20;

struct Ema<S> {
    counts: Vec<S>,
    sums: Vec<S>,
}

/// Trains a codec on a set of actions. `init_rng` seeds the networks and the
/// codebooks; `shuffle_rng` orders minibatches.
pub fn train_codec<S: Scalar, R1: Rng, R2: Rng>(
    actions: &[Vec<S>],
    bounds: BoxSpace,
    cfg: &CodecTrainConfig,
    init_rng: &mut R1,
    shuffle_rng: &mut R2,
) -> Result<(ResidualCodec<S>, CodecReport)> {
    if actions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config(
            "codec training needs batch_size and epochs >= 1".into(),
        ));
    }
    let d = bounds.dims();
    if let Some(bad) = actions.iter().find(|a| a.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let shape = CodecShape {
        action_dim: d,
        latent_dim: cfg.latent_dim,
        codebooks: cfg.codebooks,
        codes: cfg.codes,
        hidden: cfg.hidden,
    };
    let mut codec = ResidualCodec::new(shape, bounds, init_rng)?;
    let (l, k_codes, m_books) = (cfg.latent_dim, cfg.codes, cfg.codebooks);

    let n = actions.len();
    let batch = cfg.batch_size.min(n);
    let per_epoch = n.div_ceil(batch);
    let epochs = cfg.epochs.max(cfg.min_steps.div_ceil(per_epoch));
    let total = epochs * per_epoch;

    let warm = ((cfg.warmup.clamp(0.0, 1.0) * total as f64) as usize).min(total - 1);
    let mut ema: Vec<Ema<S>> = Vec::new();

    let schedule = CosineSchedule {
        peak_lr: cfg.lr,
        total,
        warmup_frac: 0.1,
    };
    let mut opt = AdamW::new(codec.params(), AdamWConfig::default());
    let mut report = CodecReport {
        epochs,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    let decay = S::of(cfg.ema_decay);
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(shuffle_rng);
        let mut used = vec![vec![false; k_codes]; m_books];
        let mut last_residuals: Vec<Vec<Vec<S>>> = Vec::new();
        for chunk in order.chunks(batch) {
            if step == warm {
                init_codebooks(&mut codec, actions, init_rng)?;
                ema = (0..m_books)
                    .map(|m| Ema {
                        counts: vec![S::one(); k_codes],
                        sums: codec.codebook_mut(m).to_vec(),
                    })
                    .collect();
                used = vec![vec![false; k_codes]; m_books];
            }
            let quantize = step >= warm;
            let rows = chunk.len();
            let a_flat: Vec<S> = chunk
                .iter()
                .flat_map(|&i| actions[i].iter().copied())
                .collect();

            let mut g = Graph::new();
            let p = codec.params().bind(&mut g);
            let a = g.constant(Tensor::matrix(rows, d, a_flat)?);
            let z = codec.encoder().forward(&mut g, &p, a)?;
            let zv = g.value(z).clone();

            // Greedy residual assignment, recording the residual seen by each stage.
            let mut q = vec![S::zero(); rows * l];
            let mut stage_res: Vec<Vec<Vec<S>>> = vec![Vec::with_capacity(rows); m_books];
            let mut stage_tok: Vec<Vec<usize>> = vec![Vec::with_capacity(rows); m_books];
            for r in (0..rows).filter(|_| quantize) {
                let mut res = zv.row(r).to_vec();
                for m in 0..m_books {
                    let (k, _) = codec.nearest(m, &res);
                    stage_res[m].push(res.clone());
                    stage_tok[m].push(k);
                    used[m][k] = true;
                    for (j, &c) in codec.code(m, k).iter().enumerate() {
                        res[j] -= c;
                        q[r * l + j] += c;
                    }
                }
            }

            let q = if quantize { q } else { zv.data().to_vec() };
            let qv = g.constant(Tensor::matrix(rows, l, q)?);
            let st = g.straight_through(qv, z)?;
            let recon = codec.decoder().forward(&mut g, &p, st)?;
            let rec_loss = g.mse(recon, a)?;
            let commit = g.mse(z, qv)?;
            let commit = g.scale(commit, S::of(cfg.beta));
            let loss = g.add(rec_loss, commit)?;
            let lv = g.value(loss).item().to_f64_lossy();
            if !lv.is_finite() {
                return Err(Error::Numerical(format!(
                    "codec loss is {lv} at step {step}"
                )));
            }
            let mut grads = g.backward(loss)?;
            let grads = codec.params().collect_grads(&p, &mut grads);
            opt.step(codec.params_mut(), &grads, schedule.lr(step));

            for m in 0..ema.len() {
                ema_update(
                    &mut codec,
                    m,
                    &mut ema[m],
                    &stage_res[m],
                    &stage_tok[m],
                    decay,
                );
            }
            report.final_loss = lv;
            if step % 50 == 0 || step + 1 == total {
                report.losses.push((step, lv));
            }
            last_residuals = stage_res;
            step += 1;
        }
        // Only after a full epoch of quantized training.
        if epoch + 1 < epochs && step >= warm + per_epoch {
            report.dead_code_resets +=
                reset_dead_codes(&mut codec, &mut ema, &used, &last_residuals, init_rng);
        }
    }
    report.steps = step;
    codec.round_to_f32();
    Ok((codec, report))
}

/// Greedy residual k-means on the current latents of every action.
fn init_codebooks<S: Scalar, R: Rng>(
    codec: &mut ResidualCodec<S>,
    actions: &[Vec<S>],
    rng: &mut R,
) -> Result<()> {
    let mut residuals = codec.encode_latents(actions)?;
    let shape = codec.shape();
    for m in 0..shape.codebooks {
        let centroids = kmeans(&residuals, shape.codes, SEED_ITERS, rng).centroids;
        for r in residuals.iter_mut() {
            let (k, _) = nearest(&centroids, r);
            for (x, &c) in r.iter_mut().zip(&centroids[k]) {
                *x -= c;
            }
        }
        codec.set_codebook(m, centroids)?;
    }
    Ok(())
}

fn nearest<S: Scalar>(cs: &[Vec<S>], p: &[S]) -> (usize, S) {
    super::kmeans::nearest_index(cs, p)
}

fn ema_update<S: Scalar>(
    codec: &mut ResidualCodec<S>,
    m: usize,
    ema: &mut Ema<S>,
    residuals: &[Vec<S>],
    tokens: &[usize],
    decay: S,
) {
    let l = codec.shape().latent_dim;
    let k_codes = ema.counts.len();
    let mut n_k = vec![S::zero(); k_codes];
    let mut s_k = vec![S::zero(); k_codes * l];
    for (r, &k) in residuals.iter().zip(tokens) {
        n_k[k] += S::one();
        for (s, &x) in s_k[k * l..(k + 1) * l].iter_mut().zip(r) {
            *s += x;
        }
    }
    let keep = S::one() - decay;
    for k in 0..k_codes {
        ema.counts[k] = decay * ema.counts[k] + keep * n_k[k];
    }
    for (s, &x) in ema.sums.iter_mut().zip(&s_k) {
        *s = decay * *s + keep * x;
    }
    let total: S = ema.counts.iter().copied().sum();
    let eps = S::of(LAPLACE_EPS);
    let book = codec.codebook_mut(m);
    for k in 0..k_codes {
        let smoothed = (ema.counts[k] + eps) / (total + S::of(k_codes as f64) * eps) * total;
        for j in 0..l {
            book[k * l + j] = ema.sums[k * l + j] / smoothed;
        }
    }
}

fn reset_dead_codes<S: Scalar, R: Rng>(
    codec: &mut ResidualCodec<S>,
    ema: &mut [Ema<S>],
    used: &[Vec<bool>],
    residuals: &[Vec<Vec<S>>],
    rng: &mut R,
) -> usize {
    let l = codec.shape().latent_dim;
    let mut resets = 0;
    for (m, used_m) in used.iter().enumerate() {
        let pool = &residuals[m];
        if pool.is_empty() {
            continue;
        }
        for (k, &u) in used_m.iter().enumerate() {
            if u {
                continue;
            }
            let fresh = &pool[rng.random_range(0..pool.len())];
            codec.codebook_mut(m)[k * l..(k + 1) * l].copy_from_slice(fresh);
            ema[m].counts[k] = S::one();
            ema[m].sums[k * l..(k + 1) * l].copy_from_slice(fresh);
            resets += 1;
        }
    }
    resets
}
