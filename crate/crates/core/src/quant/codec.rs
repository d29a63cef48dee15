//! Residual vector-quantized action codec.
//!
//! An MLP encoder maps a `D`-dim action to an `L`-dim latent, `M` codebooks of
//! `K` codes each quantize that latent residually, and an MLP decoder maps the
//! summed codes back to an action. Plain VQ is the `M = 1` case.
//!
//! File layout, little-endian: `b"ASACODEC"`, version (u32), `D`, `L`, `M`,
//! `K` (u32 each), encoder layers then decoder layers (per layer the
//! `[fan_in, fan_out]` weight matrix row-major followed by the bias), then the
//! `M * K * L` codebook entries, all as f32. Both MLPs have four layers of a
//! shared hidden width, which the reader recovers from the payload length.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};

use crate::action::{clamp_action, Action, ActionTokens, BoxSpace, TokenAdapter};
use crate::error::{Error, Result};
use crate::grad::nn::{Init, Linear, Mlp};
use crate::grad::{get_f32s, get_u32, put_f32s, put_u32, Graph, ParamStore, Tensor};
use crate::scalar::Scalar;

use super::RoundTrip;

pub const CODEC_MAGIC: &[u8; 8] = b"ASACODEC";
pub const CODEC_VERSION: u32 = 1;
pub const CODEC_LAYERS: usize = 4;

/// Shape of a codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecShape {
    pub action_dim: usize,
    pub latent_dim: usize,
    pub codebooks: usize,
    pub codes: usize,
    pub hidden: usize,
}

impl CodecShape {
    pub fn validate(&self) -> Result<()> {
        if self.action_dim == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("codec dimensions must be positive".into()));
        }
        if self.codebooks == 0 || self.codes == 0 {
            return Err(Error::Config(
                "codec needs M >= 1 codebooks of K >= 1 codes".into(),
            ));
        }
        Ok(())
    }

    fn mlp_values(inp: usize, hidden: usize, out: usize) -> usize {
        inp * hidden + hidden + 2 * (hidden * hidden + hidden) + hidden * out + out
    }

    /// Number of f32 values following the header.
    pub fn payload_values(&self) -> usize {
        Self::mlp_values(self.action_dim, self.hidden, self.latent_dim)
            + Self::mlp_values(self.latent_dim, self.hidden, self.action_dim)
            + self.codebooks * self.codes * self.latent_dim
    }
}

#[derive(Clone)]
pub struct ResidualCodec<S: Scalar> {
    shape: CodecShape,
    params: ParamStore<S>,
    encoder: Mlp,
    decoder: Mlp,
    /// `codebooks[m]` is `K * L` row-major.
    codebooks: Vec<Vec<S>>,
    bounds: BoxSpace,
}

impl<S: Scalar> ResidualCodec<S> {
    /// Fresh codec with randomly initialised MLPs and zero codebooks.
    pub fn new<R: Rng>(shape: CodecShape, bounds: BoxSpace, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        if bounds.dims() != shape.action_dim {
            return Err(Error::DimensionMismatch {
                expected: shape.action_dim,
                got: bounds.dims(),
            });
        }
        let mut params = ParamStore::new();
        let h = shape.hidden;
        let encoder = Mlp::new(
            &mut params,
            "enc",
            &[shape.action_dim, h, h, h, shape.latent_dim],
            Init::FanIn,
            rng,
        );
        let decoder = Mlp::new(
            &mut params,
            "dec",
            &[shape.latent_dim, h, h, h, shape.action_dim],
            Init::FanIn,
            rng,
        );
        let codebooks = vec![vec![S::zero(); shape.codes * shape.latent_dim]; shape.codebooks];
        Ok(Self {
            shape,
            params,
            encoder,
            decoder,
            codebooks,
            bounds,
        })
    }

    /// Codec whose encoder and decoder are exact identity maps (`L = D`,
    /// hidden width `2D`), with the given codebooks.
    pub fn identity(bounds: BoxSpace, codebooks: Vec<Vec<Vec<S>>>) -> Result<Self> {
        let d = bounds.dims();
        let k = codebooks.first().map_or(0, |c| c.len());
        let shape = CodecShape {
            action_dim: d,
            latent_dim: d,
            codebooks: codebooks.len(),
            codes: k,
            hidden: 2 * d,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut codec = Self::new(shape, bounds, &mut rng)?;
        // relu(x) - relu(-x) = x: split into [x, -x], pass through, recombine.
        let split = |i: usize, j: usize| -> S {
            if j == i {
                S::one()
            } else if j == i + d {
                -S::one()
            } else {
                S::zero()
            }
        };
        for mlp in [codec.encoder.clone(), codec.decoder.clone()] {
            for (li, layer) in mlp.layers.iter().enumerate() {
                let (fi, fo) = (layer.fan_in, layer.fan_out);
                let w: Vec<S> = (0..fi * fo)
                    .map(|idx| {
                        let (r, c) = (idx / fo, idx % fo);
                        if li == 0 {
                            split(r, c)
                        } else if li == CODEC_LAYERS - 1 {
                            split(c, r)
                        } else if r == c {
                            S::one()
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                *codec.params.get_mut(layer.w) = Tensor::matrix(fi, fo, w)?;
                *codec.params.get_mut(layer.b) = Tensor::zeros(&[fo]);
            }
        }
        for (m, book) in codebooks.into_iter().enumerate() {
            codec.set_codebook(m, book)?;
        }
        Ok(codec)
    }

    pub fn shape(&self) -> CodecShape {
        self.shape
    }

    pub fn bounds(&self) -> &BoxSpace {
        &self.bounds
    }

    /// Rebinds the action box used to clamp decoded actions.
    pub fn set_bounds(&mut self, bounds: BoxSpace) -> Result<()> {
        if bounds.dims() != self.shape.action_dim {
            return Err(Error::DimensionMismatch {
                expected: self.shape.action_dim,
                got: bounds.dims(),
            });
        }
        self.bounds = bounds;
        Ok(())
    }

    pub(crate) fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub(crate) fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub(crate) fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn code(&self, m: usize, k: usize) -> &[S] {
        let l = self.shape.latent_dim;
        &self.codebooks[m][k * l..(k + 1) * l]
    }

    pub(crate) fn codebook_mut(&mut self, m: usize) -> &mut [S] {
        &mut self.codebooks[m]
    }

    /// Rounds weights and codes to f32, as stored on disk.
    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
        for book in &mut self.codebooks {
            for x in book.iter_mut() {
                *x = S::of(x.to_f64_lossy() as f32 as f64);
            }
        }
    }

    pub fn set_codebook(&mut self, m: usize, codes: Vec<Vec<S>>) -> Result<()> {
        let (k, l) = (self.shape.codes, self.shape.latent_dim);
        if codes.len() != k || codes.iter().any(|c| c.len() != l) {
            return Err(Error::shape(
                "codebook",
                format!("expected {k} codes of dim {l}"),
            ));
        }
        self.codebooks[m] = codes.into_iter().flatten().collect();
        Ok(())
    }

    fn run_mlp(&self, mlp: &Mlp, rows: usize, cols: usize, data: Vec<S>) -> Result<Vec<Vec<S>>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(Tensor::matrix(rows, cols, data)?);
        let y = mlp.forward(&mut g, &p, x)?;
        let out = g.value(y);
        Ok((0..rows).map(|r| out.row(r).to_vec()).collect())
    }

    /// Encoder outputs `f(a)` for a batch of actions.
    pub fn encode_latents(&self, actions: &[Vec<S>]) -> Result<Vec<Vec<S>>> {
        let d = self.shape.action_dim;
        if let Some(bad) = actions.iter().find(|a| a.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        if actions.is_empty() {
            return Ok(Vec::new());
        }
        self.run_mlp(&self.encoder, actions.len(), d, actions.concat())
    }

    /// Decoder outputs for a batch of latents, without clamping.
    pub fn decode_latents(&self, latents: &[Vec<S>]) -> Result<Vec<Vec<S>>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        self.run_mlp(
            &self.decoder,
            latents.len(),
            self.shape.latent_dim,
            latents.concat(),
        )
    }

    /// Nearest code of codebook `m` to `r`; ties go to the lowest index.
    pub fn nearest(&self, m: usize, r: &[S]) -> (usize, S) {
        let l = self.shape.latent_dim;
        let mut best = (0, S::infinity());
        for (k, code) in self.codebooks[m].chunks(l).enumerate() {
            let d: S = r.iter().zip(code).map(|(&x, &c)| (x - c) * (x - c)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Greedy residual quantization of one latent. Returns the tokens and the
    /// summed codes.
    pub fn quantize_latent(&self, z: &[S]) -> (Vec<usize>, Vec<S>) {
        let mut residual = z.to_vec();
        let mut sum = vec![S::zero(); z.len()];
        let mut tokens = Vec::with_capacity(self.shape.codebooks);
        for m in 0..self.shape.codebooks {
            let (k, _) = self.nearest(m, &residual);
            for ((r, s), &c) in residual.iter_mut().zip(sum.iter_mut()).zip(self.code(m, k)) {
                *r -= c;
                *s += c;
            }
            tokens.push(k);
        }
        (tokens, sum)
    }

    /// Sum of the selected codes.
    pub fn codes_sum(&self, tokens: &[usize]) -> Result<Vec<S>> {
        if tokens.len() != self.shape.codebooks {
            return Err(Error::WrongTokenCount {
                expected: self.shape.codebooks,
                got: tokens.len(),
            });
        }
        let mut sum = vec![S::zero(); self.shape.latent_dim];
        for (m, &k) in tokens.iter().enumerate() {
            if k >= self.shape.codes {
                return Err(Error::TokenOutOfRange {
                    token: k,
                    vocab: self.shape.codes,
                });
            }
            for (s, &c) in sum.iter_mut().zip(self.code(m, k)) {
                *s += c;
            }
        }
        Ok(sum)
    }

    pub fn tokenize(&self, a: &[S]) -> Result<ActionTokens> {
        Ok(self.tokenize_batch(&[a.to_vec()])?.remove(0))
    }

    pub fn tokenize_batch(&self, actions: &[Vec<S>]) -> Result<Vec<ActionTokens>> {
        Ok(self
            .encode_latents(actions)?
            .iter()
            .map(|z| ActionTokens(self.quantize_latent(z).0))
            .collect())
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Result<Vec<S>> {
        Ok(self.detokenize_batch(&[tokens.to_vec()])?.remove(0))
    }

    pub fn detokenize_batch(&self, tokens: &[Vec<usize>]) -> Result<Vec<Vec<S>>> {
        let sums = tokens
            .iter()
            .map(|t| self.codes_sum(t))
            .collect::<Result<Vec<_>>>()?;
        self.decode_latents(&sums)?
            .iter()
            .map(|a| clamp_action(a, &self.bounds))
            .collect()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CODEC_MAGIC)?;
        put_u32(w, CODEC_VERSION)?;
        let s = self.shape;
        for v in [s.action_dim, s.latent_dim, s.codebooks, s.codes] {
            put_u32(w, v as u32)?;
        }
        for mlp in [&self.encoder, &self.decoder] {
            for layer in &mlp.layers {
                put_f32s(w, self.params.get(layer.w).data())?;
                put_f32s(w, self.params.get(layer.b).data())?;
            }
        }
        for book in &self.codebooks {
            put_f32s(w, book)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads a codec; decoded actions are clamped to `[-1, 1]^D` until
    /// [`Self::set_bounds`] says otherwise.
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CODEC_MAGIC {
            return Err(Error::Parse("not an ASACODEC file".into()));
        }
        let version = get_u32(r)?;
        if version != CODEC_VERSION {
            return Err(Error::Parse(format!("unsupported codec version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = get_u32(r)? as usize;
        }
        let [action_dim, latent_dim, codebooks, codes] = dims;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if rest.len() % 4 != 0 {
            return Err(Error::Parse(
                "codec payload is not a whole number of f32 values".into(),
            ));
        }
        let values = rest.len() / 4;
        let hidden = Self::solve_hidden(
            action_dim,
            latent_dim,
            codebooks * codes * latent_dim,
            values,
        )?;
        let shape = CodecShape {
            action_dim,
            latent_dim,
            codebooks,
            codes,
            hidden,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut codec = Self::new(shape, BoxSpace::symmetric(action_dim, 1.0), &mut rng)?;
        let mut cursor = rest.as_slice();
        let layers: Vec<Linear> = codec
            .encoder
            .layers
            .iter()
            .chain(&codec.decoder.layers)
            .cloned()
            .collect();
        for layer in layers {
            let w = get_f32s(&mut cursor, layer.fan_in * layer.fan_out)?;
            *codec.params.get_mut(layer.w) = Tensor::matrix(layer.fan_in, layer.fan_out, w)?;
            let b = get_f32s(&mut cursor, layer.fan_out)?;
            *codec.params.get_mut(layer.b) = Tensor::vector(b);
        }
        for m in 0..codebooks {
            codec.codebooks[m] = get_f32s(&mut cursor, codes * latent_dim)?;
        }
        Ok(codec)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read(&mut &bytes[..])
    }

    fn solve_hidden(d: usize, l: usize, book_values: usize, values: usize) -> Result<usize> {
        let bad = || {
            Error::Parse(format!(
                "codec payload of {values} values matches no hidden width"
            ))
        };
        let net = values.checked_sub(book_values).ok_or_else(bad)?;
        // 4h^2 + (2D + 2L + 6)h + (D + L) = net
        let (a, b, c) = (4.0, (2 * d + 2 * l + 6) as f64, (d + l) as f64 - net as f64);
        let h = ((-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)).round() as usize;
        let shape = CodecShape {
            action_dim: d,
            latent_dim: l,
            codebooks: 1,
            codes: 0,
            hidden: h,
        };
        if h == 0 || shape.payload_values() != net {
            return Err(bad());
        }
        Ok(h)
    }
}

impl<S: Scalar> TokenAdapter<S> for ResidualCodec<S> {
    fn vocab_size(&self) -> usize {
        self.shape.codes
    }

    fn tokens_per_action(&self) -> usize {
        self.shape.codebooks
    }

    fn encode(&self, action: &Action<S>) -> Result<ActionTokens> {
        match action {
            Action::Continuous(a) => self.tokenize(a),
            _ => Err(Error::EncodeFailure(
                "codec needs a continuous action".into(),
            )),
        }
    }

    fn decode(&self, tokens: &[usize]) -> Result<Action<S>> {
        self.detokenize(tokens).map(Action::Continuous)
    }
}

impl<S: Scalar> RoundTrip<S> for ResidualCodec<S> {
    fn dims(&self) -> usize {
        self.shape.action_dim
    }

    fn round_trip(&self, a: &[S]) -> Result<Vec<S>> {
        let t = self.tokenize(a)?;
        self.detokenize(t.as_slice())
    }

    fn round_trip_batch(&self, actions: &[Vec<S>]) -> Result<Vec<Vec<S>>> {
        let tokens: Vec<Vec<usize>> = self
            .tokenize_batch(actions)?
            .into_iter()
            .map(|t| t.0)
            .collect();
        self.detokenize_batch(&tokens)
    }
}
