//! Builds the adapter binding a policy is trained or evaluated with, and the
//! checkpoint header that pins it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::action::ActionSpace;
use crate::discrete::{ActionVocabulary, VocabStyle, WordAdapter};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::policy::{ArtifactRef, Binding, CheckpointHeader, PolicyConfig};
use crate::quant::{ResidualCodec, UniformQuantizer};

use super::config::{AsaConfig, AsaKind, ExperimentConfig};

pub const VOCAB_FILE: &str = "vocab.tsv";

/// File an adapter depends on.
pub struct ArtifactFile {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
    /// Built from the config rather than read from disk; saved next to the
    /// checkpoint under `path`.
    pub generated: bool,
}

/// A resolved binding plus the artifact it was built from, if any.
pub struct Resolved {
    pub binding: Binding<f64>,
    pub artifact: Option<ArtifactFile>,
    /// Codec or uniform quantizer, for reconstruction metrics.
    pub round_trip: Option<Arc<dyn crate::quant::RoundTrip<f64>>>,
}

fn style(kind: AsaKind) -> VocabStyle {
    if kind == AsaKind::Lang {
        VocabStyle::Numeric
    } else {
        VocabStyle::Semantic
    }
}

/// Builds the binding for `asa` over `space`. Codec-backed kinds read
/// `codec_path`; word kinds build their vocabulary from the action names.
pub fn resolve(asa: &AsaConfig, space: &ActionSpace, codec_path: &Path) -> Result<Resolved> {
    match asa.kind {
        AsaKind::Uniform => {
            let q = Arc::new(UniformQuantizer::new(space.as_box()?.clone(), asa.bins)?);
            Ok(Resolved {
                binding: Binding::Tokens(q.clone()),
                artifact: None,
                round_trip: Some(q),
            })
        }
        AsaKind::Vq | AsaKind::Rvq => {
            let bytes = std::fs::read(codec_path).map_err(|e| {
                Error::AdapterArtifactMissing(format!("{}: {e}", codec_path.display()))
            })?;
            let codec = Arc::new(load_codec(&bytes, space)?);
            let want = asa.codec_config();
            let shape = codec.shape();
            if shape.codebooks != want.codebooks || shape.codes != want.codes {
                return Err(Error::Config(format!(
                    "codec {} has M={} K={}, config asks for M={} K={}",
                    codec_path.display(),
                    shape.codebooks,
                    shape.codes,
                    want.codebooks,
                    want.codes
                )));
            }
            Ok(Resolved {
                binding: Binding::Tokens(codec.clone()),
                artifact: Some(ArtifactFile {
                    path: codec_path.to_path_buf(),
                    bytes,
                    generated: false,
                }),
                round_trip: Some(codec),
            })
        }
        AsaKind::Semlang | AsaKind::Lang => {
            let adapter = WordAdapter::build(space, style(asa.kind), asa.vocab_size, asa.filter)?;
            let bytes = adapter.vocab().to_text().into_bytes();
            Ok(Resolved {
                binding: Binding::Tokens(Arc::new(adapter)),
                artifact: Some(ArtifactFile {
                    path: PathBuf::from(VOCAB_FILE),
                    bytes,
                    generated: true,
                }),
                round_trip: None,
            })
        }
        AsaKind::Pred => {
            let binding = match space {
                ActionSpace::Continuous(b) => Binding::Regress(b.clone()),
                ActionSpace::Discrete(d) => Binding::Categorical(d.len()),
            };
            Ok(Resolved {
                binding,
                artifact: None,
                round_trip: None,
            })
        }
    }
}

fn load_codec(bytes: &[u8], space: &ActionSpace) -> Result<ResidualCodec<f64>> {
    let mut codec = ResidualCodec::<f64>::from_bytes(bytes)?;
    codec.set_bounds(space.as_box()?.clone())?;
    Ok(codec)
}

/// Policy shape for an environment: observation size, instruction count and
/// the proprioceptive input of the regression head.
pub fn policy_config(cfg: &ExperimentConfig, env: &dyn Env) -> PolicyConfig {
    let mut p = cfg.policy.clone();
    p.obs_dim = env.obs_dim();
    p.num_instructions = env.num_instructions();
    p.proprio_dims = if cfg.asa.kind == AsaKind::Pred && env.action_space().is_continuous() {
        env.proprio_dim()
    } else {
        0
    };
    p
}

/// Header recording the adapter; artifact paths are stored relative to the
/// checkpoint directory when they live inside it.
pub fn header(
    asa: &AsaConfig,
    policy: &PolicyConfig,
    artifact: Option<&ArtifactRef>,
) -> CheckpointHeader {
    CheckpointHeader {
        asa: asa.kind.name().to_string(),
        asa_config: serde_json::to_value(asa).expect("config serializes"),
        artifact: artifact.cloned(),
        policy: policy.clone(),
    }
}

/// Artifact reference for `path` as seen from `ckpt_dir`.
pub fn artifact_ref(path: &Path, ckpt_dir: &Path, bytes: &[u8]) -> ArtifactRef {
    let shown = path.strip_prefix(ckpt_dir).unwrap_or(path);
    ArtifactRef::for_bytes(shown.to_string_lossy(), bytes)
}

/// Rebuilds the binding recorded in a checkpoint header, verifying the
/// artifact hash.
pub fn binding_from_header(
    h: &CheckpointHeader,
    space: &ActionSpace,
    ckpt_dir: &Path,
) -> Result<Binding<f64>> {
    let asa: AsaConfig = serde_json::from_value(h.asa_config.clone())
        .map_err(|e| Error::Parse(format!("checkpoint adapter config: {e}")))?;
    if asa.kind.name() != h.asa {
        return Err(Error::Parse(format!(
            "checkpoint names adapter {} but stores {}",
            h.asa,
            asa.kind.name()
        )));
    }
    let artifact = |what: &str| -> Result<Vec<u8>> {
        let a = h.artifact.as_ref().ok_or_else(|| {
            Error::AdapterArtifactMissing(format!("checkpoint has no {what} reference"))
        })?;
        let path = Path::new(&a.path);
        let path = if path.is_relative() {
            ckpt_dir.join(path)
        } else {
            path.to_path_buf()
        };
        ArtifactRef {
            path: path.to_string_lossy().into_owned(),
            sha256: a.sha256.clone(),
        }
        .load()
    };
    match asa.kind {
        AsaKind::Vq | AsaKind::Rvq => Ok(Binding::Tokens(Arc::new(load_codec(
            &artifact("codec")?,
            space,
        )?))),
        AsaKind::Semlang | AsaKind::Lang => {
            let vocab = ActionVocabulary::read(&artifact("vocabulary")?[..])?;
            let expected = ActionVocabulary::build(space, style(asa.kind), asa.vocab_size)?;
            if vocab != expected {
                return Err(Error::AdapterArtifactMissing(
                    "vocabulary does not match the environment".into(),
                ));
            }
            Ok(Binding::Tokens(Arc::new(WordAdapter::new(
                vocab, asa.filter,
            )?)))
        }
        _ => Ok(resolve(&asa, space, Path::new(""))?.binding),
    }
}
