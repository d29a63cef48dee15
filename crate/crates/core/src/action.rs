//! Action spaces, action token sequences and the adapter contract shared by
//! every action space adapter.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-dimension bounded box `[lower_d, upper_d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSpace {
    pub fn symmetric(dims: usize, half_width: f64) -> Self {
        Self {
            lower: vec![-half_width; dims],
            upper: vec![half_width; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, d: usize) -> f64 {
        self.upper[d] - self.lower[d]
    }
}

/// Ordered set of named discrete actions. Names are whitespace-separated word
/// sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSpace {
    pub actions: Vec<String>,
    /// Whether every action's token sequence is closed by an end-of-action
    /// token. With the marker, one name may be a word-wise prefix of another.
    pub end_marker: bool,
}

impl DiscreteSpace {
    pub fn new<I, T>(actions: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        Self {
            actions: actions.into_iter().map(Into::into).collect(),
            end_marker: true,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let words: Vec<&str> = name.split_whitespace().collect();
        self.actions
            .iter()
            .position(|a| a.split_whitespace().eq(words.iter().copied()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Continuous(BoxSpace),
    Discrete(DiscreteSpace),
}

impl ActionSpace {
    pub fn continuous(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        ActionSpace::Continuous(BoxSpace { lower, upper })
    }

    pub fn discrete<I, T>(actions: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        ActionSpace::Discrete(DiscreteSpace::new(actions))
    }

    pub fn as_box(&self) -> Result<&BoxSpace> {
        match self {
            ActionSpace::Continuous(b) => Ok(b),
            ActionSpace::Discrete(_) => Err(Error::NotContinuous),
        }
    }

    pub fn as_discrete(&self) -> Result<&DiscreteSpace> {
        match self {
            ActionSpace::Discrete(d) => Ok(d),
            ActionSpace::Continuous(_) => Err(Error::NotDiscrete),
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, ActionSpace::Continuous(_))
    }
}

/// Checks every [`ActionSpace`] invariant.
pub fn validate_space(space: &ActionSpace) -> Result<()> {
    match space {
        ActionSpace::Continuous(b) => {
            if b.lower.is_empty() {
                return Err(Error::EmptySpace);
            }
            if b.lower.len() != b.upper.len() {
                return Err(Error::DimensionMismatch {
                    expected: b.lower.len(),
                    got: b.upper.len(),
                });
            }
            for (dim, (&lower, &upper)) in b.lower.iter().zip(&b.upper).enumerate() {
                // NaN bounds fail this comparison too.
                if !(lower < upper) {
                    return Err(Error::DegenerateBounds { dim, lower, upper });
                }
            }
            Ok(())
        }
        ActionSpace::Discrete(d) => {
            let mut seen = HashSet::new();
            let words: Vec<Vec<&str>> = d
                .actions
                .iter()
                .map(|a| a.split_whitespace().collect())
                .collect();
            for (name, w) in d.actions.iter().zip(&words) {
                if w.is_empty() {
                    return Err(Error::EmptyActionName);
                }
                if !seen.insert(w.clone()) {
                    return Err(Error::DuplicateAction(name.clone()));
                }
            }
            if !d.end_marker {
                for (i, short) in words.iter().enumerate() {
                    for (j, long) in words.iter().enumerate() {
                        if i != j && short.len() < long.len() && long.starts_with(short) {
                            return Err(Error::PrefixCollision {
                                short: d.actions[i].clone(),
                                long: d.actions[j].clone(),
                            });
                        }
                    }
                }
            }
            Ok(())
        }
    }
}

/// Clips each component of `a` into the box.
pub fn clamp_action<S: Scalar>(a: &[S], space: &BoxSpace) -> Result<Vec<S>> {
    if a.len() != space.dims() {
        return Err(Error::DimensionMismatch {
            expected: space.dims(),
            got: a.len(),
        });
    }
    Ok(a.iter()
        .enumerate()
        .map(|(d, &x)| x.max(S::of(space.lower[d])).min(S::of(space.upper[d])))
        .collect())
}

/// Ordered token ids emitted for one environment action.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionTokens(pub Vec<usize>);

impl ActionTokens {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Checks `1 <= m <= max_len` and every id `< vocab`.
    pub fn check(&self, vocab: usize, max_len: usize) -> Result<()> {
        if self.0.is_empty() || self.0.len() > max_len {
            return Err(Error::WrongTokenCount {
                expected: max_len,
                got: self.0.len(),
            });
        }
        match self.0.iter().find(|&&t| t >= vocab) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }
}

impl From<Vec<usize>> for ActionTokens {
    fn from(v: Vec<usize>) -> Self {
        ActionTokens(v)
    }
}

/// An executable environment action.
#[derive(Clone, Debug, PartialEq)]
pub enum Action<S> {
    Continuous(Vec<S>),
    Discrete(usize),
    /// Result of decoding a token sequence that names no valid action.
    NoOp,
}

impl<S: Scalar> Action<S> {
    pub fn continuous(&self) -> Option<&[S]> {
        match self {
            Action::Continuous(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_noop(&self) -> bool {
        matches!(self, Action::NoOp)
    }
}

/// Contract for adapters that turn actions into token sequences and back.
///
/// `encode` builds training targets; `decode` is the adapter decoder that maps
/// a complete token sequence to an executable action.
pub trait TokenAdapter<S: Scalar>: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Maximum number of tokens emitted per environment step.
    fn tokens_per_action(&self) -> usize;

    fn encode(&self, action: &Action<S>) -> Result<ActionTokens>;

    fn decode(&self, tokens: &[usize]) -> Result<Action<S>>;

    /// Allowed next tokens after `prefix`, for constrained decoding. `None`
    /// means every token is allowed.
    fn next_token_mask(&self, _prefix: &[usize]) -> Result<Option<Vec<bool>>> {
        Ok(None)
    }

    /// True when generation of the current action ends after `prefix`.
    fn is_complete(&self, prefix: &[usize]) -> bool {
        prefix.len() >= self.tokens_per_action()
    }
}
