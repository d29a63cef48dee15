//! Discrete adapters: word vocabularies (semantic or numeric), the token
//! filter trie and the categorical head.

mod head;
mod trie;
mod vocab;

pub use head::{masked_softmax, CategoricalHead};
pub use trie::TokenFilterTrie;
pub use vocab::{ActionVocabulary, VocabStyle, END_WORD};

use crate::action::{Action, ActionSpace, ActionTokens, TokenAdapter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Token adapter over an [`ActionVocabulary`]. With `filter` set, the
/// adapter supplies a trie mask at every decoding step.
#[derive(Clone, Debug)]
pub struct WordAdapter {
    vocab: ActionVocabulary,
    trie: TokenFilterTrie,
    pub filter: bool,
}

impl WordAdapter {
    pub fn new(vocab: ActionVocabulary, filter: bool) -> Result<Self> {
        let trie = TokenFilterTrie::new(vocab.sequences(), vocab.len())?;
        Ok(Self {
            vocab,
            trie,
            filter,
        })
    }

    pub fn build(
        space: &ActionSpace,
        style: VocabStyle,
        min_size: usize,
        filter: bool,
    ) -> Result<Self> {
        Self::new(ActionVocabulary::build(space, style, min_size)?, filter)
    }

    pub fn vocab(&self) -> &ActionVocabulary {
        &self.vocab
    }

    pub fn trie(&self) -> &TokenFilterTrie {
        &self.trie
    }
}

impl<S: Scalar> TokenAdapter<S> for WordAdapter {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn tokens_per_action(&self) -> usize {
        self.vocab.max_len()
    }

    fn encode(&self, action: &Action<S>) -> Result<ActionTokens> {
        match action {
            Action::Discrete(a) => Ok(ActionTokens(self.vocab.encode(*a)?.to_vec())),
            _ => Err(Error::EncodeFailure(
                "word adapter needs a discrete action".into(),
            )),
        }
    }

    fn decode(&self, tokens: &[usize]) -> Result<Action<S>> {
        Ok(self
            .vocab
            .decode(tokens)
            .map_or(Action::NoOp, Action::Discrete))
    }

    fn next_token_mask(&self, prefix: &[usize]) -> Result<Option<Vec<bool>>> {
        if self.filter {
            self.trie.mask(prefix).map(Some)
        } else {
            Ok(None)
        }
    }

    fn is_complete(&self, prefix: &[usize]) -> bool {
        self.vocab.is_complete(prefix)
    }
}
