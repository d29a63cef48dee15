use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Node {
    children: BTreeMap<usize, usize>,
    action: Option<usize>,
}

/// Prefix trie over the token sequences of every valid action.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenFilterTrie {
    nodes: Vec<Node>,
    vocab: usize,
}

impl TokenFilterTrie {
    /// `sequences[i]` is the token sequence of action `i`. Sequences must be
    /// prefix-free and non-empty.
    pub fn new(sequences: &[Vec<usize>], vocab: usize) -> Result<Self> {
        let mut nodes = vec![Node::default()];
        for (a, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::EmptyActionName);
            }
            let mut at = 0;
            for &t in seq {
                if t >= vocab {
                    return Err(Error::TokenOutOfRange { token: t, vocab });
                }
                if nodes[at].action.is_some() {
                    return Err(Error::PrefixCollision {
                        short: format!("#{}", nodes[at].action.unwrap()),
                        long: format!("#{a}"),
                    });
                }
                at = match nodes[at].children.get(&t) {
                    Some(&n) => n,
                    None => {
                        nodes.push(Node::default());
                        let n = nodes.len() - 1;
                        nodes[at].children.insert(t, n);
                        n
                    }
                };
            }
            if nodes[at].action.is_some() || !nodes[at].children.is_empty() {
                return Err(Error::PrefixCollision {
                    short: format!("#{a}"),
                    long: "another action".into(),
                });
            }
            nodes[at].action = Some(a);
        }
        Ok(Self { nodes, vocab })
    }

    fn walk(&self, prefix: &[usize]) -> Option<usize> {
        prefix
            .iter()
            .try_fold(0, |at, t| self.nodes[at].children.get(t).copied())
    }

    /// Tokens that keep `prefix` extendable to a complete action.
    pub fn mask(&self, prefix: &[usize]) -> Result<Vec<bool>> {
        let at = self
            .walk(prefix)
            .ok_or_else(|| Error::UnreachablePrefix(prefix.to_vec()))?;
        let node = &self.nodes[at];
        if node.children.is_empty() {
            return Err(Error::UnreachablePrefix(prefix.to_vec()));
        }
        let mut m = vec![false; self.vocab];
        for &t in node.children.keys() {
            m[t] = true;
        }
        Ok(m)
    }

    /// The action completed exactly by `prefix`.
    pub fn action_at(&self, prefix: &[usize]) -> Option<usize> {
        self.walk(prefix).and_then(|n| self.nodes[n].action)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ActionSpace;
    use crate::discrete::{ActionVocabulary, VocabStyle};

    fn setup() -> (ActionVocabulary, TokenFilterTrie) {
        let v = ActionVocabulary::build(
            &ActionSpace::discrete(["pick apple", "pick pear", "go stop"]),
            VocabStyle::Semantic,
            0,
        )
        .unwrap();
        let t = TokenFilterTrie::new(v.sequences(), v.len()).unwrap();
        (v, t)
    }

    fn allowed(v: &ActionVocabulary, m: &[bool]) -> Vec<String> {
        m.iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| v.word(i).unwrap().to_string())
            .collect()
    }

    #[test]
    fn masks_follow_children() {
        let (v, t) = setup();
        let id = |w| v.id(w).unwrap();
        assert_eq!(allowed(&v, &t.mask(&[]).unwrap()), ["pick", "go"]);
        assert_eq!(
            allowed(&v, &t.mask(&[id("pick")]).unwrap()),
            ["apple", "pear"]
        );
        assert_eq!(
            allowed(&v, &t.mask(&[id("pick"), id("apple")]).unwrap()),
            ["<end>"]
        );
        assert_eq!(
            t.action_at(&[id("pick"), id("apple"), id("<end>")]),
            Some(0)
        );
    }

    #[test]
    fn unreachable_prefix() {
        let (v, t) = setup();
        let id = |w| v.id(w).unwrap();
        assert!(matches!(
            t.mask(&[id("apple")]),
            Err(Error::UnreachablePrefix(_))
        ));
        assert!(matches!(
            t.mask(&[id("go"), id("stop"), id("<end>")]),
            Err(Error::UnreachablePrefix(_))
        ));
    }

    #[test]
    fn prefix_sequences_rejected() {
        assert!(TokenFilterTrie::new(&[vec![0], vec![0, 1]], 2).is_err());
        assert!(TokenFilterTrie::new(&[vec![0, 1], vec![0]], 2).is_err());
    }
}
