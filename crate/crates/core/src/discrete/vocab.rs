//! Word-level action vocabularies.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::action::{validate_space, ActionSpace, DiscreteSpace};
use crate::error::{Error, Result};

pub const END_WORD: &str = "<end>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabStyle {
    /// Action names split into their words.
    Semantic,
    /// Each distinct word replaced by a number token, keeping sequence length.
    Numeric,
}

impl std::str::FromStr for VocabStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" | "semlang" => Ok(Self::Semantic),
            "numeric" | "lang" => Ok(Self::Numeric),
            other => Err(Error::Config(format!("unknown vocabulary style {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionVocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    end: Option<usize>,
    actions: Vec<String>,
    sequences: Vec<Vec<usize>>,
}

impl ActionVocabulary {
    /// Builds the vocabulary for a discrete space. Numeric style numbers
    /// distinct words in order of first appearance (scanning actions in
    /// order, words left to right), so "pick apple", "pick pear" become
    /// "0 1", "0 2". With `space.end_marker`, every sequence is closed by
    /// `<end>`. Filler tokens pad the vocabulary up to `min_size`.
    pub fn build(space: &ActionSpace, style: VocabStyle, min_size: usize) -> Result<Self> {
        let ActionSpace::Discrete(d) = space else {
            return Err(Error::NotDiscrete);
        };
        validate_space(space)?;
        let mut words: Vec<String> = Vec::new();
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut number: HashMap<&str, usize> = HashMap::new();
        let mut intern = |w: String, words: &mut Vec<String>| -> usize {
            *ids.entry(w.clone()).or_insert_with(|| {
                words.push(w);
                words.len() - 1
            })
        };
        let mut sequences = Vec::with_capacity(d.len());
        for name in &d.actions {
            let seq = name
                .split_whitespace()
                .map(|w| {
                    let token = match style {
                        VocabStyle::Semantic => w.to_string(),
                        VocabStyle::Numeric => {
                            let next = number.len();
                            number.entry(w).or_insert(next).to_string()
                        }
                    };
                    intern(token, &mut words)
                })
                .collect::<Vec<_>>();
            sequences.push(seq);
        }
        let end = d
            .end_marker
            .then(|| intern(END_WORD.to_string(), &mut words));
        if let Some(e) = end {
            for s in &mut sequences {
                s.push(e);
            }
        }
        let mut filler = 0;
        while words.len() < min_size {
            intern(format!("<unused{filler}>"), &mut words);
            filler += 1;
        }
        let vocab = Self {
            words,
            ids,
            end,
            actions: d.actions.clone(),
            sequences,
        };
        vocab.check_prefix_free()?;
        Ok(vocab)
    }

    fn check_prefix_free(&self) -> Result<()> {
        for (i, a) in self.sequences.iter().enumerate() {
            for (j, b) in self.sequences.iter().enumerate() {
                if i != j && a.len() <= b.len() && b.starts_with(a) {
                    return Err(Error::PrefixCollision {
                        short: self.actions[i].clone(),
                        long: self.actions[j].clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn end_token(&self) -> Option<usize> {
        self.end
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    /// Longest action sequence, including the end token.
    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn encode(&self, action: usize) -> Result<&[usize]> {
        self.sequences
            .get(action)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::EncodeFailure(format!("no action with index {action}")))
    }

    pub fn encode_name(&self, name: &str) -> Result<&[usize]> {
        let words: Vec<&str> = name.split_whitespace().collect();
        let idx = self
            .actions
            .iter()
            .position(|a| a.split_whitespace().eq(words.iter().copied()))
            .ok_or_else(|| Error::EncodeFailure(format!("unknown action {name:?}")))?;
        self.encode(idx)
    }

    /// The action whose full sequence starts `tokens`, if any. Tokens after
    /// that sequence are ignored.
    pub fn decode(&self, tokens: &[usize]) -> Option<usize> {
        self.sequences.iter().position(|s| tokens.starts_with(s))
    }

    /// Whether generation should stop after `prefix`.
    pub fn is_complete(&self, prefix: &[usize]) -> bool {
        if self.end.is_some_and(|e| prefix.last() == Some(&e)) {
            return true;
        }
        prefix.len() >= self.max_len() || self.sequences.iter().any(|s| s.as_slice() == prefix)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        for (i, word) in self.words.iter().enumerate() {
            writeln!(w, "{i}\t{word}")?;
        }
        writeln!(w)?;
        for (name, seq) in self.actions.iter().zip(&self.sequences) {
            let ids: Vec<String> = seq.iter().map(usize::to_string).collect();
            writeln!(w, "{name}\t{}", ids.join(" "))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        String::from_utf8(out).expect("vocabulary is utf-8")
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut words = Vec::new();
        let mut ids = HashMap::new();
        let mut actions = Vec::new();
        let mut sequences = Vec::new();
        let mut in_actions = false;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let bad = |what: &str| Error::Parse(format!("vocabulary line {}: {what}", n + 1));
            if line.is_empty() {
                if in_actions {
                    return Err(bad("unexpected blank line"));
                }
                in_actions = true;
                continue;
            }
            let (left, right) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            if !in_actions {
                let id: usize = left.parse().map_err(|_| bad("bad token id"))?;
                if id != words.len() {
                    return Err(bad("token ids must be dense and ordered"));
                }
                if ids.insert(right.to_string(), id).is_some() {
                    return Err(bad("duplicate word"));
                }
                words.push(right.to_string());
            } else {
                let seq = right
                    .split(' ')
                    .map(|t| t.parse::<usize>().ok().filter(|&t| t < words.len()))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad("bad token sequence"))?;
                actions.push(left.to_string());
                sequences.push(seq);
            }
        }
        if actions.is_empty() {
            return Err(Error::Parse("vocabulary has no actions".into()));
        }
        let end = ids.get(END_WORD).copied();
        let vocab = Self {
            words,
            ids,
            end,
            actions,
            sequences,
        };
        validate_space(&ActionSpace::Discrete(DiscreteSpace {
            actions: vocab.actions.clone(),
            end_marker: end.is_some(),
        }))?;
        vocab.check_prefix_free()?;
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fruit() -> ActionSpace {
        ActionSpace::discrete(["pick apple", "pick pear", "go stop"])
    }

    fn names(v: &ActionVocabulary, seq: &[usize]) -> Vec<String> {
        seq.iter()
            .map(|&t| v.word(t).unwrap().to_string())
            .collect()
    }

    #[test]
    fn semantic_construction() {
        let v = ActionVocabulary::build(&fruit(), VocabStyle::Semantic, 0).unwrap();
        let words: Vec<&str> = (0..v.len()).map(|i| v.word(i).unwrap()).collect();
        assert_eq!(words, ["pick", "apple", "pear", "go", "stop", "<end>"]);
        assert_eq!(
            names(&v, v.encode_name("pick apple").unwrap()),
            ["pick", "apple", "<end>"]
        );
    }

    #[test]
    fn numeric_construction() {
        let v = ActionVocabulary::build(&fruit(), VocabStyle::Numeric, 0).unwrap();
        assert_eq!(
            names(&v, v.encode_name("pick apple").unwrap()),
            ["0", "1", "<end>"]
        );
        assert_eq!(
            names(&v, v.encode_name("pick pear").unwrap()),
            ["0", "2", "<end>"]
        );
        assert_eq!(
            names(&v, v.encode_name("go stop").unwrap()),
            ["3", "4", "<end>"]
        );
    }

    #[test]
    fn numeric_keeps_lengths_with_many_words() {
        let acts: Vec<String> = (0..15).map(|i| format!("w{i} x{i}")).collect();
        let space = ActionSpace::discrete(acts);
        let sem = ActionVocabulary::build(&space, VocabStyle::Semantic, 0).unwrap();
        let num = ActionVocabulary::build(&space, VocabStyle::Numeric, 0).unwrap();
        let lens = |v: &ActionVocabulary| v.sequences().iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(lens(&sem), lens(&num));
        assert_eq!(num.word(num.encode(14).unwrap()[0]).unwrap(), "28");
    }

    #[test]
    fn decode_rules() {
        let v = ActionVocabulary::build(&fruit(), VocabStyle::Semantic, 0).unwrap();
        for a in 0..3 {
            assert_eq!(v.decode(v.encode(a).unwrap()), Some(a));
        }
        let (pick, apple, end) = (
            v.id("pick").unwrap(),
            v.id("apple").unwrap(),
            v.end_token().unwrap(),
        );
        assert_eq!(v.decode(&[apple, pick, end]), None);
        assert_eq!(v.decode(&[pick]), None);
        assert_eq!(v.decode(&[pick, apple]), None);
    }

    #[test]
    fn padding_and_file_round_trip() {
        let v = ActionVocabulary::build(&fruit(), VocabStyle::Numeric, 64).unwrap();
        assert_eq!(v.len(), 64);
        let text = v.to_text();
        let back = ActionVocabulary::read(text.as_bytes()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn errors() {
        let cont = ActionSpace::continuous(vec![-1.0], vec![1.0]);
        assert!(matches!(
            ActionVocabulary::build(&cont, VocabStyle::Semantic, 0),
            Err(Error::NotDiscrete)
        ));
        let mut space = DiscreteSpace::new(["go", "go left"]);
        space.end_marker = false;
        let err = ActionVocabulary::build(&ActionSpace::Discrete(space), VocabStyle::Semantic, 0);
        assert!(matches!(err, Err(Error::PrefixCollision { .. })));
        assert!(ActionVocabulary::read("0\tgo\n".as_bytes()).is_err());
        assert!(ActionVocabulary::read("1\tgo\n\ngo\t1\n".as_bytes()).is_err());
    }

    #[test]
    fn end_marker_allows_word_prefixes() {
        let v = ActionVocabulary::build(
            &ActionSpace::discrete(["go", "go left"]),
            VocabStyle::Semantic,
            0,
        )
        .unwrap();
        assert_eq!(v.decode(v.encode(0).unwrap()), Some(0));
        assert_eq!(v.decode(v.encode(1).unwrap()), Some(1));
    }
}
