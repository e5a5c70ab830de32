use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    KvRecall,
    Copy,
    CharLm,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kv_recall" => Ok(Self::KvRecall),
            "copy" => Ok(Self::Copy),
            "char_lm" => Ok(Self::CharLm),
            other => Err(Error::InvalidConfig(format!("unknown task {other:?} (kv_recall, copy, char_lm)"))),
        }
    }
}

/// Synthetic data generator settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    /// Raw tokens per sample.
    pub len: usize,
    /// kv_recall: raw tokens strictly between the fact's value and the query marker.
    pub needle_distance: usize,
    /// kv_recall: the answer lands on a raw index that is a multiple of this.
    pub align: usize,
    pub samples: usize,
    pub seed: u64,
}

/// One generated sequence and the raw indices that are scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSample {
    pub tokens: Vec<u32>,
    pub eval_positions: Vec<usize>,
}

/// Token ranges of the kv_recall vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecallVocab {
    pub fact: u32,
    pub query: u32,
    pub keys: (u32, u32),
    pub values: (u32, u32),
    pub filler: (u32, u32),
}

impl RecallVocab {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < 8 {
            return Err(Error::InvalidConfig("kv_recall needs a vocabulary of at least 8".into()));
        }
        let v = vocab as u32;
        let quarter = (v - 2) / 4;
        let keys = (2, 2 + quarter);
        let values = (keys.1, keys.1 + quarter);
        Ok(Self {
            fact: 0,
            query: 1,
            keys,
            values,
            filler: (values.1, v),
        })
    }

    pub fn answer_vocab(&self) -> usize {
        (self.values.1 - self.values.0) as usize
    }
}

/// Seed of the fixed char_lm lexicon; the language is the same for every sample seed.
const LEXICON_SEED: u64 = 0x1e71c0;

/// A small word language: id 0 is the space, words are spelled with ids `1..vocab`.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub words: Vec<Vec<u32>>,
    /// Preferred follower of each word.
    pub follower: Vec<usize>,
    weights: WeightedIndex<f64>,
}

impl Lexicon {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < 4 {
            return Err(Error::InvalidConfig("char_lm needs a vocabulary of at least 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED);
        let n = 96;
        let words: Vec<Vec<u32>> = (0..n)
            .map(|_| {
                let len = rng.random_range(2..=6);
                (0..len).map(|_| rng.random_range(1..vocab as u32)).collect()
            })
            .collect();
        let follower = (0..n).map(|_| rng.random_range(0..n)).collect();
        let weights = WeightedIndex::new((0..n).map(|i| 1.0 / (i + 1) as f64)).expect("positive weights");
        Ok(Self { words, follower, weights })
    }

    /// `len` characters of text, words separated by single spaces.
    pub fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len + 8);
        let mut word = self.weights.sample(rng);
        while out.len() < len {
            out.extend_from_slice(&self.words[word]);
            out.push(0);
            word = if rng.random_bool(0.5) {
                self.follower[word]
            } else {
                self.weights.sample(rng)
            };
        }
        out.truncate(len);
        out
    }
}

/// Deterministic samples for `spec`.
pub fn gen_task(spec: &SynthTaskSpec) -> Result<Vec<TaskSample>> {
    if spec.len == 0 {
        return Err(Error::InvalidConfig("task length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        TaskKind::Copy => {
            if spec.len % 2 != 0 || spec.vocab == 0 {
                return Err(Error::InvalidConfig("copy needs an even length and a vocabulary".into()));
            }
            let half = spec.len / 2;
            Ok((0..spec.samples)
                .map(|_| {
                    let first: Vec<u32> = (0..half).map(|_| rng.random_range(0..spec.vocab as u32)).collect();
                    let mut tokens = first.clone();
                    tokens.extend(first);
                    TaskSample {
                        tokens,
                        eval_positions: (half..spec.len).collect(),
                    }
                })
                .collect())
        }
        TaskKind::CharLm => {
            let lex = Lexicon::new(spec.vocab)?;
            Ok((0..spec.samples)
                .map(|_| TaskSample {
                    tokens: lex.sample(spec.len, &mut rng),
                    eval_positions: (0..spec.len).collect(),
                })
                .collect())
        }
        TaskKind::KvRecall => {
            let voc = RecallVocab::new(spec.vocab)?;
            let align = spec.align.max(1);
            // FACT key value <gap> QUERY key ANSWER
            let min_answer = spec.needle_distance + 5;
            let first = min_answer.div_ceil(align) * align;
            if first >= spec.len {
                return Err(Error::InvalidConfig(format!(
                    "kv_recall: length {} too short for needle distance {}",
                    spec.len, spec.needle_distance
                )));
            }
            let slots = (spec.len - 1 - first) / align + 1;
            let filler_span = voc.filler.1 - voc.filler.0;
            Ok((0..spec.samples)
                .map(|_| {
                    let answer = first + align * rng.random_range(0..slots);
                    let key = rng.random_range(voc.keys.0..voc.keys.1);
                    let value = rng.random_range(voc.values.0..voc.values.1);
                    let phase = rng.random_range(0..filler_span);
                    let mut tokens: Vec<u32> = (0..spec.len as u32)
                        .map(|i| voc.filler.0 + (i + phase) % filler_span)
                        .collect();
                    let v_at = answer - 3 - spec.needle_distance;
                    tokens[v_at - 2] = voc.fact;
                    tokens[v_at - 1] = key;
                    tokens[v_at] = value;
                    tokens[answer - 2] = voc.query;
                    tokens[answer - 1] = key;
                    tokens[answer] = value;
                    TaskSample {
                        tokens,
                        eval_positions: vec![answer],
                    }
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> SynthTaskSpec {
        SynthTaskSpec {
            kind,
            vocab: 64,
            len: 128,
            needle_distance: 40,
            align: 4,
            samples: 5,
            seed: 11,
        }
    }

    #[test]
    fn copy_second_half_equals_first() {
        for s in gen_task(&spec(TaskKind::Copy)).unwrap() {
            assert_eq!(s.tokens[..64], s.tokens[64..]);
            assert_eq!(s.eval_positions, (64..128).collect::<Vec<_>>());
        }
    }

    #[test]
    fn recall_layout() {
        let voc = RecallVocab::new(64).unwrap();
        for nd in [0, 7, 40] {
            let sp = SynthTaskSpec {
                needle_distance: nd,
                ..spec(TaskKind::KvRecall)
            };
            for s in gen_task(&sp).unwrap() {
                let a = s.eval_positions[0];
                assert_eq!(a % 4, 0);
                assert_eq!(s.tokens[a - 2], voc.query);
                let fact = s.tokens.iter().position(|&t| t == voc.fact).unwrap();
                assert_eq!(s.tokens[fact + 1], s.tokens[a - 1]);
                assert_eq!(s.tokens[fact + 2], s.tokens[a]);
                // Gap between the fact's value and the query marker.
                assert_eq!(a - 2 - (fact + 2) - 1, nd);
                assert!((voc.values.0..voc.values.1).contains(&s.tokens[a]));
            }
        }
        assert_eq!(voc.answer_vocab(), 15);
    }

    #[test]
    fn recall_rejects_impossible_distance() {
        let sp = SynthTaskSpec {
            needle_distance: 200,
            ..spec(TaskKind::KvRecall)
        };
        assert!(gen_task(&sp).is_err());
    }

    #[test]
    fn deterministic_by_seed() {
        for kind in [TaskKind::Copy, TaskKind::KvRecall, TaskKind::CharLm] {
            assert_eq!(gen_task(&spec(kind)).unwrap(), gen_task(&spec(kind)).unwrap());
            let other = SynthTaskSpec { seed: 12, ..spec(kind) };
            assert_ne!(gen_task(&spec(kind)).unwrap(), gen_task(&other).unwrap());
        }
    }

    #[test]
    fn char_lm_is_word_text() {
        let samples = gen_task(&spec(TaskKind::CharLm)).unwrap();
        for s in &samples {
            assert_eq!(s.tokens.len(), 128);
            assert!(s.tokens.iter().all(|&t| t < 64));
            assert!(s.tokens.windows(2).all(|w| !(w[0] == 0 && w[1] == 0)));
        }
    }

    #[test]
    fn task_names_parse() {
        assert_eq!("kv_recall".parse::<TaskKind>().unwrap(), TaskKind::KvRecall);
        assert!("nope".parse::<TaskKind>().is_err());
    }
}
