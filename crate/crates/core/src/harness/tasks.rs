//! Synthetic and byte-level tasks.

use std::path::PathBuf;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Prompt, separator, prompt again; scored on the echo.
    #[default]
    Copy,
    /// `k₁ v₁ … k_P v_P q`; scored on the value stored under `q`.
    AssocRecall,
    /// Next-byte prediction over windows of a text file.
    CharLm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub num_pairs: usize,
    pub corpus: Option<PathBuf>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab: 16,
            seq_len: 128,
            num_pairs: 8,
            corpus: None,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match self.kind {
            TaskKind::Copy => {
                if self.seq_len < 2 || !self.seq_len.is_multiple_of(2) {
                    return bad(format!("copy needs an even seq_len ≥ 2, got {}", self.seq_len));
                }
                if self.vocab < 3 {
                    return bad(format!("copy needs vocab ≥ 3, got {}", self.vocab));
                }
            }
            TaskKind::AssocRecall => {
                if self.num_pairs == 0 || self.seq_len != 2 * self.num_pairs + 1 {
                    return bad(format!(
                        "assoc_recall with {} pairs needs seq_len {}, got {}",
                        self.num_pairs,
                        2 * self.num_pairs + 1,
                        self.seq_len
                    ));
                }
                if self.vocab / 2 < self.num_pairs || self.vocab < 2 {
                    return bad(format!(
                        "assoc_recall needs vocab ≥ 2·num_pairs ({}), got {}",
                        2 * self.num_pairs,
                        self.vocab
                    ));
                }
            }
            TaskKind::CharLm => {
                if self.vocab != 256 {
                    return bad(format!("char_lm uses byte tokens, vocab must be 256, got {}", self.vocab));
                }
                if self.corpus.is_none() {
                    return bad("char_lm needs a corpus path".into());
                }
                if self.seq_len == 0 {
                    return bad("seq_len must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// A validated task with its data loaded.
#[derive(Clone, Debug)]
pub struct Task {
    spec: TaskSpec,
    corpus: Vec<u8>,
}

impl Task {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let corpus = match (&spec.corpus, spec.kind) {
            (Some(path), TaskKind::CharLm) => std::fs::read(path)?,
            _ => Vec::new(),
        };
        Self::with_corpus(spec, corpus)
    }

    /// Uses `corpus` in place of reading the configured path.
    pub fn with_corpus(spec: &TaskSpec, corpus: Vec<u8>) -> Result<Self> {
        if spec.kind == TaskKind::CharLm && corpus.len() < spec.seq_len + 1 {
            return Err(Error::CorpusTooSmall {
                corpus: corpus.len(),
                window: spec.seq_len + 1,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            corpus,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn gen_batch(&self, batch: usize, rng: &mut impl Rng) -> Batch {
        let n = self.spec.seq_len;
        let mut inputs = Vec::with_capacity(batch * n);
        let mut targets = Vec::with_capacity(batch * n);
        for _ in 0..batch {
            match self.spec.kind {
                TaskKind::Copy => self.copy_row(rng, &mut inputs, &mut targets),
                TaskKind::AssocRecall => self.recall_row(rng, &mut inputs, &mut targets),
                TaskKind::CharLm => self.window_row(rng, &mut inputs, &mut targets),
            }
        }
        Batch::new(batch, n, inputs, targets).expect("rows have seq_len tokens")
    }

    fn copy_row(&self, rng: &mut impl Rng, inputs: &mut Vec<usize>, targets: &mut Vec<Option<usize>>) {
        let m = self.spec.seq_len / 2;
        let sep = self.spec.vocab - 1;
        let prompt: Vec<usize> = (0..m).map(|_| rng.random_range(0..sep)).collect();
        // full sequence: prompt, sep, prompt; inputs drop the last token
        let seq: Vec<usize> = prompt.iter().copied().chain([sep]).chain(prompt.iter().copied()).collect();
        inputs.extend_from_slice(&seq[..2 * m]);
        targets.extend((0..2 * m).map(|i| (i >= m).then(|| seq[i + 1])));
    }

    fn recall_row(&self, rng: &mut impl Rng, inputs: &mut Vec<usize>, targets: &mut Vec<Option<usize>>) {
        let p = self.spec.num_pairs;
        let half = self.spec.vocab / 2;
        let keys = sample(rng, half, p).into_vec();
        let values: Vec<usize> = (0..p).map(|_| half + rng.random_range(0..self.spec.vocab - half)).collect();
        let pick = rng.random_range(0..p);
        for (k, v) in keys.iter().zip(&values) {
            inputs.extend([*k, *v]);
        }
        inputs.push(keys[pick]);
        targets.extend(std::iter::repeat_n(None, 2 * p));
        targets.push(Some(values[pick]));
    }

    fn window_row(&self, rng: &mut impl Rng, inputs: &mut Vec<usize>, targets: &mut Vec<Option<usize>>) {
        let n = self.spec.seq_len;
        let start = rng.random_range(0..=self.corpus.len() - (n + 1));
        let w = &self.corpus[start..start + n + 1];
        inputs.extend(w[..n].iter().map(|&b| b as usize));
        targets.extend(w[1..].iter().map(|&b| Some(b as usize)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::rng::{stream, Purpose};

    #[test]
    fn copy_echo_targets_equal_prompt() {
        let spec = TaskSpec {
            kind: TaskKind::Copy,
            vocab: 4,
            seq_len: 8,
            ..TaskSpec::default()
        };
        let b = Task::new(&spec).unwrap().gen_batch(5, &mut stream(1, Purpose::Train, 0));
        for row in 0..5 {
            let inp = &b.inputs[row * 8..(row + 1) * 8];
            let tgt = &b.targets[row * 8..(row + 1) * 8];
            assert_eq!(inp[4], 3);
            assert!(tgt[..4].iter().all(Option::is_none));
            let echoed: Vec<usize> = tgt[4..].iter().map(|t| t.unwrap()).collect();
            assert_eq!(echoed, inp[..4]);
            assert!(inp[..4].iter().all(|&t| t < 3));
        }
    }

    #[test]
    fn recall_single_pair_returns_stored_value() {
        let spec = TaskSpec {
            kind: TaskKind::AssocRecall,
            vocab: 8,
            seq_len: 3,
            num_pairs: 1,
            ..TaskSpec::default()
        };
        let b = Task::new(&spec).unwrap().gen_batch(20, &mut stream(2, Purpose::Train, 0));
        for row in 0..20 {
            let inp = &b.inputs[row * 3..(row + 1) * 3];
            assert_eq!(inp[2], inp[0]);
            assert!(inp[0] < 4 && inp[1] >= 4);
            assert_eq!(b.targets[row * 3 + 2], Some(inp[1]));
        }
    }

    #[test]
    fn recall_keys_are_distinct_and_query_is_stored() {
        let spec = TaskSpec {
            kind: TaskKind::AssocRecall,
            vocab: 32,
            seq_len: 17,
            num_pairs: 8,
            ..TaskSpec::default()
        };
        let b = Task::new(&spec).unwrap().gen_batch(50, &mut stream(3, Purpose::Train, 0));
        for row in b.inputs.chunks(17).zip(b.targets.chunks(17)) {
            let (inp, tgt) = row;
            let mut keys: Vec<usize> = inp[..16].iter().step_by(2).copied().collect();
            let slot = keys.iter().position(|&k| k == inp[16]).unwrap();
            assert_eq!(tgt[16], Some(inp[2 * slot + 1]));
            keys.sort_unstable();
            keys.dedup();
            assert_eq!(keys.len(), 8);
        }
    }

    #[test]
    fn char_windows_are_verbatim_substrings() {
        let corpus: Vec<u8> = (0..100u32).map(|i| b'a' + ((i * 7) % 26) as u8).collect();
        let spec = TaskSpec {
            kind: TaskKind::CharLm,
            vocab: 256,
            seq_len: 32,
            corpus: Some("unused".into()),
            ..TaskSpec::default()
        };
        let task = Task::with_corpus(&spec, corpus.clone()).unwrap();
        let b = task.gen_batch(30, &mut stream(4, Purpose::Train, 0));
        for row in 0..30 {
            let mut window: Vec<u8> = b.inputs[row * 32..(row + 1) * 32].iter().map(|&t| t as u8).collect();
            window.push(b.targets[row * 32 + 31].unwrap() as u8);
            assert!(corpus.windows(33).any(|w| w == window.as_slice()));
            for i in 0..31 {
                assert_eq!(b.targets[row * 32 + i], Some(b.inputs[row * 32 + i + 1]));
            }
        }
    }

    #[test]
    fn char_corpus_too_small() {
        let spec = TaskSpec {
            kind: TaskKind::CharLm,
            vocab: 256,
            seq_len: 32,
            corpus: Some("unused".into()),
            ..TaskSpec::default()
        };
        assert!(matches!(
            Task::with_corpus(&spec, vec![0; 32]),
            Err(Error::CorpusTooSmall { corpus: 32, window: 33 })
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let odd = TaskSpec {
            seq_len: 7,
            ..TaskSpec::default()
        };
        assert!(odd.validate().is_err());
        let short = TaskSpec {
            kind: TaskKind::AssocRecall,
            seq_len: 16,
            ..TaskSpec::default()
        };
        assert!(short.validate().is_err());
    }
}
