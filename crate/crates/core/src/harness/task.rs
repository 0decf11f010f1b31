//! Synthetic sequence-classification tasks.
//!
//! * `majority_token`: token `t` votes for class `t % C`; the label is the
//!   class with the most votes. Sequences with a tied vote are redrawn.
//! * `copy_first_token`: the label is `first_token % C`.
//! * `sparse_signal`: every token is noise from `C..V` except one random
//!   position holding the signal token `s < C`, which is the label.
//!
//! Labels are a deterministic function of the sequence. The optional
//! `label_noise` flips that fraction of *training* labels to a different
//! class; validation labels stay clean.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MajorityToken,
    CopyFirstToken,
    SparseSignal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub label_noise: f64,
}

impl SyntheticTask {
    pub fn majority(vocab: usize, seq_len: usize, train_size: usize, val_size: usize, seed: u64) -> Self {
        SyntheticTask {
            kind: TaskKind::MajorityToken,
            vocab,
            seq_len,
            train_size,
            val_size,
            classes: 2,
            seed,
            label_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("task: {m}")));
        if self.seq_len == 0 || self.train_size == 0 || self.val_size == 0 {
            return err("seq_len, train_size and val_size must be positive".into());
        }
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.vocab < self.classes {
            return err(format!("vocab {} smaller than class count {}", self.vocab, self.classes));
        }
        if self.kind == TaskKind::SparseSignal && self.vocab <= self.classes {
            return err("sparse_signal needs vocab > classes for noise tokens".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return err(format!("label_noise must lie in [0, 1], got {}", self.label_noise));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut RngStream) -> Option<(Vec<usize>, usize)> {
        let (v, n, c) = (self.vocab, self.seq_len, self.classes);
        match self.kind {
            TaskKind::MajorityToken => {
                let seq: Vec<usize> = (0..n).map(|_| rng.below(v)).collect();
                let mut votes = vec![0usize; c];
                seq.iter().for_each(|&t| votes[t % c] += 1);
                let best = *votes.iter().max().unwrap();
                let mut winners = votes.iter().enumerate().filter(|(_, &x)| x == best);
                let (label, _) = winners.next().unwrap();
                winners.next().is_none().then_some((seq, label))
            }
            TaskKind::CopyFirstToken => {
                let seq: Vec<usize> = (0..n).map(|_| rng.below(v)).collect();
                let label = seq[0] % c;
                Some((seq, label))
            }
            TaskKind::SparseSignal => {
                let mut seq: Vec<usize> = (0..n).map(|_| c + rng.below(v - c)).collect();
                let label = rng.below(c);
                seq[rng.below(n)] = label;
                Some((seq, label))
            }
        }
    }

    /// Generates disjoint `(train, val)` sets from one stream.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut rng = RngStream::new(self.seed);
        let budget = 1000 * (self.train_size + self.val_size) + 10_000;
        let mut attempts = 0;
        let mut next = |rng: &mut RngStream| -> Result<(Vec<usize>, usize)> {
            loop {
                attempts += 1;
                if attempts > budget {
                    return Err(Error::Config(format!(
                        "task: could not draw enough sequences for {:?} (vocab {}, seq_len {})",
                        self.kind, self.vocab, self.seq_len
                    )));
                }
                if let Some(pair) = self.draw(rng) {
                    return Ok(pair);
                }
            }
        };

        let mut train = Dataset::new(self.seq_len);
        let mut seen = HashSet::new();
        for _ in 0..self.train_size {
            let (seq, label) = next(&mut rng)?;
            seen.insert(seq.clone());
            train.push(&seq, label);
        }
        let mut val = Dataset::new(self.seq_len);
        while val.len() < self.val_size {
            let (seq, label) = next(&mut rng)?;
            if !seen.contains(&seq) {
                val.push(&seq, label);
            }
        }

        if self.label_noise > 0.0 {
            let mut noise = RngStream::new(derive_seed(self.seed, 0x6e6f697365));
            for y in &mut train.labels {
                if noise.uniform() < self.label_noise {
                    *y = (*y + 1 + noise.below(self.classes - 1)) % self.classes;
                }
            }
        }
        Ok((train, val))
    }
}

/// Token sequences stored flat, `seq_len` tokens per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(seq_len: usize) -> Self {
        Dataset {
            seq_len,
            tokens: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, seq: &[usize], label: usize) {
        assert_eq!(seq.len(), self.seq_len);
        self.tokens.extend_from_slice(seq);
        self.labels.push(label);
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            tokens.extend_from_slice(self.sequence(i));
            labels.push(self.labels[i]);
        }
        Batch {
            seq_len: self.seq_len,
            tokens,
            labels,
        }
    }

    /// Consecutive batches in index order, the last possibly short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect::<Vec<_>>().into_iter()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}
