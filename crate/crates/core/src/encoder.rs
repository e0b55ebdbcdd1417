//! ⟨IP, direction⟩ hashing, rolling history windows and 1-hot history
//! matrices for training.

use std::collections::VecDeque;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{BranchRecord, Trace};

/// Slot value for history positions before program start.
pub const PAD: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("p must lie in [2, 16], got {0}")]
    BadWidth(u8),
    #[error("history_len must be at least 1")]
    EmptyHistory,
    #[error("ip {0:#x} never occurs in the trace")]
    NoOccurrences(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub p: u8,
    pub history_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            p: 8,
            history_len: 200,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(2..=16).contains(&self.p) {
            return Err(EncoderError::BadWidth(self.p));
        }
        if self.history_len == 0 {
            return Err(EncoderError::EmptyHistory);
        }
        Ok(())
    }

    pub fn num_indices(&self) -> usize {
        1 << self.p
    }
}

/// `((ip << 1) + direction) & (2^p - 1)`.
#[inline]
pub fn encode_index(ip: u64, taken: bool, p: u8) -> u32 {
    let mask = (1u64 << p) - 1;
    ((ip.wrapping_shl(1).wrapping_add(taken as u64)) & mask) as u32
}

/// The most recent `len` encoded history tuples. Position `len - 1` is the
/// most recent; positions not yet filled hold [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryWindow {
    p: u8,
    slots: VecDeque<u32>,
}

impl HistoryWindow {
    pub fn new(p: u8, len: usize) -> Self {
        Self {
            p,
            slots: VecDeque::from(vec![PAD; len]),
        }
    }

    pub fn from_config(cfg: &EncoderConfig) -> Self {
        Self::new(cfg.p, cfg.history_len)
    }

    /// Builds a window from explicit slots, oldest first.
    pub fn from_slots(p: u8, slots: Vec<u32>) -> Self {
        Self {
            p,
            slots: slots.into(),
        }
    }

    pub fn p(&self) -> u8 {
        self.p
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn push(&mut self, record: BranchRecord) {
        self.push_index(encode_index(record.ip, record.taken, self.p));
    }

    pub fn push_index(&mut self, idx: u32) {
        if self.slots.is_empty() {
            return;
        }
        self.slots.pop_front();
        self.slots.push_back(idx);
    }

    /// Encoded index at `position`, or `None` for a pad slot.
    pub fn get(&self, position: usize) -> Option<u32> {
        match self.slots[position] {
            PAD => None,
            i => Some(i),
        }
    }

    /// Raw slots, oldest first ([`PAD`] for empty positions).
    pub fn slots(&self) -> impl ExactSizeIterator<Item = u32> + '_ {
        self.slots.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<u32> {
        self.slots.iter().copied().collect()
    }
}

/// Dense `2^p × len` matrix of 1-hot columns, row-major (`[row * len + col]`).
/// Training-side only.
pub fn build_history_matrix(window: &HistoryWindow) -> Vec<u8> {
    let rows = 1usize << window.p();
    let cols = window.len();
    let mut m = vec![0u8; rows * cols];
    for (c, slot) in window.slots().enumerate() {
        if slot != PAD {
            m[slot as usize * cols + c] = 1;
        }
    }
    m
}

/// A history window paired with the H2P's observed direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Encoded slots, oldest first.
    pub slots: Box<[u32]>,
    pub taken: bool,
}

/// Samples up to `sample_budget` (history, direction) pairs for `h2p_ip`,
/// uniformly without replacement. All pairs are returned, in trace order,
/// when the budget covers the population.
pub fn collect_training_set(
    trace: &Trace,
    h2p_ip: u64,
    cfg: &EncoderConfig,
    sample_budget: usize,
    seed: u64,
) -> Result<Vec<Sample>, EncoderError> {
    cfg.validate()?;
    let population = trace.occurrences(h2p_ip);
    if population == 0 {
        return Err(EncoderError::NoOccurrences(h2p_ip));
    }
    let mut chosen = vec![false; population];
    if sample_budget >= population {
        chosen.iter_mut().for_each(|c| *c = true);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in index::sample(&mut rng, population, sample_budget) {
            chosen[k] = true;
        }
    }

    let mut window = HistoryWindow::from_config(cfg);
    let mut out = Vec::with_capacity(population.min(sample_budget));
    let mut occurrence = 0;
    for rec in &trace.records {
        if rec.ip == h2p_ip {
            if chosen[occurrence] {
                out.push(Sample {
                    slots: window.to_vec().into_boxed_slice(),
                    taken: rec.taken,
                });
            }
            occurrence += 1;
        }
        window.push(*rec);
    }
    Ok(out)
}

/// Every (history, direction) pair for `h2p_ip`, in trace order.
pub fn collect_all(
    trace: &Trace,
    h2p_ip: u64,
    cfg: &EncoderConfig,
) -> Result<Vec<Sample>, EncoderError> {
    collect_training_set(trace, h2p_ip, cfg, usize::MAX, 0)
}
