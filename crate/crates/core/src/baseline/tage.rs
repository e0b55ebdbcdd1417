//! TAGE-lite: a bimodal base plus tagged tables indexed by geometrically
//! growing global-history lengths. No loop predictor, no statistical
//! corrector.
//!
//! Rules, in the order they are applied:
//!
//! * predict: the longest-history table whose entry at the computed index is
//!   valid and carries the computed tag provides the prediction; otherwise the
//!   bimodal counter does. A counter predicts taken when it is at or above
//!   its midpoint `2^(counter_bits-1)`.
//! * update: the provider counter moves one step toward the outcome. When the
//!   provider is a tagged entry and its prediction differs from the alternate
//!   (next matching table, else bimodal), its useful counter moves up if the
//!   provider was right and down otherwise.
//! * allocation, on a misprediction only: among tables with longer history
//!   than the provider, the first whose indexed entry is invalid or has
//!   `useful == 0` is overwritten with the current tag, `useful = 0` and a
//!   weak counter in the actual direction. If no candidate is free, every
//!   candidate's useful counter is decremented.
//! * the outcome is shifted into the global history.
//!
//! Index for a table of `2^k` entries and history length `L` is
//! `fold(L, k) ^ (ip & (2^k - 1))`; the tag is
//! `(ip ^ fold(L, w) ^ (fold(L, w - 1) << 1)) & (2^w - 1)`, with `w` the tag
//! width. `fold(L, n)` XORs the newest `L` outcome bits in `n`-bit chunks,
//! i.e. bit `i` of the history (0 = newest) lands on bit `i mod n`.

use serde::{Deserialize, Serialize};

use super::{sat_dec, sat_inc, BaselineError, BranchPredictor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TageLiteConfig {
    pub num_tagged_tables: usize,
    /// Entries per tagged table; must be a power of two.
    pub table_entries: usize,
    pub tag_bits: u32,
    pub max_history: usize,
    pub min_history: usize,
    pub counter_bits: u32,
    pub useful_bits: u32,
    /// Entries in the bimodal base table; must be a power of two.
    pub bimodal_entries: usize,
}

impl Default for TageLiteConfig {
    fn default() -> Self {
        Self {
            num_tagged_tables: 7,
            table_entries: 1024,
            tag_bits: 10,
            max_history: 200,
            min_history: 4,
            counter_bits: 3,
            useful_bits: 2,
            bimodal_entries: 4096,
        }
    }
}

impl TageLiteConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: &str| Err(BaselineError::Config(m.to_string()));
        if self.num_tagged_tables == 0 {
            return bad("num_tagged_tables must be positive");
        }
        if !self.table_entries.is_power_of_two() || !self.bimodal_entries.is_power_of_two() {
            return bad("table sizes must be powers of two");
        }
        if !(2..=16).contains(&self.tag_bits) {
            return bad("tag_bits must lie in [2, 16]");
        }
        if self.min_history == 0 || self.max_history < self.min_history {
            return bad("need 0 < min_history <= max_history");
        }
        if !(2..=7).contains(&self.counter_bits) {
            return bad("counter_bits must lie in [2, 7]");
        }
        if !(1..=7).contains(&self.useful_bits) {
            return bad("useful_bits must lie in [1, 7]");
        }
        Ok(())
    }

    /// Geometric series from `min_history` to `max_history`, rounded.
    pub fn history_lengths(&self) -> Vec<usize> {
        let n = self.num_tagged_tables;
        if n == 1 {
            return vec![self.max_history];
        }
        let ratio = (self.max_history as f64 / self.min_history as f64).powf(1.0 / (n - 1) as f64);
        (0..n)
            .map(|i| (self.min_history as f64 * ratio.powi(i as i32)).round() as usize)
            .collect()
    }
}

/// Circular-shift-register fold of the newest `length` history bits into
/// `width` bits.
#[derive(Debug, Clone)]
struct FoldedHistory {
    value: u32,
    length: usize,
    width: u32,
}

impl FoldedHistory {
    fn new(length: usize, width: u32) -> Self {
        Self {
            value: 0,
            length,
            width,
        }
    }

    fn push(&mut self, newest: bool, evicted: bool) {
        let mask = (1u32 << self.width) - 1;
        let mut v = (self.value << 1) | newest as u32;
        v ^= (evicted as u32) << (self.length as u32 % self.width);
        v ^= v >> self.width;
        self.value = v & mask;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct TaggedEntry {
    valid: bool,
    tag: u32,
    ctr: u8,
    useful: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provider {
    Bimodal,
    Tagged(usize),
}

/// Result of a prediction plus what the matching update needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagePrediction {
    pub ip: u64,
    pub taken: bool,
    pub provider: Provider,
    pub alt_taken: bool,
    indices: Vec<usize>,
    tags: Vec<u32>,
    bimodal_index: usize,
}

#[derive(Debug, Clone)]
pub struct TageLite {
    cfg: TageLiteConfig,
    lengths: Vec<usize>,
    bimodal: Vec<u8>,
    tables: Vec<Vec<TaggedEntry>>,
    /// Outcome ring, `max_history` long; `head` is the newest bit.
    history: Vec<bool>,
    head: usize,
    idx_folds: Vec<FoldedHistory>,
    tag_folds: Vec<FoldedHistory>,
    tag_folds2: Vec<FoldedHistory>,
    pending: Option<TagePrediction>,
}

impl TageLite {
    pub fn new(cfg: TageLiteConfig) -> Result<Self, BaselineError> {
        cfg.validate()?;
        let lengths = cfg.history_lengths();
        let idx_bits = cfg.table_entries.trailing_zeros();
        let weak_nt = (1u8 << (cfg.counter_bits - 1)) - 1;
        Ok(Self {
            bimodal: vec![weak_nt; cfg.bimodal_entries],
            tables: vec![vec![TaggedEntry::default(); cfg.table_entries]; cfg.num_tagged_tables],
            history: vec![false; cfg.max_history],
            head: 0,
            idx_folds: lengths
                .iter()
                .map(|&l| FoldedHistory::new(l, idx_bits.max(1)))
                .collect(),
            tag_folds: lengths
                .iter()
                .map(|&l| FoldedHistory::new(l, cfg.tag_bits))
                .collect(),
            tag_folds2: lengths
                .iter()
                .map(|&l| FoldedHistory::new(l, cfg.tag_bits - 1))
                .collect(),
            lengths,
            pending: None,
            cfg,
        })
    }

    pub fn config(&self) -> &TageLiteConfig {
        &self.cfg
    }

    pub fn history_lengths(&self) -> &[usize] {
        &self.lengths
    }

    fn counter_max(&self) -> u8 {
        (1u8 << self.cfg.counter_bits) - 1
    }

    fn useful_max(&self) -> u8 {
        (1u8 << self.cfg.useful_bits) - 1
    }

    fn midpoint(&self) -> u8 {
        1u8 << (self.cfg.counter_bits - 1)
    }

    /// Side-effect-free prediction.
    pub fn lookup(&self, ip: u64) -> TagePrediction {
        let idx_mask = self.cfg.table_entries - 1;
        let tag_mask = (1u32 << self.cfg.tag_bits) - 1;
        let mut indices = Vec::with_capacity(self.tables.len());
        let mut tags = Vec::with_capacity(self.tables.len());
        for t in 0..self.tables.len() {
            indices.push((self.idx_folds[t].value as usize ^ ip as usize) & idx_mask);
            tags.push(
                (ip as u32 ^ self.tag_folds[t].value ^ (self.tag_folds2[t].value << 1)) & tag_mask,
            );
        }
        let bimodal_index = ip as usize & (self.cfg.bimodal_entries - 1);
        let mid = self.midpoint();

        let mut matches = (0..self.tables.len()).rev().filter(|&t| {
            let e = &self.tables[t][indices[t]];
            e.valid && e.tag == tags[t]
        });
        let provider = matches.next();
        let alt = matches.next();
        let bimodal_taken = self.bimodal[bimodal_index] >= mid;
        let entry_taken = |t: usize| self.tables[t][indices[t]].ctr >= mid;

        let (provider, taken) = match provider {
            Some(t) => (Provider::Tagged(t), entry_taken(t)),
            None => (Provider::Bimodal, bimodal_taken),
        };
        let alt_taken = alt.map(entry_taken).unwrap_or(bimodal_taken);
        TagePrediction {
            ip,
            taken,
            provider,
            alt_taken,
            indices,
            tags,
            bimodal_index,
        }
    }

    pub fn tage_predict(&mut self, ip: u64) -> TagePrediction {
        let p = self.lookup(ip);
        self.pending = Some(p.clone());
        p
    }

    pub fn tage_update(&mut self, ip: u64, taken: bool) -> Result<(), BaselineError> {
        let pred = match self.pending.take() {
            Some(p) if p.ip == ip => p,
            other => {
                let pending = other.as_ref().map(|p| p.ip);
                self.pending = other;
                return Err(BaselineError::UnmatchedUpdate { got: ip, pending });
            }
        };
        let cmax = self.counter_max();
        let umax = self.useful_max();
        let step = |c: u8| if taken { sat_inc(c, cmax) } else { sat_dec(c) };

        let first_candidate = match pred.provider {
            Provider::Bimodal => {
                let b = &mut self.bimodal[pred.bimodal_index];
                *b = step(*b);
                0
            }
            Provider::Tagged(t) => {
                let e = &mut self.tables[t][pred.indices[t]];
                e.ctr = step(e.ctr);
                if pred.taken != pred.alt_taken {
                    e.useful = if pred.taken == taken {
                        sat_inc(e.useful, umax)
                    } else {
                        sat_dec(e.useful)
                    };
                }
                t + 1
            }
        };

        if pred.taken != taken && first_candidate < self.tables.len() {
            let free = (first_candidate..self.tables.len()).find(|&t| {
                let e = &self.tables[t][pred.indices[t]];
                !e.valid || e.useful == 0
            });
            match free {
                Some(t) => {
                    let mid = self.midpoint();
                    self.tables[t][pred.indices[t]] = TaggedEntry {
                        valid: true,
                        tag: pred.tags[t],
                        ctr: if taken { mid } else { mid - 1 },
                        useful: 0,
                    };
                }
                None => {
                    for t in first_candidate..self.tables.len() {
                        let e = &mut self.tables[t][pred.indices[t]];
                        e.useful = sat_dec(e.useful);
                    }
                }
            }
        }
        self.push_history(taken);
        Ok(())
    }

    fn push_history(&mut self, taken: bool) {
        let len = self.history.len();
        for t in 0..self.lengths.len() {
            // bit that ages past this table's history length
            let evicted = self.history[(self.head + self.lengths[t] - 1) % len];
            self.idx_folds[t].push(taken, evicted);
            self.tag_folds[t].push(taken, evicted);
            self.tag_folds2[t].push(taken, evicted);
        }
        self.head = (self.head + len - 1) % len;
        self.history[self.head] = taken;
    }

    /// Every counter in the predictor, for range checks.
    pub fn counters(&self) -> impl Iterator<Item = (u8, u8)> + '_ {
        let ctr = self.bimodal.iter().map(|&c| (c, 0));
        ctr.chain(self.tables.iter().flatten().map(|e| (e.ctr, e.useful)))
    }

    /// Entry `(valid, tag, ctr, useful)` in tagged table `t`.
    pub fn entry(&self, t: usize, index: usize) -> (bool, u32, u8, u8) {
        let e = self.tables[t][index];
        (e.valid, e.tag, e.ctr, e.useful)
    }

    pub fn set_entry(
        &mut self,
        t: usize,
        index: usize,
        valid: bool,
        tag: u32,
        ctr: u8,
        useful: u8,
    ) {
        self.tables[t][index] = TaggedEntry {
            valid,
            tag,
            ctr,
            useful,
        };
    }

    pub fn bimodal_counter(&self, ip: u64) -> u8 {
        self.bimodal[ip as usize & (self.cfg.bimodal_entries - 1)]
    }

    /// Computed `(index, tag)` for `ip` in every tagged table under the
    /// current history.
    pub fn slots_for(&self, ip: u64) -> Vec<(usize, u32)> {
        let p = self.lookup(ip);
        p.indices.into_iter().zip(p.tags).collect()
    }
}

impl BranchPredictor for TageLite {
    fn predict(&mut self, ip: u64) -> bool {
        self.tage_predict(ip).taken
    }

    fn update(&mut self, ip: u64, taken: bool) -> Result<(), BaselineError> {
        self.tage_update(ip, taken)
    }

    fn name(&self) -> &'static str {
        "tage-lite"
    }
}
