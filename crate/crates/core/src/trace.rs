//! Branch traces: the in-memory model, the two on-disk formats and the
//! synthetic workload generators.
//!
//! A trace is the dynamic sequence of conditional branches in execution order.
//! Two file formats are supported:
//!
//! * binary: `BRT1`, `u32` LE record count, then `count` records of
//!   `{u64 LE ip, u8 direction}`, then an optional footer `META`, `u32` LE
//!   length, and that many bytes of UTF-8 JSON metadata;
//! * text: one `0x<hex ip>,<0|1>` record per line. Lines starting with `#` are
//!   comments, except `#@meta <json>` which carries the metadata.
//!
//! Synthetic traces use [`rand_chacha::ChaCha8Rng`] seeded through
//! `SeedableRng::seed_from_u64`; the algorithm is frozen so golden traces are
//! stable across platforms.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Synthetic IP of the data-dependent branch the H2P copies. Low byte is 0x87.
pub const IP_DATA_BRANCH: u64 = 0x0040_0587;
/// Synthetic IP of the variable-count loop back-edge.
pub const IP_LOOP_BRANCH: u64 = 0x0040_05b1;
/// Synthetic IP of the uncorrelated branch inside the loop body.
pub const IP_BODY_BRANCH: u64 = 0x0040_0594;
/// Synthetic IP of the hard-to-predict branch.
pub const IP_H2P_BRANCH: u64 = 0x0040_05c3;

/// Dynamic instructions charged per branch record in synthetic traces.
/// Arbitrary; only exists so MPKI is computable.
pub const SYNTH_INSTRUCTIONS_PER_BRANCH: u64 = 4;

const BIN_MAGIC: &[u8; 4] = b"BRT1";
const META_MAGIC: &[u8; 4] = b"META";
const BIN_RECORD_LEN: usize = 9;
const TEXT_META_PREFIX: &str = "#@meta ";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error at byte {offset}: {msg}")]
    Binary { offset: usize, msg: String },
    #[error("format error at line {line}: {msg}")]
    Text { line: usize, msg: String },
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

/// One dynamic conditional branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BranchRecord {
    pub ip: u64,
    pub taken: bool,
}

impl BranchRecord {
    pub fn new(ip: u64, taken: bool) -> Self {
        Self { ip, taken }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub workload_id: String,
    #[serde(default)]
    pub generator_seed: Option<u64>,
    /// Total dynamic instructions, used for MPKI.
    #[serde(default)]
    pub instruction_count: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub records: Vec<BranchRecord>,
    pub meta: TraceMeta,
}

impl Trace {
    pub fn new(records: Vec<BranchRecord>, meta: TraceMeta) -> Result<Self, TraceError> {
        if let Some(n) = meta.instruction_count {
            if n < records.len() as u64 {
                return Err(TraceError::Config(format!(
                    "instruction_count {n} is smaller than record count {}",
                    records.len()
                )));
            }
        }
        Ok(Self { records, meta })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of dynamic occurrences of `ip`.
    pub fn occurrences(&self, ip: u64) -> usize {
        self.records.iter().filter(|r| r.ip == ip).count()
    }
}

/// Maps an outer-call input value to the inner loop's iteration count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoopCountRule {
    /// `(value mod modulus) + 1` iterations.
    ModPlusOne { modulus: u32 },
    /// Constant iteration count.
    Fixed { count: u32 },
}

impl LoopCountRule {
    pub fn iterations(&self, value: u32) -> u32 {
        match *self {
            LoopCountRule::ModPlusOne { modulus } => value % modulus + 1,
            LoopCountRule::Fixed { count } => count,
        }
    }

    pub fn max_iterations(&self, value_range: u32) -> u32 {
        match *self {
            LoopCountRule::ModPlusOne { modulus } => modulus.min(value_range),
            LoopCountRule::Fixed { count } => count,
        }
    }

    fn validate(&self) -> Result<(), TraceError> {
        match *self {
            LoopCountRule::ModPlusOne { modulus: 0 } => {
                Err(TraceError::Config("loop modulus must be positive".into()))
            }
            LoopCountRule::Fixed { count: 0 } => Err(TraceError::Config(
                "fixed loop count must be positive".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_calls: usize,
    /// Inputs are drawn uniformly from `[0, value_range)`.
    pub value_range: u32,
    /// Data branch and H2P are taken when the input is below this value.
    pub taken_threshold: u32,
    pub loop_count_rule: LoopCountRule,
    /// Emit an uncorrelated data-dependent branch in every loop iteration.
    pub loop_body_branch: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_calls: 10_000,
            value_range: 1000,
            taken_threshold: 333,
            loop_count_rule: LoopCountRule::ModPlusOne { modulus: 8 },
            loop_body_branch: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.taken_threshold == 0 || self.taken_threshold >= self.value_range {
            return Err(TraceError::Config(format!(
                "taken_threshold must lie in (0, {}), got {}",
                self.value_range, self.taken_threshold
            )));
        }
        self.loop_count_rule.validate()
    }

    /// Records emitted per loop iteration.
    fn records_per_iteration(&self) -> usize {
        if self.loop_body_branch {
            2
        } else {
            1
        }
    }

    /// Distance (in records) from the data branch to the H2P of the same call
    /// for a loop of `iterations` iterations. Distance 1 is the record
    /// immediately preceding the H2P.
    pub fn correlated_distance(&self, iterations: u32) -> usize {
        iterations as usize * self.records_per_iteration() + 1
    }
}

/// Per-H2P tallies recorded while generating, in window coordinates
/// (`window - 1` is the most recent position).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionTally {
    pub window: usize,
    /// Position of the same-call data branch.
    pub nearest: Vec<u64>,
    /// Positions of every data-branch occurrence inside the window.
    pub all: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct VarPositionTrace {
    pub trace: Trace,
    pub tally: PositionTally,
}

struct Emitter<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    records: Vec<BranchRecord>,
}

impl<'a> Emitter<'a> {
    fn new(cfg: &'a SynthConfig) -> Self {
        Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            records: Vec::with_capacity(cfg.num_calls * 8),
        }
    }

    /// Emits one call; returns the record index of its data branch.
    fn call(&mut self) -> usize {
        let value = self.rng.random_range(0..self.cfg.value_range);
        let taken = value < self.cfg.taken_threshold;
        let iterations = self.cfg.loop_count_rule.iterations(value);

        let data_at = self.records.len();
        self.records.push(BranchRecord::new(IP_DATA_BRANCH, taken));
        for i in 0..iterations {
            if self.cfg.loop_body_branch {
                let bit = self.rng.random::<u32>() & 1 == 1;
                self.records.push(BranchRecord::new(IP_BODY_BRANCH, bit));
            }
            self.records
                .push(BranchRecord::new(IP_LOOP_BRANCH, i + 1 < iterations));
        }
        self.records.push(BranchRecord::new(IP_H2P_BRANCH, taken));
        data_at
    }

    fn finish(self, workload_id: String) -> Trace {
        let n = self.records.len() as u64;
        Trace {
            records: self.records,
            meta: TraceMeta {
                workload_id,
                generator_seed: Some(self.cfg.seed),
                instruction_count: Some(n * SYNTH_INSTRUCTIONS_PER_BRANCH),
            },
        }
    }
}

/// Synthetic function whose H2P copies an earlier data-dependent branch
/// across a loop with a data-dependent trip count.
pub fn generate_listing1_trace(config: &SynthConfig) -> Result<Trace, TraceError> {
    config.validate()?;
    let mut em = Emitter::new(config);
    for _ in 0..config.num_calls {
        em.call();
    }
    Ok(em.finish(format!("listing1-s{}", config.seed)))
}

/// Like [`generate_listing1_trace`] but with a loop trip count of
/// `(value mod position_spread) + 1`, so the same-call data branch lands on
/// `position_spread` distinct positions of the H2P's history.
pub fn generate_varposition_trace(
    config: &SynthConfig,
    position_spread: u32,
    window: usize,
) -> Result<VarPositionTrace, TraceError> {
    if position_spread == 0 {
        return Err(TraceError::Config(
            "position_spread must be at least 1".into(),
        ));
    }
    if window == 0 {
        return Err(TraceError::Config("window must be at least 1".into()));
    }
    let cfg = SynthConfig {
        loop_count_rule: LoopCountRule::ModPlusOne {
            modulus: position_spread,
        },
        ..config.clone()
    };
    cfg.validate()?;
    if position_spread > cfg.value_range {
        return Err(TraceError::Config(format!(
            "position_spread {position_spread} exceeds value_range {}",
            cfg.value_range
        )));
    }
    let max_distance = cfg.correlated_distance(position_spread);
    if max_distance > window {
        return Err(TraceError::Config(format!(
            "position_spread {position_spread} puts the correlated branch {max_distance} records back, beyond the {window}-record window"
        )));
    }

    let mut tally = PositionTally {
        window,
        nearest: vec![0; window],
        all: vec![0; window],
    };
    let mut recent_data: VecDeque<usize> = VecDeque::new();
    let mut em = Emitter::new(&cfg);
    for _ in 0..cfg.num_calls {
        let data_at = em.call();
        recent_data.push_back(data_at);
        let h2p_at = em.records.len() - 1;
        while let Some(&front) = recent_data.front() {
            if h2p_at - front > window {
                recent_data.pop_front();
            } else {
                break;
            }
        }
        for &at in &recent_data {
            tally.all[window - (h2p_at - at)] += 1;
        }
        tally.nearest[window - (h2p_at - data_at)] += 1;
    }
    let trace = em.finish(format!("varpos{position_spread}-s{}", cfg.seed));
    Ok(VarPositionTrace { trace, tally })
}

/// For every occurrence of `h2p_ip`, counts where `correlated_ip` appears in
/// the preceding `window` records. Index `window - 1` is the most recent
/// position.
pub fn position_histogram(
    trace: &Trace,
    h2p_ip: u64,
    correlated_ip: u64,
    window: usize,
) -> Vec<u64> {
    let mut hist = vec![0u64; window];
    if window == 0 {
        return hist;
    }
    for (idx, rec) in trace.records.iter().enumerate() {
        if rec.ip != h2p_ip {
            continue;
        }
        let start = idx.saturating_sub(window);
        for (at, prior) in trace.records[start..idx].iter().enumerate() {
            if prior.ip == correlated_ip {
                let distance = idx - (start + at);
                hist[window - distance] += 1;
            }
        }
    }
    hist
}

fn meta_json(meta: &TraceMeta) -> String {
    serde_json::to_string(meta).expect("metadata serializes")
}

pub fn encode_binary(trace: &Trace) -> Vec<u8> {
    let meta = meta_json(&trace.meta);
    let mut out = Vec::with_capacity(8 + trace.len() * BIN_RECORD_LEN + 8 + meta.len());
    out.extend_from_slice(BIN_MAGIC);
    out.extend_from_slice(&(trace.len() as u32).to_le_bytes());
    for r in &trace.records {
        out.extend_from_slice(&r.ip.to_le_bytes());
        out.push(r.taken as u8);
    }
    out.extend_from_slice(META_MAGIC);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<Trace, TraceError> {
    let err = |offset: usize, msg: &str| TraceError::Binary {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 8 {
        return Err(err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != BIN_MAGIC {
        return Err(err(0, "bad magic, expected BRT1"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body_end = count
        .checked_mul(BIN_RECORD_LEN)
        .and_then(|n| n.checked_add(8))
        .ok_or_else(|| err(4, "record count overflows"))?;
    if bytes.len() < body_end {
        let offset = 8 + (bytes.len() - 8) / BIN_RECORD_LEN * BIN_RECORD_LEN;
        return Err(err(offset, "truncated record"));
    }
    let mut records = Vec::with_capacity(count);
    for (k, chunk) in bytes[8..body_end].chunks_exact(BIN_RECORD_LEN).enumerate() {
        let ip = u64::from_le_bytes(chunk[..8].try_into().unwrap());
        let taken = match chunk[8] {
            0 => false,
            1 => true,
            _ => {
                return Err(err(
                    8 + k * BIN_RECORD_LEN + 8,
                    "direction byte must be 0 or 1",
                ))
            }
        };
        records.push(BranchRecord { ip, taken });
    }

    let rest = &bytes[body_end..];
    let meta = if rest.is_empty() {
        TraceMeta::default()
    } else {
        if rest.len() < 8 || &rest[..4] != META_MAGIC {
            return Err(err(body_end, "trailing bytes are not a META footer"));
        }
        let len = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
        if rest.len() != 8 + len {
            return Err(err(
                body_end + 4,
                "metadata length does not match footer size",
            ));
        }
        let text = std::str::from_utf8(&rest[8..])
            .map_err(|e| err(body_end + 8 + e.valid_up_to(), "metadata is not UTF-8"))?;
        serde_json::from_str(text).map_err(|e| err(body_end + 8, &format!("bad metadata: {e}")))?
    };
    Trace::new(records, meta).map_err(|e| err(body_end, &e.to_string()))
}

pub fn encode_text(trace: &Trace) -> String {
    let mut out = String::with_capacity(trace.len() * 12 + 64);
    out.push_str(TEXT_META_PREFIX);
    out.push_str(&meta_json(&trace.meta));
    out.push('\n');
    for r in &trace.records {
        out.push_str(&format!("{:#x},{}\n", r.ip, r.taken as u8));
    }
    out
}

/// Parses one `0x<hex>,<0|1>` line.
pub fn parse_text_record(line: &str) -> Result<BranchRecord, String> {
    let (ip, dir) = line.split_once(',').ok_or("expected `0x<hex ip>,<0|1>`")?;
    let hex = ip
        .trim()
        .strip_prefix("0x")
        .or_else(|| ip.trim().strip_prefix("0X"))
        .ok_or("ip must start with 0x")?;
    let ip = u64::from_str_radix(hex, 16).map_err(|_| format!("non-hex ip `{}`", ip.trim()))?;
    let taken = match dir.trim() {
        "0" => false,
        "1" => true,
        other => return Err(format!("direction must be 0 or 1, got `{other}`")),
    };
    Ok(BranchRecord { ip, taken })
}

pub fn decode_text<R: BufRead>(reader: R) -> Result<Trace, TraceError> {
    let mut records = Vec::new();
    let mut meta = TraceMeta::default();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let trimmed = line.trim();
        if let Some(json) = trimmed.strip_prefix(TEXT_META_PREFIX.trim_end()) {
            meta = serde_json::from_str(json.trim()).map_err(|e| TraceError::Text {
                line: lineno,
                msg: format!("bad metadata: {e}"),
            })?;
            continue;
        }
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        records.push(
            parse_text_record(trimmed).map_err(|msg| TraceError::Text { line: lineno, msg })?,
        );
    }
    Trace::new(records, meta).map_err(|e| TraceError::Text {
        line: 0,
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Binary,
    Text,
}

impl TraceFormat {
    /// `.txt`/`.trace.txt`/`.csv` are text; everything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") | Some("csv") => TraceFormat::Text,
            _ => TraceFormat::Binary,
        }
    }
}

pub fn write_trace(trace: &Trace, path: &Path, format: TraceFormat) -> Result<(), TraceError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    match format {
        TraceFormat::Binary => w.write_all(&encode_binary(trace))?,
        TraceFormat::Text => w.write_all(encode_text(trace).as_bytes())?,
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace, detecting the format from the leading magic bytes.
pub fn read_trace(path: &Path) -> Result<Trace, TraceError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(BIN_MAGIC) {
        decode_binary(&bytes)
    } else {
        decode_text(BufReader::new(bytes.as_slice()))
    }
}

/// Direction of the same-call data branch for every H2P occurrence, used to
/// check that the H2P is an exact copy.
pub fn same_call_pairs(trace: &Trace) -> Vec<(bool, bool)> {
    let mut last_data = None;
    let mut pairs = Vec::new();
    for r in &trace.records {
        match r.ip {
            IP_DATA_BRANCH => last_data = Some(r.taken),
            IP_H2P_BRANCH => {
                if let Some(d) = last_data.take() {
                    pairs.push((d, r.taken));
                }
            }
            _ => {}
        }
    }
    pairs
}

/// Number of records per static ip, in ip order.
pub fn static_counts(trace: &Trace) -> BTreeMap<u64, usize> {
    let mut m = BTreeMap::new();
    for r in &trace.records {
        *m.entry(r.ip).or_insert(0) += 1;
    }
    m
}
