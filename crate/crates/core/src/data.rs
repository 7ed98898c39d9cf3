//! Marked event sequences, JSONL dataset I/O, splitting and padded batching.
//!
//! On disk a dataset is one JSON object per line:
//!
//! ```text
//! {"seq":[{"k":0,"t":0.5},{"k":1,"t":1.2}],"T":2.0}
//! ```
//!
//! `T` is optional and defaults to the last timestamp. Timestamps are written
//! with the shortest decimal form that parses back to the identical `f64`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: invalid sequence: {msg}")]
    Validation { line: usize, msg: String },
    #[error("split would leave a part empty (sizes {0:?})")]
    DegenerateSplit((usize, usize, usize)),
    #[error("invalid split fractions {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub k: usize,
    pub t: f64,
}

impl Event {
    pub fn new(k: usize, t: f64) -> Self {
        Self { k, t }
    }
}

/// A validated event sequence on the observation window `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    events: Vec<Event>,
    horizon: f64,
}

impl EventSequence {
    /// Checks: nonempty, timestamps finite, non-negative, strictly
    /// increasing and not past `horizon`.
    pub fn new(events: Vec<Event>, horizon: f64) -> Result<Self, String> {
        if events.is_empty() {
            return Err("sequence is empty".into());
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in events.iter().enumerate() {
            if !e.t.is_finite() || e.t < 0.0 {
                return Err(format!("event {i}: invalid timestamp {}", e.t));
            }
            if e.t <= prev {
                return Err(format!(
                    "event {i}: timestamps not strictly increasing ({} after {prev})",
                    e.t
                ));
            }
            prev = e.t;
        }
        if !(horizon.is_finite() && horizon >= prev) {
            return Err(format!("horizon {horizon} precedes last event {prev}"));
        }
        Ok(Self { events, horizon })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn max_type(&self) -> usize {
        self.events.iter().map(|e| e.k).max().unwrap_or(0)
    }

    /// Gap before event `i`, with time 0 as the predecessor of the first event.
    pub fn gap(&self, i: usize) -> f64 {
        if i == 0 {
            self.events[0].t
        } else {
            self.events[i].t - self.events[i - 1].t
        }
    }

    /// The first `n` events as a history (horizon = time of the last one).
    pub fn prefix(&self, n: usize) -> &[Event] {
        &self.events[..n]
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub num_types: usize,
    pub sequences: Vec<EventSequence>,
}

#[derive(Serialize, Deserialize)]
struct SeqRecord {
    seq: Vec<Event>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    horizon: Option<f64>,
}

impl Dataset {
    /// Builds a dataset, inferring `K` from the data unless a larger value
    /// is declared.
    pub fn new(
        name: impl Into<String>,
        sequences: Vec<EventSequence>,
        declared_types: Option<usize>,
    ) -> Result<Self, DataError> {
        let observed = sequences.iter().map(|s| s.max_type() + 1).max().unwrap_or(1);
        let num_types = match declared_types {
            Some(k) if k < observed => {
                return Err(DataError::Validation {
                    line: 0,
                    msg: format!("type id {} exceeds declared K={k}", observed - 1),
                })
            }
            Some(k) => k,
            None => observed,
        };
        Ok(Self {
            name: name.into(),
            num_types,
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn mean_length(&self) -> f64 {
        self.num_events() as f64 / self.len().max(1) as f64
    }

    /// Mean inter-event gap over consecutive events within sequences.
    pub fn mean_gap(&self) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for s in &self.sequences {
            for i in 1..s.len() {
                sum += s.gap(i);
                n += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }

    /// Per-type event counts.
    pub fn type_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_types];
        for s in &self.sequences {
            for e in s.events() {
                c[e.k] += 1;
            }
        }
        c
    }

    /// Sequences usable for training (at least one inter-event interval).
    /// Shorter sequences are dropped and counted in the log.
    pub fn trainable(&self) -> Dataset {
        let kept: Vec<EventSequence> = self
            .sequences
            .iter()
            .filter(|s| s.len() >= 2)
            .cloned()
            .collect();
        let skipped = self.len() - kept.len();
        if skipped > 0 {
            log::info!("{}: skipped {skipped} single-event sequences", self.name);
        }
        Dataset {
            name: self.name.clone(),
            num_types: self.num_types,
            sequences: kept,
        }
    }

    pub fn subset(&self, name: &str, idx: &[usize]) -> Dataset {
        Dataset {
            name: name.to_string(),
            num_types: self.num_types,
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }
}

pub fn load_dataset(path: &Path, declared_types: Option<usize>) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_dataset(BufReader::new(file), &name, declared_types)
}

pub fn read_dataset<R: BufRead>(
    reader: R,
    name: &str,
    declared_types: Option<usize>,
) -> Result<Dataset, DataError> {
    let mut sequences = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SeqRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if let Some(k) = declared_types {
            if let Some(e) = rec.seq.iter().find(|e| e.k >= k) {
                return Err(DataError::Validation {
                    line: line_no,
                    msg: format!("type id {} not below declared K={k}", e.k),
                });
            }
        }
        let horizon = rec
            .horizon
            .unwrap_or_else(|| rec.seq.last().map(|e| e.t).unwrap_or(0.0));
        let seq = EventSequence::new(rec.seq, horizon).map_err(|msg| DataError::Validation {
            line: line_no,
            msg,
        })?;
        sequences.push(seq);
    }
    Dataset::new(name, sequences, declared_types)
}

pub fn write_dataset<W: Write>(writer: W, data: &Dataset) -> Result<(), DataError> {
    let mut w = BufWriter::new(writer);
    for s in &data.sequences {
        let rec = SeqRecord {
            seq: s.events.clone(),
            horizon: Some(s.horizon),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<(), DataError> {
    write_dataset(std::fs::File::create(path)?, data)
}

/// Seeded shuffle followed by a partition with sizes
/// `round(n·train)`, `round(n·val)` and the remainder.
pub fn split(
    data: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions));
    }
    let n = data.len();
    let n_train = (n as f64 * a).round() as usize;
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_val);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(DataError::DegenerateSplit((n_train, n_val, n_test)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    Ok((
        data.subset(&format!("{}-train", data.name), &idx[..n_train]),
        data.subset(&format!("{}-val", data.name), &idx[n_train..n_train + n_val]),
        data.subset(&format!("{}-test", data.name), &idx[n_train + n_val..]),
    ))
}

/// Padded `[B × L_max]` view of several sequences. Padded cells hold type
/// `K` and time 0; the mask is true for real events.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub max_len: usize,
    pub num_types: usize,
    pub types: Vec<usize>,
    pub times: Vec<f64>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&EventSequence], num_types: usize) -> Self {
        let rows = seqs.len();
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut types = vec![num_types; rows * max_len];
        let mut times = vec![0.0; rows * max_len];
        let mut mask = vec![false; rows * max_len];
        for (r, s) in seqs.iter().enumerate() {
            for (i, e) in s.events().iter().enumerate() {
                types[r * max_len + i] = e.k;
                times[r * max_len + i] = e.t;
                mask[r * max_len + i] = true;
            }
        }
        Self {
            rows,
            max_len,
            num_types,
            types,
            times,
            mask,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        }
    }

    pub fn num_events(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn at(&self, row: usize, pos: usize) -> Option<Event> {
        let i = row * self.max_len + pos;
        self.mask[i].then(|| Event::new(self.types[i], self.times[i]))
    }
}

/// Consecutive batches of `batch_size` sequences in dataset order.
pub fn batchify(data: &Dataset, batch_size: usize) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    data.sequences
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&EventSequence> = chunk.iter().collect();
            Batch::from_sequences(&refs, data.num_types)
        })
        .collect()
}
