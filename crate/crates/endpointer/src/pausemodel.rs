//! Expected-pause estimation from corpus statistics.
//!
//! Every query contributes one pause sample per transcript prefix: the gap
//! that followed the prefix, or zero when the query ended there. A query's
//! expected pause is the 95th percentile of the samples stored for its full
//! transcript, scaled by how fast this speaker said the prefix relative to
//! everyone else who said it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QueryRecord};
use crate::error::{Error, Result};
use crate::stats::{mean, nearest_rank_percentile, population_variance};

pub const DEFAULT_MIN_COUNT: usize = 5;
pub const DEFAULT_PAUSE_MS: f64 = 300.0;

/// Case-folded token sequence used as a table key. Only exact sequence
/// equality matches; "play some" and "play something" are unrelated keys.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PrefixKey(Vec<String>);

impl PrefixKey {
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("prefix key"));
        }
        Ok(PrefixKey(
            tokens.iter().map(|t| t.as_ref().to_lowercase()).collect(),
        ))
    }

    /// Key for a record's full transcript.
    pub fn full_transcript(record: &QueryRecord) -> Self {
        PrefixKey(record.tokens.iter().map(|t| t.text.to_lowercase()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn joined(&self) -> String {
        self.0.join(" ")
    }

    fn parse(joined: &str) -> Result<Self> {
        let tokens: Vec<&str> = joined.split_whitespace().collect();
        PrefixKey::new(&tokens)
    }
}

impl fmt::Display for PrefixKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.joined())
    }
}

/// Aggregated pause behaviour after one exact prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixStats {
    pub count: usize,
    pub mean_ms: f64,
    pub var_ms2: f64,
    pub p95_ms: f64,
    pub mean_prefix_duration_ms: f64,
    /// Raw samples, sorted; empty when loaded from a summary-only file.
    pub pause_samples_ms: Vec<f64>,
    pub prefix_durations_ms: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct RawStats {
    pause_samples_ms: Vec<f64>,
    prefix_durations_ms: Vec<f64>,
}

impl RawStats {
    /// Sorting before reduction makes the result independent of the order
    /// contributions arrived in, so parallel merges stay bit-exact.
    fn finalize(mut self) -> PrefixStats {
        self.pause_samples_ms.sort_by(f64::total_cmp);
        self.prefix_durations_ms.sort_by(f64::total_cmp);
        PrefixStats {
            count: self.pause_samples_ms.len(),
            mean_ms: mean(&self.pause_samples_ms),
            var_ms2: population_variance(&self.pause_samples_ms),
            p95_ms: nearest_rank_percentile(&self.pause_samples_ms, 95.0).unwrap_or(0.0),
            mean_prefix_duration_ms: mean(&self.prefix_durations_ms),
            pause_samples_ms: self.pause_samples_ms,
            prefix_durations_ms: self.prefix_durations_ms,
        }
    }
}

type RawTable = BTreeMap<PrefixKey, RawStats>;

fn merge_raw(mut a: RawTable, b: RawTable) -> RawTable {
    for (key, stats) in b {
        let entry = a.entry(key).or_default();
        entry.pause_samples_ms.extend(stats.pause_samples_ms);
        entry.prefix_durations_ms.extend(stats.prefix_durations_ms);
    }
    a
}

fn record_contributions(record: &QueryRecord) -> RawTable {
    let mut table = RawTable::new();
    let tokens = &record.tokens;
    let texts: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();
    for k in 1..=tokens.len() {
        let key = PrefixKey(texts[..k].to_vec());
        let pause = if k < tokens.len() {
            (tokens[k].start_ms - tokens[k - 1].end_ms) as f64
        } else {
            0.0
        };
        let duration = (tokens[k - 1].end_ms - tokens[0].start_ms) as f64;
        let entry = table.entry(key).or_default();
        entry.pause_samples_ms.push(pause);
        entry.prefix_durations_ms.push(duration);
    }
    table
}

#[derive(Debug, Clone, PartialEq)]
pub struct PauseModel {
    table: BTreeMap<PrefixKey, PrefixStats>,
    pub min_count: usize,
    pub default_pause_ms: f64,
}

/// Builds the pause table from a corpus. Aggregation runs in parallel over
/// records; the merged result does not depend on thread count.
pub fn fit(corpus: &Corpus, min_count: usize, default_pause_ms: f64) -> Result<PauseModel> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    if !(default_pause_ms >= 0.0) {
        return Err(Error::Config("default_pause_ms must be non-negative".into()));
    }
    let raw = corpus
        .records
        .par_iter()
        .map(record_contributions)
        .reduce(RawTable::new, merge_raw);
    let table = raw.into_iter().map(|(k, v)| (k, v.finalize())).collect();
    Ok(PauseModel {
        table,
        min_count,
        default_pause_ms,
    })
}

impl PauseModel {
    pub fn stats(&self, prefix: &PrefixKey) -> Option<&PrefixStats> {
        self.table.get(prefix)
    }

    pub fn prefixes(&self) -> impl Iterator<Item = (&PrefixKey, &PrefixStats)> {
        self.table.iter()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Expected pause after `prefix` from text statistics alone: the 95th
    /// percentile of stored samples, or the default for prefixes seen fewer
    /// than `min_count` times.
    pub fn expected_text_pause(&self, prefix: &PrefixKey) -> f64 {
        match self.table.get(prefix) {
            Some(stats) if stats.count >= self.min_count => stats.p95_ms,
            _ => self.default_pause_ms,
        }
    }

    /// How fast this query said `prefix` relative to the stored average:
    /// the ratio of its prefix duration to the mean stored duration. Falls
    /// back to 1.0 when the prefix is unknown or too rare.
    pub fn speaking_rate(&self, query: &QueryRecord, prefix: &PrefixKey) -> Result<f64> {
        let k = prefix.len();
        if k > query.tokens.len() {
            return Err(Error::Invalid(format!(
                "prefix '{prefix}' is longer than the query transcript"
            )));
        }
        for (key_tok, q_tok) in prefix.tokens().iter().zip(&query.tokens) {
            if key_tok != &q_tok.text.to_lowercase() {
                return Err(Error::Invalid(format!(
                    "prefix '{prefix}' does not match the query transcript"
                )));
            }
        }
        let stats = match self.table.get(prefix) {
            Some(s) if s.count >= self.min_count => s,
            _ => return Ok(1.0),
        };
        if !(stats.mean_prefix_duration_ms > 0.0) {
            return Err(Error::Invalid(format!(
                "prefix '{prefix}' has zero mean stored duration"
            )));
        }
        let query_duration =
            (query.tokens[k - 1].end_ms - query.tokens[0].start_ms) as f64;
        Ok(query_duration / stats.mean_prefix_duration_ms)
    }

    /// Expected pause for a whole query: text estimate for its full
    /// transcript, scaled by the query's speaking rate.
    pub fn expected_pause(&self, query: &QueryRecord) -> Result<f64> {
        if query.tokens.is_empty() {
            return Err(Error::Empty("query tokens"));
        }
        let prefix = PrefixKey::full_transcript(query);
        let t_text = self.expected_text_pause(&prefix);
        let rate = self.speaking_rate(query, &prefix)?;
        Ok(t_text * rate)
    }

    pub fn save(&self, path: &Path, include_samples: bool) -> Result<()> {
        let wire = ModelWire {
            schema_version: 1,
            min_count: self.min_count,
            default_pause_ms: self.default_pause_ms,
            prefixes: self
                .table
                .iter()
                .map(|(key, s)| {
                    (
                        key.joined(),
                        StatsWire {
                            count: s.count,
                            mean_ms: s.mean_ms,
                            var_ms2: s.var_ms2,
                            p95_ms: s.p95_ms,
                            mean_prefix_duration_ms: s.mean_prefix_duration_ms,
                            pause_samples_ms: include_samples
                                .then(|| s.pause_samples_ms.clone()),
                            prefix_durations_ms: include_samples
                                .then(|| s.prefix_durations_ms.clone()),
                        },
                    )
                })
                .collect(),
        };
        let json =
            serde_json::to_string_pretty(&wire).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let wire: ModelWire = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut table = BTreeMap::new();
        for (joined, s) in wire.prefixes {
            let key = PrefixKey::parse(&joined)?;
            if let Some(samples) = &s.pause_samples_ms {
                if samples.len() != s.count {
                    return Err(Error::Invalid(format!(
                        "prefix '{joined}': {} samples but count {}",
                        samples.len(),
                        s.count
                    )));
                }
            }
            table.insert(
                key,
                PrefixStats {
                    count: s.count,
                    mean_ms: s.mean_ms,
                    var_ms2: s.var_ms2,
                    p95_ms: s.p95_ms,
                    mean_prefix_duration_ms: s.mean_prefix_duration_ms,
                    pause_samples_ms: s.pause_samples_ms.unwrap_or_default(),
                    prefix_durations_ms: s.prefix_durations_ms.unwrap_or_default(),
                },
            );
        }
        Ok(PauseModel {
            table,
            min_count: wire.min_count,
            default_pause_ms: wire.default_pause_ms,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelWire {
    schema_version: u32,
    min_count: usize,
    default_pause_ms: f64,
    prefixes: BTreeMap<String, StatsWire>,
}

#[derive(Serialize, Deserialize)]
struct StatsWire {
    count: usize,
    mean_ms: f64,
    var_ms2: f64,
    p95_ms: f64,
    mean_prefix_duration_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pause_samples_ms: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    prefix_durations_ms: Option<Vec<f64>>,
}
