//! Synthetic aligned query corpora.
//!
//! Records are generated from a small grammar: each template is a base
//! phrase plus optional continuation slots, so prefixes like
//! "what is the weather" occur both as complete queries and as prefixes of
//! longer ones. Token timing, within-query pauses, speaking rate, and
//! trailing silence are all drawn per record from a seeded RNG, and features
//! are synthesized at the frame level.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{synth_features, DspParams, FeatureSequence};
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, indexed_seed, rng_from};

pub const SCHEMA_VERSION: u32 = 1;

/// One aligned word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start_ms: u32,
    pub end_ms: u32,
}

/// One aligned query with its synthesized feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub id: String,
    pub speaker_id: String,
    pub tokens: Vec<Token>,
    /// End of the last token; the query is over from here on.
    pub gt_endpoint_ms: u32,
    /// Audio continues past the endpoint by this much.
    pub trailing_silence_ms: u32,
    pub features: FeatureSequence,
}

impl QueryRecord {
    pub fn total_ms(&self) -> u32 {
        self.gt_endpoint_ms + self.trailing_silence_ms
    }

    pub fn token_spans(&self) -> Vec<(u32, u32)> {
        self.tokens.iter().map(|t| (t.start_ms, t.end_ms)).collect()
    }

    fn validate(&self, frame_ms: u32) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Invalid(format!("record {}: no tokens", self.id)));
        }
        let mut prev_end = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.end_ms <= t.start_ms {
                return Err(Error::Invalid(format!(
                    "record {}: token {i} has non-positive duration",
                    self.id
                )));
            }
            if t.start_ms < prev_end {
                return Err(Error::Invalid(format!(
                    "record {}: token {i} overlaps its predecessor",
                    self.id
                )));
            }
            prev_end = t.end_ms;
        }
        if self.gt_endpoint_ms != prev_end {
            return Err(Error::Invalid(format!(
                "record {}: gt_endpoint_ms {} != last token end {}",
                self.id, self.gt_endpoint_ms, prev_end
            )));
        }
        let expected_frames = (self.total_ms() / frame_ms) as usize;
        if self.features.n_frames() != expected_frames {
            return Err(Error::Invalid(format!(
                "record {}: {} feature frames, expected {} for {} ms at {} ms stride",
                self.id,
                self.features.n_frames(),
                expected_frames,
                self.total_ms(),
                frame_ms
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<QueryRecord>,
    pub frame_ms: u32,
    pub meta: CorpusMeta,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            r.validate(self.frame_ms)?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(())
    }
}

/// A continuation option in a template slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuffixOption {
    pub text: String,
    pub probability: f64,
}

/// Base phrase plus ordered continuation slots. Slot k is only reachable when
/// slot k-1 produced a continuation, so queries form prefix chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub base: String,
    #[serde(default)]
    pub slots: Vec<Vec<SuffixOption>>,
}

/// Within-query pause model: with probability `p_pause` a log-normal pause
/// (median `median_ms`, shape `sigma`) separates adjacent tokens.
/// `boundary_p_pause`, when set, replaces `p_pause` at continuation
/// boundaries, where real speakers hesitate the most.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PauseDistribution {
    pub p_pause: f64,
    pub median_ms: f64,
    pub sigma: f64,
    pub boundary_p_pause: Option<f64>,
}

impl Default for PauseDistribution {
    fn default() -> Self {
        PauseDistribution {
            p_pause: 0.2,
            median_ms: 150.0,
            sigma: 0.5,
            boundary_p_pause: None,
        }
    }
}

/// Token duration model: `base_ms + per_char_ms * len(text)`, scaled by the
/// record's speaking-rate multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WordDuration {
    pub base_ms: f64,
    pub per_char_ms: f64,
}

impl Default for WordDuration {
    fn default() -> Self {
        WordDuration {
            base_ms: 120.0,
            per_char_ms: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub templates: Vec<Template>,
    #[serde(default)]
    pub pause: PauseDistribution,
    #[serde(default)]
    pub word_duration: WordDuration,
    #[serde(default = "default_rate_range")]
    pub speaking_rate_range: (f64, f64),
    #[serde(default = "default_leading_silence")]
    pub leading_silence_ms: (u32, u32),
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default = "default_trailing_silence")]
    pub trailing_silence_ms: u32,
    #[serde(default = "default_n_speakers")]
    pub n_speakers: usize,
    #[serde(default)]
    pub dsp: DspParams,
}

fn default_rate_range() -> (f64, f64) {
    (0.8, 1.2)
}

fn default_leading_silence() -> (u32, u32) {
    (150, 450)
}

fn default_trailing_silence() -> u32 {
    2500
}

fn default_n_speakers() -> usize {
    20
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("grammar has no templates".into()));
        }
        for (ti, t) in self.templates.iter().enumerate() {
            if t.base.split_whitespace().next().is_none() {
                return Err(Error::Config(format!("template {ti} has an empty base")));
            }
            for (si, slot) in t.slots.iter().enumerate() {
                let mut total = 0.0;
                for opt in slot {
                    if opt.text.split_whitespace().next().is_none() {
                        return Err(Error::Config(format!(
                            "template {ti} slot {si} has an empty suffix"
                        )));
                    }
                    if !(0.0..=1.0).contains(&opt.probability) {
                        return Err(Error::Config(format!(
                            "template {ti} slot {si}: probability {} outside [0,1]",
                            opt.probability
                        )));
                    }
                    total += opt.probability;
                }
                if total > 1.0 + 1e-9 {
                    return Err(Error::Config(format!(
                        "template {ti} slot {si}: probabilities sum to {total} > 1"
                    )));
                }
            }
        }
        let (lo, hi) = self.speaking_rate_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "speaking_rate_range ({lo}, {hi}) must be positive and ordered"
            )));
        }
        for p in [self.pause.p_pause]
            .into_iter()
            .chain(self.pause.boundary_p_pause)
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("pause probability {p} outside [0,1]")));
            }
        }
        if !(self.pause.median_ms > 0.0) || !(self.pause.sigma >= 0.0) {
            return Err(Error::Config("pause distribution parameters invalid".into()));
        }
        if self.leading_silence_ms.0 > self.leading_silence_ms.1 {
            return Err(Error::Config("leading_silence_ms range reversed".into()));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::Config("noise_level must be non-negative".into()));
        }
        if self.n_speakers == 0 {
            return Err(Error::Config("n_speakers must be at least 1".into()));
        }
        self.dsp.validate()
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("grammar config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Generates `n` records. Every record derives its randomness from
/// (seed, record index), so the result is identical regardless of thread
/// count or call order.
pub fn gen_corpus(config: &GrammarConfig, n: usize, seed: u64) -> Result<Corpus> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let plan_stage = derive_seed(seed, "corpus-plan");
    let feature_stage = derive_seed(seed, "corpus-features");

    let records: Result<Vec<QueryRecord>> = (0..n)
        .into_par_iter()
        .map(|i| gen_record(config, i, indexed_seed(plan_stage, i as u64), indexed_seed(feature_stage, i as u64)))
        .collect();
    let corpus = Corpus {
        records: records?,
        frame_ms: config.dsp.stride_ms,
        meta: CorpusMeta {
            seed,
            config_hash: config.hash(),
        },
    };
    corpus.validate()?;
    Ok(corpus)
}

fn gen_record(
    config: &GrammarConfig,
    index: usize,
    plan_seed: u64,
    feature_seed: u64,
) -> Result<QueryRecord> {
    use rand::Rng;
    let mut rng = rng_from(plan_seed);

    let template = &config.templates[rng.random_range(0..config.templates.len())];
    let rate = if config.speaking_rate_range.0 == config.speaking_rate_range.1 {
        config.speaking_rate_range.0
    } else {
        rng.random_range(config.speaking_rate_range.0..config.speaking_rate_range.1)
    };

    // Words plus a marker for positions where a continuation was attached.
    let mut words: Vec<String> = template
        .base
        .split_whitespace()
        .map(str::to_owned)
        .collect();
    let mut boundary_before: Vec<bool> = vec![false; words.len()];
    for slot in &template.slots {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut chosen = None;
        for opt in slot {
            acc += opt.probability;
            if u < acc {
                chosen = Some(opt);
                break;
            }
        }
        let Some(opt) = chosen else { break };
        for (j, w) in opt.text.split_whitespace().enumerate() {
            words.push(w.to_owned());
            boundary_before.push(j == 0);
        }
    }

    let (lead_lo, lead_hi) = config.leading_silence_ms;
    let mut cursor = if lead_lo == lead_hi {
        lead_lo
    } else {
        rng.random_range(lead_lo..=lead_hi)
    };
    let mut tokens = Vec::with_capacity(words.len());
    for (w, &is_boundary) in words.iter().zip(&boundary_before) {
        if !tokens.is_empty() {
            let p = if is_boundary {
                config.pause.boundary_p_pause.unwrap_or(config.pause.p_pause)
            } else {
                config.pause.p_pause
            };
            if rng.random_range(0.0..1.0) < p {
                let z: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                let pause = config.pause.median_ms * (config.pause.sigma * z).exp() * rate;
                cursor += pause.round().max(0.0) as u32;
            }
        }
        let dur_ms = (config.word_duration.base_ms
            + config.word_duration.per_char_ms * w.chars().count() as f64)
            * rate;
        let dur = (dur_ms.round() as u32).max(1);
        tokens.push(Token {
            text: w.to_lowercase(),
            start_ms: cursor,
            end_ms: cursor + dur,
        });
        cursor += dur;
    }

    let gt_endpoint_ms = cursor;
    let total_ms = gt_endpoint_ms + config.trailing_silence_ms;
    let spans: Vec<(u32, u32)> = tokens.iter().map(|t| (t.start_ms, t.end_ms)).collect();
    let features = synth_features(
        &spans,
        total_ms,
        &config.dsp,
        config.noise_level,
        feature_seed,
    )?;
    let speaker = rng.random_range(0..config.n_speakers);

    Ok(QueryRecord {
        id: format!("q{index:06}"),
        speaker_id: format!("spk{speaker:03}"),
        tokens,
        gt_endpoint_ms,
        trailing_silence_ms: config.trailing_silence_ms,
        features,
    })
}

/// Random partition with `round(ratio * n)` records in the first part.
/// Original record order is preserved within each part.
pub fn split(corpus: &Corpus, ratio: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("split ratio {ratio} outside (0,1)")));
    }
    let n = corpus.len();
    let k = (ratio * n as f64).round() as usize;

    use rand::seq::SliceRandom;
    let mut rng = rng_from(derive_seed(seed, "corpus-split"));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut in_first = vec![false; n];
    for &i in &order[..k] {
        in_first[i] = true;
    }

    let pick = |want: bool| Corpus {
        records: corpus
            .records
            .iter()
            .zip(&in_first)
            .filter(|(_, &f)| f == want)
            .map(|(r, _)| r.clone())
            .collect(),
        frame_ms: corpus.frame_ms,
        meta: corpus.meta.clone(),
    };
    Ok((pick(true), pick(false)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureStorage {
    /// Features embedded in each JSON line.
    Inline,
    /// Features in a companion `.features.bin` file of little-endian f32s,
    /// row-major, referenced by byte offset.
    Sidecar,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    frame_ms: u32,
    window_ms: u32,
    seed: u64,
    config_hash: String,
    n_records: usize,
    features: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureRef {
    byte_offset: u64,
    n_frames: usize,
    n_dims: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordWire {
    id: String,
    speaker_id: String,
    tokens: Vec<Token>,
    gt_endpoint_ms: u32,
    trailing_silence_ms: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    features: Option<FeatureSequence>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    features_ref: Option<FeatureRef>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    path.with_file_name(format!("{stem}.features.bin"))
}

/// Writes the corpus as JSON lines: a header line, then one record per line.
pub fn save_corpus(corpus: &Corpus, path: &Path, storage: FeatureStorage) -> Result<()> {
    let window_ms = corpus
        .records
        .first()
        .map(|r| r.features.window_ms())
        .unwrap_or(25);
    let header = Header {
        schema_version: SCHEMA_VERSION,
        frame_ms: corpus.frame_ms,
        window_ms,
        seed: corpus.meta.seed,
        config_hash: corpus.meta.config_hash.clone(),
        n_records: corpus.len(),
        features: match storage {
            FeatureStorage::Inline => "inline".into(),
            FeatureStorage::Sidecar => "sidecar".into(),
        },
    };

    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.push(b'\n');

    let mut sidecar: Vec<u8> = Vec::new();
    for r in &corpus.records {
        let wire = match storage {
            FeatureStorage::Inline => RecordWire {
                id: r.id.clone(),
                speaker_id: r.speaker_id.clone(),
                tokens: r.tokens.clone(),
                gt_endpoint_ms: r.gt_endpoint_ms,
                trailing_silence_ms: r.trailing_silence_ms,
                features: Some(r.features.clone()),
                features_ref: None,
            },
            FeatureStorage::Sidecar => {
                let byte_offset = sidecar.len() as u64;
                for &v in r.features.as_flat() {
                    sidecar.extend_from_slice(&v.to_le_bytes());
                }
                RecordWire {
                    id: r.id.clone(),
                    speaker_id: r.speaker_id.clone(),
                    tokens: r.tokens.clone(),
                    gt_endpoint_ms: r.gt_endpoint_ms,
                    trailing_silence_ms: r.trailing_silence_ms,
                    features: None,
                    features_ref: Some(FeatureRef {
                        byte_offset,
                        n_frames: r.features.n_frames(),
                        n_dims: r.features.n_dims(),
                    }),
                }
            }
        };
        serde_json::to_writer(&mut out, &wire).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push(b'\n');
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    if storage == FeatureStorage::Sidecar {
        let bin = sidecar_path(path);
        std::fs::write(&bin, &sidecar).map_err(|e| Error::io(&bin, e))?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();

    let header_line = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty corpus file".into(),
            })
        }
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "schema version {} unsupported (expected {SCHEMA_VERSION})",
                header.schema_version
            ),
        });
    }

    let sidecar = if header.features == "sidecar" {
        let bin = sidecar_path(path);
        let mut bytes = Vec::new();
        std::fs::File::open(&bin)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&bin, e))?;
        Some(bytes)
    } else {
        None
    };

    let mut records = Vec::with_capacity(header.n_records);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: RecordWire = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let features = match (wire.features, &wire.features_ref, &sidecar) {
            (Some(f), _, _) => f,
            (None, Some(r), Some(bytes)) => read_sidecar_features(
                bytes,
                r,
                header.frame_ms,
                header.window_ms,
            )
            .map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?,
            (None, Some(_), None) => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "record references a sidecar but header says inline".into(),
                })
            }
            (None, None, _) => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "record has neither features nor features_ref".into(),
                })
            }
        };
        records.push(QueryRecord {
            id: wire.id,
            speaker_id: wire.speaker_id,
            tokens: wire.tokens,
            gt_endpoint_ms: wire.gt_endpoint_ms,
            trailing_silence_ms: wire.trailing_silence_ms,
            features,
        });
    }

    let corpus = Corpus {
        records,
        frame_ms: header.frame_ms,
        meta: CorpusMeta {
            seed: header.seed,
            config_hash: header.config_hash,
        },
    };
    if corpus.len() != header.n_records {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "header promises {} records, file has {}",
                header.n_records,
                corpus.len()
            ),
        });
    }
    corpus.validate()?;
    Ok(corpus)
}

fn read_sidecar_features(
    bytes: &[u8],
    r: &FeatureRef,
    frame_ms: u32,
    window_ms: u32,
) -> Result<FeatureSequence> {
    let start = r.byte_offset as usize;
    let len = r.n_frames * r.n_dims * 4;
    let end = start
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::Invalid(format!(
                "feature reference [{start}, {start}+{len}) overruns sidecar of {} bytes",
                bytes.len()
            ))
        })?;
    let data: Vec<f32> = bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureSequence::from_flat(data, r.n_dims, frame_ms, window_ms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> GrammarConfig {
        GrammarConfig {
            templates: vec![Template {
                base: "stop".into(),
                slots: vec![],
            }],
            pause: PauseDistribution::default(),
            word_duration: WordDuration::default(),
            speaking_rate_range: (0.8, 1.2),
            leading_silence_ms: (150, 450),
            noise_level: 0.1,
            trailing_silence_ms: 800,
            n_speakers: 4,
            dsp: DspParams::default(),
        }
    }

    fn weather_config() -> GrammarConfig {
        GrammarConfig {
            templates: vec![Template {
                base: "what is the weather".into(),
                slots: vec![vec![SuffixOption {
                    text: "in seattle".into(),
                    probability: 0.5,
                }]],
            }],
            trailing_silence_ms: 600,
            ..tiny_config()
        }
    }

    #[test]
    fn single_token_template_yields_one_token_record() {
        let corpus = gen_corpus(&tiny_config(), 1, 7).unwrap();
        assert_eq!(corpus.len(), 1);
        let r = &corpus.records[0];
        assert_eq!(r.tokens.len(), 1);
        assert_eq!(r.tokens[0].text, "stop");
        assert_eq!(r.gt_endpoint_ms, r.tokens[0].end_ms);
    }

    #[test]
    fn generation_is_deterministic() {
        let config = weather_config();
        let a = gen_corpus(&config, 40, 3).unwrap();
        let b = gen_corpus(&config, 40, 3).unwrap();
        assert_eq!(a, b);
        let c = gen_corpus(&config, 40, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn suffix_fraction_tracks_its_probability() {
        let corpus = gen_corpus(&weather_config(), 1000, 1).unwrap();
        let with_suffix = corpus
            .records
            .iter()
            .filter(|r| r.tokens.iter().any(|t| t.text == "seattle"))
            .count();
        let fraction = with_suffix as f64 / 1000.0;
        assert!(
            (fraction - 0.5).abs() <= 0.05,
            "suffix fraction {fraction} strays from 0.5"
        );
    }

    #[test]
    fn generated_records_satisfy_alignment_invariants() {
        let corpus = gen_corpus(&weather_config(), 200, 11).unwrap();
        for r in &corpus.records {
            let max_end = r.tokens.iter().map(|t| t.end_ms).max().unwrap();
            assert_eq!(r.gt_endpoint_ms, max_end);
            for pair in r.tokens.windows(2) {
                assert!(pair[1].start_ms >= pair[0].end_ms);
            }
            assert_eq!(
                r.features.n_frames(),
                (r.total_ms() / corpus.frame_ms) as usize
            );
        }
    }

    #[test]
    fn split_produces_95_5_parts() {
        let corpus = gen_corpus(&tiny_config(), 100, 2).unwrap();
        let (dev, test) = split(&corpus, 0.95, 3).unwrap();
        assert_eq!(dev.len(), 95);
        assert_eq!(test.len(), 5);
    }

    #[test]
    fn split_of_single_record_rounds_up() {
        let corpus = gen_corpus(&tiny_config(), 1, 5).unwrap();
        let (dev, test) = split(&corpus, 0.95, 0).unwrap();
        assert_eq!(dev.len(), 1);
        assert_eq!(test.len(), 0);
    }

    #[test]
    fn split_partitions_ids_exactly() {
        let corpus = gen_corpus(&tiny_config(), 20, 8).unwrap();
        let (a, b) = split(&corpus, 0.5, 9).unwrap();
        let mut seen: Vec<&str> = a
            .records
            .iter()
            .chain(&b.records)
            .map(|r| r.id.as_str())
            .collect();
        seen.sort_unstable();
        let mut expected: Vec<&str> = corpus.records.iter().map(|r| r.id.as_str()).collect();
        expected.sort_unstable();
        assert_eq!(seen, expected);
    }

    #[test]
    fn split_rejects_bad_ratio() {
        let corpus = gen_corpus(&tiny_config(), 4, 1).unwrap();
        assert!(split(&corpus, 0.0, 0).is_err());
        assert!(split(&corpus, 1.0, 0).is_err());
    }

    #[test]
    fn inline_save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = gen_corpus(&weather_config(), 12, 21).unwrap();
        save_corpus(&corpus, &path, FeatureStorage::Inline).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn sidecar_save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = gen_corpus(&weather_config(), 12, 22).unwrap();
        save_corpus(&corpus, &path, FeatureStorage::Sidecar).unwrap();
        assert!(dir.path().join("corpus.features.bin").exists());
        let back = load_corpus(&path).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn save_is_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let config = weather_config();
        save_corpus(&gen_corpus(&config, 15, 6).unwrap(), &p1, FeatureStorage::Inline).unwrap();
        save_corpus(&gen_corpus(&config, 15, 6).unwrap(), &p2, FeatureStorage::Inline).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn missing_endpoint_field_is_named_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let corpus = gen_corpus(&tiny_config(), 2, 2).unwrap();
        save_corpus(&corpus, &path, FeatureStorage::Inline).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let mangled: Vec<String> = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if i == 2 {
                    l.replacen("\"gt_endpoint_ms\"", "\"gt_endpoint_typo\"", 1)
                } else {
                    l.to_owned()
                }
            })
            .collect();
        std::fs::write(&path, mangled.join("\n")).unwrap();

        let err = load_corpus(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gt_endpoint_ms"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn config_validation_rejects_bad_probabilities() {
        let mut config = weather_config();
        config.templates[0].slots[0][0].probability = 1.5;
        assert!(gen_corpus(&config, 1, 0).is_err());

        let mut config = weather_config();
        config.templates.clear();
        assert!(gen_corpus(&config, 1, 0).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            #[test]
            fn arbitrary_small_grammars_generate_valid_corpora(
                p_pause in 0.0f64..1.0,
                rate_lo in 0.5f64..1.0,
                rate_span in 0.0f64..0.8,
                n in 1usize..12,
                seed in 0u64..1000,
            ) {
                let config = GrammarConfig {
                    pause: PauseDistribution { p_pause, ..Default::default() },
                    speaking_rate_range: (rate_lo, rate_lo + rate_span),
                    trailing_silence_ms: 400,
                    ..super::tests_config()
                };
                let corpus = gen_corpus(&config, n, seed).unwrap();
                prop_assert!(corpus.validate().is_ok());
                prop_assert_eq!(corpus.len(), n);
            }
        }
    }

    fn tests_config() -> GrammarConfig {
        GrammarConfig {
            templates: vec![
                Template {
                    base: "turn on the lights".into(),
                    slots: vec![vec![SuffixOption {
                        text: "in the kitchen".into(),
                        probability: 0.4,
                    }]],
                },
                Template {
                    base: "stop".into(),
                    slots: vec![],
                },
            ],
            ..tiny_config()
        }
    }
}
