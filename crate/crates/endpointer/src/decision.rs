//! Streaming endpoint decisions: frames go through the net one at a time,
//! raw scores are smoothed with a short sliding mean, and the endpoint fires
//! at the first frame whose smoothed score reaches the threshold.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::QueryRecord;
use crate::error::{Error, Result};
use crate::model::{step_score, EndpointerParams, LstmState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    /// Firing threshold on the smoothed score, strictly inside (0, 1).
    pub threshold: f64,
    /// Sliding-mean window in frames. 1 leaves scores untouched.
    #[serde(default = "default_window")]
    pub smoothing_window_frames: usize,
}

fn default_window() -> usize {
    1
}

impl DecisionConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        let config = DecisionConfig {
            threshold,
            smoothing_window_frames: 1,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must be strictly between 0 and 1, got {}",
                self.threshold
            )));
        }
        if self.smoothing_window_frames == 0 {
            return Err(Error::Config(
                "smoothing_window_frames must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-stream state: the recurrent net state plus the smoothing buffer.
/// Once fired, a stream stays fired.
#[derive(Debug, Clone)]
pub struct StreamState {
    lstm: LstmState,
    buffer: VecDeque<f64>,
    frames_seen: usize,
    fired: bool,
}

impl StreamState {
    pub fn new(params: &EndpointerParams) -> Self {
        StreamState {
            lstm: LstmState::new(params),
            buffer: VecDeque::new(),
            frames_seen: 0,
            fired: false,
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn has_fired(&self) -> bool {
        self.fired
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub raw_score: f64,
    pub smoothed_score: f64,
    /// True exactly at the first frame whose smoothed score reaches the
    /// threshold; later frames report false even above threshold.
    pub fired: bool,
}

/// Feeds one frame. Early frames are smoothed over however many scores
/// exist so far rather than waiting for a full window.
pub fn step(
    state: &mut StreamState,
    frame: &[f32],
    params: &EndpointerParams,
    config: &DecisionConfig,
) -> Result<StepOutput> {
    config.validate()?;
    let raw = step_score(params, &mut state.lstm, frame)?;
    state.frames_seen += 1;
    state.buffer.push_back(raw);
    while state.buffer.len() > config.smoothing_window_frames {
        state.buffer.pop_front();
    }
    let smoothed = state.buffer.iter().sum::<f64>() / state.buffer.len() as f64;
    let fired = !state.fired && smoothed >= config.threshold;
    if fired {
        state.fired = true;
    }
    Ok(StepOutput {
        raw_score: raw,
        smoothed_score: smoothed,
        fired,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointResult {
    /// End of the firing frame, (index + 1) x frame_ms; absent when no
    /// frame crossed the threshold.
    pub endpoint_ms: Option<u32>,
    /// Raw (unsmoothed) per-frame scores for the whole query.
    pub scores: Vec<f64>,
}

/// Runs a whole query through the streaming path. All frames are scored
/// even after firing so the trace covers the full audio.
pub fn run_stream(
    query: &QueryRecord,
    params: &EndpointerParams,
    config: &DecisionConfig,
) -> Result<EndpointResult> {
    config.validate()?;
    let frame_ms = query.features.frame_ms();
    let mut state = StreamState::new(params);
    let mut scores = Vec::with_capacity(query.features.n_frames());
    let mut endpoint_ms = None;
    for (i, frame) in query.features.frames().enumerate() {
        let out = step(&mut state, frame, params, config)?;
        scores.push(out.raw_score);
        if out.fired {
            endpoint_ms = Some((i as u32 + 1) * frame_ms);
        }
    }
    Ok(EndpointResult {
        endpoint_ms,
        scores,
    })
}

/// Offline counterpart of the streaming smoother.
pub fn smooth_scores(raw: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "smoothing window must be at least 1");
    let mut out = Vec::with_capacity(raw.len());
    for i in 0..raw.len() {
        let n = (i + 1).min(window);
        let sum: f64 = raw[i + 1 - n..=i].iter().sum();
        out.push(sum / n as f64);
    }
    out
}

pub fn first_crossing(smoothed: &[f64], threshold: f64) -> Option<usize> {
    smoothed.iter().position(|&s| s >= threshold)
}

/// Endpoint for a precomputed raw-score sequence; the cheap path when many
/// thresholds are evaluated against one scoring pass.
pub fn endpoint_from_raw_scores(
    raw: &[f64],
    config: &DecisionConfig,
    frame_ms: u32,
) -> Option<u32> {
    let smoothed = smooth_scores(raw, config.smoothing_window_frames);
    first_crossing(&smoothed, config.threshold).map(|i| (i as u32 + 1) * frame_ms)
}

/// Dumps a per-frame decision trace. `time_ms` is the end of each frame,
/// the moment the decision for it is made; `fired` marks the firing frame.
pub fn write_trace_csv(
    raw: &[f64],
    config: &DecisionConfig,
    frame_ms: u32,
    path: &Path,
) -> Result<()> {
    config.validate()?;
    let smoothed = smooth_scores(raw, config.smoothing_window_frames);
    let fired_at = first_crossing(&smoothed, config.threshold);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("frame_index,time_ms,raw_score,smoothed_score,fired\n");
    for i in 0..raw.len() {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            i,
            (i as u32 + 1) * frame_ms,
            raw[i],
            smoothed[i],
            fired_at == Some(i)
        ));
    }
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
