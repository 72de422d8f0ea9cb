//! Regression-based speech endpointing toolkit.
//!
//! End-of-query detection for voice interfaces: decide, frame by frame, when
//! the user has finished speaking. The toolkit covers the whole loop at desk
//! scale:
//!
//! - [`corpus`]: synthetic aligned speech-query corpora with shared prefixes,
//!   within-query pauses and speaking-rate variation.
//! - [`dsp`]: 40-dim log-mel filterbank features from 16 kHz PCM, or
//!   synthesized directly at the frame level.
//! - [`pausemodel`]: per-prefix pause statistics (expected pause after a
//!   query, speaking-rate scaling).
//! - [`targets`]: per-frame training targets, hard binary labels or soft
//!   ramps whose slope encodes endpointing aggressiveness.
//! - [`model`]: uni-directional LSTM endpointer with classification and
//!   regression heads, trained by full BPTT with Adam.
//! - [`decision`]: streaming threshold decision with score smoothing.
//! - [`metrics`]: early-cut rate, latency percentiles, threshold sweeps and
//!   operating-point matching between models.
//! - [`pipeline`]: experiment orchestration used by the CLI.

pub mod corpus;
pub mod decision;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pausemodel;
pub mod pipeline;
pub mod seeds;
pub mod stats;
pub mod targets;

pub use error::{Error, Result};
