//! Per-frame training targets.
//!
//! Classification uses a hard 0/1 step at the ground-truth endpoint.
//! Regression softens the step into a linear ramp whose width controls how
//! eager the trained endpointer is: wide ramps teach it to wait, a zero-width
//! ramp reproduces the classification targets exactly.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::QueryRecord;
use crate::error::{Error, Result};

/// One target value per feature frame, in [0, 1], never decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargetSequence {
    values: Vec<f64>,
    frame_ms: u32,
}

impl FrameTargetSequence {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame_ms(&self) -> u32 {
        self.frame_ms
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// How the ramp width is chosen per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlopePolicy {
    /// Same ramp width for every query.
    Fixed { slope_ms: f64 },
    /// Width proportional to the query's expected pause, clamped.
    PauseAdaptive {
        scale: f64,
        min_ms: f64,
        max_ms: f64,
    },
    /// Width from the longest pause observed inside the query itself,
    /// interpolated between two anchor points.
    MaxPauseHandcrafted { anchors: AnchorTable },
}

/// Two-point slope table: queries with no internal pause get
/// `slope_at_zero_ms`; pauses at or beyond `pause_ceiling_ms` get
/// `slope_at_ceiling_ms`; in between is linear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorTable {
    pub slope_at_zero_ms: f64,
    pub pause_ceiling_ms: f64,
    pub slope_at_ceiling_ms: f64,
}

impl Default for AnchorTable {
    fn default() -> Self {
        AnchorTable {
            slope_at_zero_ms: 10.0,
            pause_ceiling_ms: 90.0,
            slope_at_ceiling_ms: 1000.0,
        }
    }
}

impl SlopePolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            SlopePolicy::Fixed { slope_ms } => {
                if !(*slope_ms >= 0.0) {
                    return Err(Error::Config(format!("fixed slope {slope_ms} < 0")));
                }
            }
            SlopePolicy::PauseAdaptive { scale, min_ms, max_ms } => {
                if !(*scale >= 0.0) || !(*min_ms >= 0.0) || min_ms > max_ms {
                    return Err(Error::Config(format!(
                        "pause-adaptive policy (scale {scale}, clamp [{min_ms}, {max_ms}]) invalid"
                    )));
                }
            }
            SlopePolicy::MaxPauseHandcrafted { anchors } => {
                if !(anchors.slope_at_zero_ms >= 0.0)
                    || !(anchors.pause_ceiling_ms > 0.0)
                    || !(anchors.slope_at_ceiling_ms >= 0.0)
                {
                    return Err(Error::Config("anchor table invalid".into()));
                }
            }
        }
        Ok(())
    }

    /// Resolves the ramp width for one query. `expected_pause_ms` is only
    /// consulted by the pause-adaptive policy and must be supplied for it.
    pub fn slope_ms(&self, query: &QueryRecord, expected_pause_ms: Option<f64>) -> Result<f64> {
        match self {
            SlopePolicy::Fixed { slope_ms } => Ok(*slope_ms),
            SlopePolicy::PauseAdaptive { scale, min_ms, max_ms } => {
                let t_s = expected_pause_ms.ok_or_else(|| {
                    Error::Invalid("pause-adaptive policy needs an expected pause".into())
                })?;
                Ok(slope_from_pause(t_s, *scale, *min_ms, *max_ms))
            }
            SlopePolicy::MaxPauseHandcrafted { anchors } => {
                Ok(slope_from_max_pause(query, anchors))
            }
        }
    }
}

/// Soft ramp targets: 0 while speech may continue, rising linearly to 1 over
/// `slope_ms` past the ground-truth endpoint. Frame i is evaluated at its
/// center, `i * frame_ms`.
pub fn regression_targets(query: &QueryRecord, slope_ms: f64) -> FrameTargetSequence {
    let frame_ms = query.features.frame_ms();
    let n = query.features.n_frames();
    let gt = query.gt_endpoint_ms as f64;
    let values = (0..n)
        .map(|i| {
            let center = (i as u32 * frame_ms) as f64;
            if slope_ms == 0.0 {
                if center >= gt {
                    1.0
                } else {
                    0.0
                }
            } else {
                ((center - gt) / slope_ms).clamp(0.0, 1.0)
            }
        })
        .collect();
    FrameTargetSequence { values, frame_ms }
}

/// Hard targets: 0 before the ground-truth endpoint, 1 at and after.
pub fn classification_targets(query: &QueryRecord) -> FrameTargetSequence {
    regression_targets(query, 0.0)
}

/// Ramp width proportional to the expected pause, clamped to a usable range.
pub fn slope_from_pause(expected_pause_ms: f64, scale: f64, min_ms: f64, max_ms: f64) -> f64 {
    (scale * expected_pause_ms).clamp(min_ms, max_ms)
}

/// Ramp width from the longest pause inside the query, linearly interpolated
/// between the anchor points.
pub fn slope_from_max_pause(query: &QueryRecord, anchors: &AnchorTable) -> f64 {
    let max_pause = query
        .tokens
        .windows(2)
        .map(|pair| (pair[1].start_ms - pair[0].end_ms) as f64)
        .fold(0.0, f64::max);
    if max_pause <= 0.0 {
        anchors.slope_at_zero_ms
    } else if max_pause > anchors.pause_ceiling_ms {
        anchors.slope_at_ceiling_ms
    } else {
        anchors.slope_at_zero_ms
            + (anchors.slope_at_ceiling_ms - anchors.slope_at_zero_ms) * max_pause
                / anchors.pause_ceiling_ms
    }
}

/// Debug dump: one row per frame.
pub fn write_targets_csv(seq: &FrameTargetSequence, path: &Path) -> Result<()> {
    let mut out = String::from("frame_index,time_ms,target\n");
    for (i, v) in seq.values().iter().enumerate() {
        let t = i as u32 * seq.frame_ms();
        out.push_str(&format!("{i},{t},{v}\n"));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Token;
    use crate::dsp::{synth_features, DspParams};

    fn query(words: &[(&str, u32, u32)], trailing_ms: u32) -> QueryRecord {
        let tokens: Vec<Token> = words
            .iter()
            .map(|&(text, start_ms, end_ms)| Token {
                text: text.into(),
                start_ms,
                end_ms,
            })
            .collect();
        let gt = tokens.last().unwrap().end_ms;
        let spans: Vec<(u32, u32)> = tokens.iter().map(|t| (t.start_ms, t.end_ms)).collect();
        let features =
            synth_features(&spans, gt + trailing_ms, &DspParams::default(), 0.0, 3).unwrap();
        QueryRecord {
            id: "q".into(),
            speaker_id: "s".into(),
            tokens,
            gt_endpoint_ms: gt,
            trailing_silence_ms: trailing_ms,
            features,
        }
    }

    #[test]
    fn ramp_hits_half_and_one_at_the_expected_frames() {
        // Endpoint at frame 100, 300 ms ramp.
        let q = query(&[("go", 200, 1000)], 400);
        let targets = regression_targets(&q, 300.0);
        assert_eq!(targets.len(), q.features.n_frames());
        assert_eq!(targets.values()[100], 0.0);
        assert!((targets.values()[115] - 0.5).abs() < 1e-12);
        assert_eq!(targets.values()[130], 1.0);
        assert_eq!(targets.values()[139], 1.0);
        assert_eq!(targets.values()[99], 0.0);
    }

    #[test]
    fn zero_slope_equals_classification_targets() {
        let q = query(&[("hello", 150, 800), ("there", 900, 1400)], 600);
        let reg = regression_targets(&q, 0.0);
        let cls = classification_targets(&q);
        assert_eq!(reg, cls);
        for &v in cls.values() {
            assert!(v == 0.0 || v == 1.0);
        }
    }

    #[test]
    fn classification_step_lands_on_the_endpoint_frame() {
        let q = query(&[("go", 100, 500)], 300);
        let cls = classification_targets(&q);
        assert_eq!(cls.values()[49], 0.0);
        assert_eq!(cls.values()[50], 1.0);
    }

    #[test]
    fn endpoint_on_the_final_frame_labels_exactly_one_frame() {
        // gt = 500 ms, no trailing: frames 0..=49 with centers 0..490... the
        // endpoint frame center must equal gt, so use trailing of one frame.
        let q = query(&[("go", 100, 500)], 10);
        let cls = classification_targets(&q);
        assert_eq!(cls.len(), 51);
        let ones = cls.values().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 1);
        assert_eq!(cls.values()[50], 1.0);
    }

    #[test]
    fn ramp_longer_than_trailing_silence_stays_below_one() {
        let q = query(&[("go", 100, 500)], 300);
        let targets = regression_targets(&q, 2000.0);
        let last = *targets.values().last().unwrap();
        assert!(last > 0.0 && last < 1.0, "last {last}");
        for pair in targets.values().windows(2) {
            assert!(pair[1] >= pair[0]);
        }
    }

    #[test]
    fn wider_ramps_are_everywhere_no_greater() {
        let q = query(&[("hello", 150, 800)], 1200);
        let narrow = regression_targets(&q, 200.0);
        let wide = regression_targets(&q, 700.0);
        for (a, b) in narrow.values().iter().zip(wide.values()) {
            assert!(a >= b, "narrow {a} < wide {b}");
        }
    }

    #[test]
    fn slope_from_pause_clamps_both_ends() {
        assert_eq!(slope_from_pause(600.0, 1.0, 10.0, 1000.0), 600.0);
        assert_eq!(slope_from_pause(0.0, 1.0, 10.0, 1000.0), 10.0);
        assert_eq!(slope_from_pause(1e6, 1.0, 10.0, 1000.0), 1000.0);
    }

    #[test]
    fn max_pause_slope_follows_the_anchor_table() {
        let anchors = AnchorTable::default();
        let smooth = query(&[("go", 100, 500)], 300);
        assert_eq!(slope_from_max_pause(&smooth, &anchors), 10.0);

        let long_pause = query(&[("go", 100, 500), ("on", 700, 900)], 300);
        assert_eq!(slope_from_max_pause(&long_pause, &anchors), 1000.0);

        let mid_pause = query(&[("go", 100, 500), ("on", 545, 700)], 300);
        assert_eq!(slope_from_max_pause(&mid_pause, &anchors), 505.0);
    }

    #[test]
    fn policy_dispatch_resolves_each_kind() {
        let q = query(&[("go", 100, 500)], 300);
        let fixed = SlopePolicy::Fixed { slope_ms: 250.0 };
        assert_eq!(fixed.slope_ms(&q, None).unwrap(), 250.0);

        let adaptive = SlopePolicy::PauseAdaptive {
            scale: 1.0,
            min_ms: 10.0,
            max_ms: 1000.0,
        };
        assert_eq!(adaptive.slope_ms(&q, Some(600.0)).unwrap(), 600.0);
        assert!(adaptive.slope_ms(&q, None).is_err());

        let handcrafted = SlopePolicy::MaxPauseHandcrafted {
            anchors: AnchorTable::default(),
        };
        assert_eq!(handcrafted.slope_ms(&q, None).unwrap(), 10.0);
    }

    #[test]
    fn csv_dump_lists_every_frame() {
        let q = query(&[("go", 100, 300)], 200);
        let targets = regression_targets(&q, 100.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("targets.csv");
        write_targets_csv(&targets, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "frame_index,time_ms,target");
        assert_eq!(lines.len(), 1 + targets.len());
        assert!(lines[1].starts_with("0,0,"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn targets_are_monotone_bounded_and_full_length(
                dur in 100u32..2000,
                trailing in 0u32..1500,
                slope in 0.0f64..2000.0,
            ) {
                let q = super::query(&[("word", 100, 100 + dur)], trailing);
                let t = regression_targets(&q, slope);
                prop_assert_eq!(t.len(), q.features.n_frames());
                for pair in t.values().windows(2) {
                    prop_assert!(pair[1] >= pair[0]);
                }
                for &v in t.values() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}
