//! Evaluation: early-cut rate, latency percentiles, threshold sweeps, and
//! pairing of operating points across models at matched early-cut rates.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::decision::{endpoint_from_raw_scores, DecisionConfig};
use crate::error::{Error, Result};
use crate::model::{score_sequence, EndpointerParams};
use crate::stats::nearest_rank_percentile;

/// How one query ended: where the detector fired (if at all) against the
/// ground-truth endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub id: String,
    pub endpoint_ms: Option<u32>,
    pub gt_endpoint_ms: u32,
    pub trailing_silence_ms: u32,
}

impl QueryOutcome {
    /// Fired before the speaker actually finished.
    pub fn early_cut(&self) -> bool {
        matches!(self.endpoint_ms, Some(e) if e < self.gt_endpoint_ms)
    }

    /// Waiting time after the true endpoint. Early cuts have no latency;
    /// a detector that never fired is charged the full observed silence.
    pub fn latency_ms(&self) -> Option<f64> {
        match self.endpoint_ms {
            Some(e) if e < self.gt_endpoint_ms => None,
            Some(e) => Some(f64::from(e - self.gt_endpoint_ms)),
            None => Some(f64::from(self.trailing_silence_ms)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub early_cut_rate_pct: f64,
    /// Latency percentiles; absent when every query was cut early.
    pub p50_ms: Option<f64>,
    pub p75_ms: Option<f64>,
    pub p90_ms: Option<f64>,
    pub p99_ms: Option<f64>,
}

impl OperatingPoint {
    pub fn percentiles(&self) -> [Option<f64>; 4] {
        [self.p50_ms, self.p75_ms, self.p90_ms, self.p99_ms]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub points: Vec<OperatingPoint>,
}

impl TradeoffCurve {
    /// Counts adjacent threshold steps where the early-cut rate went up
    /// instead of down. Zero for well-behaved score distributions.
    pub fn early_cut_monotonicity_violations(&self) -> usize {
        self.points
            .windows(2)
            .filter(|w| w[1].early_cut_rate_pct > w[0].early_cut_rate_pct)
            .count()
    }
}

/// Aggregates outcomes at one threshold.
pub fn summarize(threshold: f64, outcomes: &[QueryOutcome]) -> Result<OperatingPoint> {
    if outcomes.is_empty() {
        return Err(Error::Empty("outcomes"));
    }
    let early = outcomes.iter().filter(|o| o.early_cut()).count();
    let early_cut_rate_pct = 100.0 * early as f64 / outcomes.len() as f64;
    let latencies: Vec<f64> = outcomes.iter().filter_map(|o| o.latency_ms()).collect();
    let p = |pct: f64| nearest_rank_percentile(&latencies, pct);
    Ok(OperatingPoint {
        threshold,
        early_cut_rate_pct,
        p50_ms: p(50.0),
        p75_ms: p(75.0),
        p90_ms: p(90.0),
        p99_ms: p(99.0),
    })
}

/// One fully scored query; thresholds are applied to this afterwards so the
/// expensive forward pass happens once per query, not once per threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredQuery {
    pub id: String,
    pub gt_endpoint_ms: u32,
    pub trailing_silence_ms: u32,
    pub frame_ms: u32,
    pub scores: Vec<f64>,
}

pub fn score_corpus(params: &EndpointerParams, corpus: &Corpus) -> Result<Vec<ScoredQuery>> {
    corpus
        .records
        .par_iter()
        .map(|r| {
            Ok(ScoredQuery {
                id: r.id.clone(),
                gt_endpoint_ms: r.gt_endpoint_ms,
                trailing_silence_ms: r.trailing_silence_ms,
                frame_ms: r.features.frame_ms(),
                scores: score_sequence(params, &r.features)?,
            })
        })
        .collect()
}

pub fn outcomes_at_threshold(
    scored: &[ScoredQuery],
    config: &DecisionConfig,
) -> Vec<QueryOutcome> {
    scored
        .iter()
        .map(|s| QueryOutcome {
            id: s.id.clone(),
            endpoint_ms: endpoint_from_raw_scores(&s.scores, config, s.frame_ms),
            gt_endpoint_ms: s.gt_endpoint_ms,
            trailing_silence_ms: s.trailing_silence_ms,
        })
        .collect()
}

pub fn sweep_scored(
    scored: &[ScoredQuery],
    thresholds: &[f64],
    smoothing_window_frames: usize,
) -> Result<TradeoffCurve> {
    if scored.is_empty() {
        return Err(Error::Empty("scored queries"));
    }
    let mut points = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let config = DecisionConfig {
            threshold,
            smoothing_window_frames,
        };
        config.validate()?;
        let outcomes = outcomes_at_threshold(scored, &config);
        points.push(summarize(threshold, &outcomes)?);
    }
    let curve = TradeoffCurve { points };
    let violations = curve.early_cut_monotonicity_violations();
    if violations > 0 {
        log::warn!("early-cut rate rose across {violations} threshold step(s)");
    }
    Ok(curve)
}

pub fn sweep(
    params: &EndpointerParams,
    testset: &Corpus,
    thresholds: &[f64],
    smoothing_window_frames: usize,
) -> Result<TradeoffCurve> {
    let scored = score_corpus(params, testset)?;
    sweep_scored(&scored, thresholds, smoothing_window_frames)
}

/// An operating point of `b` chosen for one of `a`, closest by early-cut
/// rate. Deltas are b minus a, so negative means b responds faster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedPoint {
    pub a: OperatingPoint,
    pub b: OperatingPoint,
    pub early_cut_gap_pct: f64,
    pub delta_p50_ms: Option<f64>,
    pub delta_p75_ms: Option<f64>,
    pub delta_p90_ms: Option<f64>,
    pub delta_p99_ms: Option<f64>,
}

/// Pairs every point of `curve_a` with the early-cut-rate-closest point of
/// `curve_b`; equally close candidates resolve to the lower threshold.
pub fn match_operating_points(
    curve_a: &TradeoffCurve,
    curve_b: &TradeoffCurve,
) -> Result<Vec<PairedPoint>> {
    if curve_a.points.is_empty() || curve_b.points.is_empty() {
        return Err(Error::Empty("tradeoff curve"));
    }
    let mut pairs = Vec::with_capacity(curve_a.points.len());
    for a in &curve_a.points {
        let mut best: Option<&OperatingPoint> = None;
        let mut best_gap = f64::INFINITY;
        for b in &curve_b.points {
            let gap = (b.early_cut_rate_pct - a.early_cut_rate_pct).abs();
            let better = gap < best_gap
                || (gap == best_gap && best.is_some_and(|p| b.threshold < p.threshold));
            if better {
                best = Some(b);
                best_gap = gap;
            }
        }
        let b = best.expect("curve_b checked non-empty");
        let delta = |x: Option<f64>, y: Option<f64>| match (x, y) {
            (Some(x), Some(y)) => Some(y - x),
            _ => None,
        };
        pairs.push(PairedPoint {
            a: a.clone(),
            b: b.clone(),
            early_cut_gap_pct: best_gap,
            delta_p50_ms: delta(a.p50_ms, b.p50_ms),
            delta_p75_ms: delta(a.p75_ms, b.p75_ms),
            delta_p90_ms: delta(a.p90_ms, b.p90_ms),
            delta_p99_ms: delta(a.p99_ms, b.p99_ms),
        });
    }
    Ok(pairs)
}

fn fmt_ms(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.1}"))
}

pub fn write_curve_csv(curve: &TradeoffCurve, path: &Path) -> Result<()> {
    let mut out = String::from("threshold,early_cut_rate_pct,p50_ms,p75_ms,p90_ms,p99_ms\n");
    for p in &curve.points {
        out.push_str(&format!(
            "{:.4},{:.4},{},{},{},{}\n",
            p.threshold,
            p.early_cut_rate_pct,
            fmt_ms(p.p50_ms),
            fmt_ms(p.p75_ms),
            fmt_ms(p.p90_ms),
            fmt_ms(p.p99_ms),
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn write_pairs_csv(
    pairs: &[PairedPoint],
    label_a: &str,
    label_b: &str,
    path: &Path,
) -> Result<()> {
    let mut out = String::from(
        "model_a,threshold_a,early_cut_rate_a_pct,p50_a_ms,p75_a_ms,p90_a_ms,p99_a_ms,\
         model_b,threshold_b,early_cut_rate_b_pct,p50_b_ms,p75_b_ms,p90_b_ms,p99_b_ms,\
         delta_p50_ms,delta_p75_ms,delta_p90_ms,delta_p99_ms\n",
    );
    for p in pairs {
        out.push_str(&format!(
            "{},{:.4},{:.4},{},{},{},{},{},{:.4},{:.4},{},{},{},{},{},{},{},{}\n",
            label_a,
            p.a.threshold,
            p.a.early_cut_rate_pct,
            fmt_ms(p.a.p50_ms),
            fmt_ms(p.a.p75_ms),
            fmt_ms(p.a.p90_ms),
            fmt_ms(p.a.p99_ms),
            label_b,
            p.b.threshold,
            p.b.early_cut_rate_pct,
            fmt_ms(p.b.p50_ms),
            fmt_ms(p.b.p75_ms),
            fmt_ms(p.b.p90_ms),
            fmt_ms(p.b.p99_ms),
            fmt_ms(p.delta_p50_ms),
            fmt_ms(p.delta_p75_ms),
            fmt_ms(p.delta_p90_ms),
            fmt_ms(p.delta_p99_ms),
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Per-query dump of where the detector fired relative to ground truth.
pub fn write_outcomes_csv(outcomes: &[QueryOutcome], path: &Path) -> Result<()> {
    let mut out = String::from(
        "id,endpoint_ms,gt_endpoint_ms,trailing_silence_ms,early_cut,latency_ms\n",
    );
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            o.id,
            o.endpoint_ms.map_or(String::new(), |e| e.to_string()),
            o.gt_endpoint_ms,
            o.trailing_silence_ms,
            o.early_cut(),
            fmt_ms(o.latency_ms()),
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Emits (early-cut rate, median latency) pairs for plotting.
pub fn write_plot_data(curve: &TradeoffCurve, path: &Path) -> Result<()> {
    let mut out = String::from("early_cut_rate_pct,p50_ms\n");
    for p in &curve.points {
        out.push_str(&format!(
            "{:.4},{}\n",
            p.early_cut_rate_pct,
            fmt_ms(p.p50_ms)
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from;
    use rand::Rng;

    fn outcome(id: &str, endpoint: Option<u32>, gt: u32, trailing: u32) -> QueryOutcome {
        QueryOutcome {
            id: id.into(),
            endpoint_ms: endpoint,
            gt_endpoint_ms: gt,
            trailing_silence_ms: trailing,
        }
    }

    #[test]
    fn early_cut_and_latency_basics() {
        let cut = outcome("a", Some(400), 500, 2000);
        assert!(cut.early_cut());
        assert_eq!(cut.latency_ms(), None);

        let on_time = outcome("b", Some(500), 500, 2000);
        assert!(!on_time.early_cut());
        assert_eq!(on_time.latency_ms(), Some(0.0));

        let late = outcome("c", Some(740), 500, 2000);
        assert_eq!(late.latency_ms(), Some(240.0));

        let missed = outcome("d", None, 500, 2000);
        assert!(!missed.early_cut());
        assert_eq!(missed.latency_ms(), Some(2000.0));
    }

    #[test]
    fn early_cut_rate_is_a_percentage() {
        let mut outcomes = Vec::new();
        for i in 0..20 {
            let endpoint = if i < 3 { Some(100) } else { Some(900) };
            outcomes.push(outcome(&format!("q{i}"), endpoint, 500, 2000));
        }
        let point = summarize(0.5, &outcomes).unwrap();
        assert_eq!(point.early_cut_rate_pct, 15.0);
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let outcomes: Vec<QueryOutcome> = [100u32, 200, 300, 400]
            .iter()
            .map(|&l| outcome(&format!("q{l}"), Some(500 + l), 500, 2000))
            .collect();
        let point = summarize(0.5, &outcomes).unwrap();
        assert_eq!(point.p50_ms, Some(200.0));
        assert_eq!(point.p75_ms, Some(300.0));
        assert_eq!(point.p90_ms, Some(400.0));
        assert_eq!(point.p99_ms, Some(400.0));
    }

    #[test]
    fn all_early_cut_population_has_no_latencies() {
        let outcomes: Vec<QueryOutcome> = (0..5)
            .map(|i| outcome(&format!("q{i}"), Some(100), 500, 2000))
            .collect();
        let point = summarize(0.9, &outcomes).unwrap();
        assert_eq!(point.early_cut_rate_pct, 100.0);
        assert_eq!(point.percentiles(), [None; 4]);
    }

    #[test]
    fn empty_outcomes_are_rejected() {
        assert!(summarize(0.5, &[]).is_err());
    }

    fn random_outcomes(rng: &mut impl Rng, n: usize) -> Vec<QueryOutcome> {
        (0..n)
            .map(|i| {
                let gt = rng.random_range(200..2000u32);
                let trailing = rng.random_range(500..3000u32);
                let endpoint = match rng.random_range(0..10u32) {
                    0 => None,
                    1..=3 => Some(rng.random_range(0..gt)),
                    _ => Some(gt + rng.random_range(0..=trailing)),
                };
                outcome(&format!("q{i}"), endpoint, gt, trailing)
            })
            .collect()
    }

    #[test]
    fn summarize_matches_a_brute_force_oracle() {
        let mut rng = rng_from(4242);
        for round in 0..500 {
            let n = rng.random_range(1..=if round % 10 == 0 { 1000 } else { 60 });
            let outcomes = random_outcomes(&mut rng, n);
            let point = summarize(0.5, &outcomes).unwrap();

            // Oracle: explicit counting plus sort-and-index percentiles.
            let n_early = outcomes
                .iter()
                .filter(|o| o.endpoint_ms.map_or(false, |e| e < o.gt_endpoint_ms))
                .count();
            let expected_rate = 100.0 * n_early as f64 / n as f64;
            assert_eq!(point.early_cut_rate_pct, expected_rate);

            let mut lats: Vec<f64> = outcomes
                .iter()
                .filter_map(|o| match o.endpoint_ms {
                    Some(e) if e < o.gt_endpoint_ms => None,
                    Some(e) => Some(f64::from(e - o.gt_endpoint_ms)),
                    None => Some(f64::from(o.trailing_silence_ms)),
                })
                .collect();
            lats.sort_by(f64::total_cmp);
            let oracle = |pct: usize| -> Option<f64> {
                if lats.is_empty() {
                    return None;
                }
                let rank = (pct * lats.len()).div_ceil(100).clamp(1, lats.len());
                Some(lats[rank - 1])
            };
            assert_eq!(point.p50_ms, oracle(50), "n={n}");
            assert_eq!(point.p75_ms, oracle(75), "n={n}");
            assert_eq!(point.p90_ms, oracle(90), "n={n}");
            assert_eq!(point.p99_ms, oracle(99), "n={n}");

            let ps = point.percentiles();
            for w in ps.windows(2) {
                if let (Some(a), Some(b)) = (w[0], w[1]) {
                    assert!(a <= b);
                }
            }
        }
    }

    fn scored(id: &str, scores: &[f64]) -> ScoredQuery {
        ScoredQuery {
            id: id.into(),
            gt_endpoint_ms: 30,
            trailing_silence_ms: 1000,
            frame_ms: 10,
            scores: scores.to_vec(),
        }
    }

    #[test]
    fn monotone_scores_give_monotone_latency_over_thresholds() {
        let q = scored("q", &[0.1, 0.2, 0.35, 0.55, 0.75, 0.95]);
        let curve = sweep_scored(&[q], &[0.3, 0.5, 0.7], 1).unwrap();
        let lat: Vec<f64> = curve.points.iter().map(|p| p.p50_ms.unwrap()).collect();
        assert!(lat.windows(2).all(|w| w[0] <= w[1]), "{lat:?}");
        assert_eq!(curve.early_cut_monotonicity_violations(), 0);
    }

    #[test]
    fn duplicate_thresholds_give_identical_rows() {
        let q = scored("q", &[0.2, 0.4, 0.6, 0.8]);
        let curve = sweep_scored(&[q], &[0.5, 0.5], 1).unwrap();
        assert_eq!(curve.points[0], curve.points[1]);
    }

    #[test]
    fn sweep_rejects_bad_thresholds() {
        let q = scored("q", &[0.2, 0.4]);
        assert!(sweep_scored(&[q], &[1.0], 1).is_err());
    }

    fn point(threshold: f64, rate: f64, p50: f64) -> OperatingPoint {
        OperatingPoint {
            threshold,
            early_cut_rate_pct: rate,
            p50_ms: Some(p50),
            p75_ms: Some(p50 + 10.0),
            p90_ms: Some(p50 + 20.0),
            p99_ms: Some(p50 + 30.0),
        }
    }

    #[test]
    fn exact_early_cut_match_is_selected() {
        let a = TradeoffCurve {
            points: vec![point(0.5, 3.39, 460.0)],
        };
        let b = TradeoffCurve {
            points: vec![
                point(0.55, 5.0, 300.0),
                point(0.63, 3.39, 420.0),
                point(0.7, 1.0, 600.0),
            ],
        };
        let pairs = match_operating_points(&a, &b).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].b.threshold, 0.63);
        assert_eq!(pairs[0].early_cut_gap_pct, 0.0);
        assert_eq!(pairs[0].delta_p50_ms, Some(-40.0));
    }

    #[test]
    fn equidistant_candidates_resolve_to_the_lower_threshold() {
        let a = TradeoffCurve {
            points: vec![point(0.5, 4.0, 100.0)],
        };
        let b = TradeoffCurve {
            points: vec![point(0.6, 5.0, 100.0), point(0.4, 3.0, 100.0)],
        };
        let pairs = match_operating_points(&a, &b).unwrap();
        assert_eq!(pairs[0].b.threshold, 0.4);
    }

    #[test]
    fn curve_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = TradeoffCurve {
            points: vec![
                point(0.5, 3.39, 460.0),
                OperatingPoint {
                    threshold: 0.9,
                    early_cut_rate_pct: 100.0,
                    p50_ms: None,
                    p75_ms: None,
                    p90_ms: None,
                    p99_ms: None,
                },
            ],
        };
        write_curve_csv(&curve, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "threshold,early_cut_rate_pct,p50_ms,p75_ms,p90_ms,p99_ms"
        );
        assert_eq!(lines[1], "0.5000,3.3900,460.0,470.0,480.0,490.0");
        assert_eq!(lines[2], "0.9000,100.0000,,,,");
    }

    #[test]
    fn outcomes_csv_handles_missed_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("outcomes.csv");
        let outcomes = vec![
            outcome("q0", Some(700), 500, 2000),
            outcome("q1", None, 500, 2000),
            outcome("q2", Some(100), 500, 2000),
        ];
        write_outcomes_csv(&outcomes, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "q0,700,500,2000,false,200.0");
        assert_eq!(lines[2], "q1,,500,2000,false,2000.0");
        assert_eq!(lines[3], "q2,100,500,2000,true,");
    }

    #[test]
    fn pairs_csv_carries_labels_and_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        let a = TradeoffCurve {
            points: vec![point(0.5, 3.0, 400.0)],
        };
        let b = TradeoffCurve {
            points: vec![point(0.6, 3.2, 350.0)],
        };
        let pairs = match_operating_points(&a, &b).unwrap();
        write_pairs_csv(&pairs, "classification", "regression", &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("model_a,threshold_a"));
        assert!(lines[1].starts_with("classification,0.5000,3.0000,400.0"));
        assert!(lines[1].contains(",regression,0.6000,"));
        assert!(lines[1].ends_with("-50.0,-50.0,-50.0,-50.0"));
    }
}
