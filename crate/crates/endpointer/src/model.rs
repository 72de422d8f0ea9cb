//! The trainable endpointer: a stack of uni-directional LSTM layers with
//! either a regression head (one sigmoid neuron trained with MSE) or a
//! classification head (two neurons, log-softmax, cross-entropy). Forward,
//! backward, and the optimizer are written out by hand; gradients are exact
//! full-sequence backpropagation through time.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureSequence;
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, indexed_seed, rng_from};

pub const DEFAULT_LAYERS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_INPUT_DIM: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Classification,
    Regression,
}

impl Head {
    fn n_outputs(self) -> usize {
        match self {
            Head::Classification => 2,
            Head::Regression => 1,
        }
    }
}

/// Weights for one LSTM layer. Gate rows are stacked input, forget, cell,
/// output: `w` is [4h x d] row-major, `u` is [4h x h], `b` is [4h].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointerParams {
    pub layers: Vec<LayerParams>,
    /// Head weights, [n_outputs x h] row-major.
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub hidden: usize,
    pub input_dim: usize,
    pub head: Head,
}

impl EndpointerParams {
    /// Uniform init in +-1/sqrt(h); forget-gate biases start at 1.0 so early
    /// training does not immediately forget everything.
    pub fn init(
        n_layers: usize,
        hidden: usize,
        input_dim: usize,
        head: Head,
        seed: u64,
    ) -> Self {
        use rand::Rng;
        let mut rng = rng_from(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };

        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let d = if l == 0 { input_dim } else { hidden };
            let w = uniform(4 * hidden * d);
            let u = uniform(4 * hidden * hidden);
            let mut b = uniform(4 * hidden);
            for f in b[hidden..2 * hidden].iter_mut() {
                *f = 1.0;
            }
            layers.push(LayerParams { w, u, b });
        }
        let head_w = uniform(head.n_outputs() * hidden);
        let head_b = vec![0.0; head.n_outputs()];
        EndpointerParams {
            layers,
            head_w,
            head_b,
            hidden,
            input_dim,
            head,
        }
    }

    pub fn zeros(n_layers: usize, hidden: usize, input_dim: usize, head: Head) -> Self {
        let mut p = EndpointerParams::init(n_layers, hidden, input_dim, head, 0);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = 0.0;
            }
        }
        p
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Every weight tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.u);
            out.push(&l.b);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.u);
            out.push(&mut l.b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn expect_shape(
        &self,
        n_layers: usize,
        hidden: usize,
        input_dim: usize,
        head: Head,
    ) -> Result<()> {
        if self.n_layers() != n_layers
            || self.hidden != hidden
            || self.input_dim != input_dim
            || self.head != head
        {
            return Err(Error::Shape {
                expected: format!("{n_layers} layers, hidden {hidden}, input {input_dim}, {head:?}"),
                got: format!(
                    "{} layers, hidden {}, input {}, {:?}",
                    self.n_layers(),
                    self.hidden,
                    self.input_dim,
                    self.head
                ),
            });
        }
        Ok(())
    }
}

/// Gradient (or moment) storage shaped exactly like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &EndpointerParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| LayerParams {
                    w: vec![0.0; l.w.len()],
                    u: vec![0.0; l.u.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
            head_w: vec![0.0; params.head_w.len()],
            head_b: vec![0.0; params.head_b.len()],
        }
    }

    /// Gradient tensors in the same order as `EndpointerParams::tensors`.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.u);
            out.push(&l.b);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.u);
            out.push(&mut l.b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers.len() {
            names.push(format!("layer {l} input weights"));
            names.push(format!("layer {l} recurrent weights"));
            names.push(format!("layer {l} bias"));
        }
        names.push("head weights".into());
        names.push("head bias".into());
        names
    }

    fn check_finite(&self) -> Result<()> {
        for (tensor, name) in self.tensors().into_iter().zip(self.tensor_names()) {
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Four-accumulator dot product. The split summation breaks the serial
/// float dependency chain, which matters in the per-frame hot loop.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in (&mut ca).zip(&mut cb) {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
        s2 += x[2] * y[2];
        s3 += x[3] * y[3];
    }
    let mut rest = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        rest += x * y;
    }
    (s0 + s1) + (s2 + s3) + rest
}

/// out = W x + b, with W row-major [rows x cols].
fn affine(out: &mut [f64], w: &[f64], x: &[f64], b: &[f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = b[r] + dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// out += W x.
fn add_matvec(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// out += W^T y, with W row-major [rows x cols], y of length rows.
fn add_matvec_t(out: &mut [f64], w: &[f64], y: &[f64]) {
    let cols = out.len();
    for (r, yv) in y.iter().enumerate() {
        if *yv == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += wv * yv;
        }
    }
}

/// dw += dy (outer) x.
fn add_outer(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, d) in dy.iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (w, xv) in row.iter_mut().zip(x) {
            *w += d * xv;
        }
    }
}

/// Per-layer recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn new(params: &EndpointerParams) -> Self {
        LstmState {
            h: vec![vec![0.0; params.hidden]; params.n_layers()],
            c: vec![vec![0.0; params.hidden]; params.n_layers()],
        }
    }
}

/// One LSTM cell step. `gates` receives the four post-activation gate
/// vectors [i|f|g|o]; `c_out`/`h_out` receive the new state.
fn cell_step(
    layer: &LayerParams,
    hidden: usize,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    c_out: &mut [f64],
    h_out: &mut [f64],
) {
    affine(gates, &layer.w, x, &layer.b);
    add_matvec(gates, &layer.u, h_prev);
    let (ig, rest) = gates.split_at_mut(hidden);
    let (fg, rest) = rest.split_at_mut(hidden);
    let (gg, og) = rest.split_at_mut(hidden);
    for v in ig.iter_mut() {
        *v = sigmoid(*v);
    }
    for v in fg.iter_mut() {
        *v = sigmoid(*v);
    }
    for v in gg.iter_mut() {
        *v = v.tanh();
    }
    for v in og.iter_mut() {
        *v = sigmoid(*v);
    }
    for j in 0..hidden {
        c_out[j] = fg[j] * c_prev[j] + ig[j] * gg[j];
        h_out[j] = og[j] * c_out[j].tanh();
    }
}

/// Endpoint score from the top hidden state: sigmoid output for regression,
/// probability of the end-of-query class for classification.
fn head_score(params: &EndpointerParams, h_top: &[f64]) -> f64 {
    let h = params.hidden;
    match params.head {
        Head::Regression => {
            let mut z = params.head_b[0];
            for (wv, hv) in params.head_w.iter().zip(h_top) {
                z += wv * hv;
            }
            sigmoid(z)
        }
        Head::Classification => {
            let mut z0 = params.head_b[0];
            let mut z1 = params.head_b[1];
            for j in 0..h {
                z0 += params.head_w[j] * h_top[j];
                z1 += params.head_w[h + j] * h_top[j];
            }
            // Two-class softmax collapses to a sigmoid of the logit gap.
            sigmoid(z1 - z0)
        }
    }
}

/// Advances the state by one frame and returns the endpoint score.
pub fn step_score(
    params: &EndpointerParams,
    state: &mut LstmState,
    frame: &[f32],
) -> Result<f64> {
    if frame.len() != params.input_dim {
        return Err(Error::Shape {
            expected: format!("{}-dim frame", params.input_dim),
            got: format!("{}-dim", frame.len()),
        });
    }
    let hidden = params.hidden;
    let mut gates = vec![0.0; 4 * hidden];
    let mut x: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
    let mut c_new = vec![0.0; hidden];
    let mut h_new = vec![0.0; hidden];
    for (l, layer) in params.layers.iter().enumerate() {
        cell_step(
            layer,
            hidden,
            &x,
            &state.h[l],
            &state.c[l],
            &mut gates,
            &mut c_new,
            &mut h_new,
        );
        state.c[l].copy_from_slice(&c_new);
        state.h[l].copy_from_slice(&h_new);
        x.clear();
        x.extend_from_slice(&h_new);
    }
    let score = head_score(params, &state.h[params.n_layers() - 1]);
    if !score.is_finite() {
        return Err(Error::NonFinite("endpoint score".into()));
    }
    Ok(score)
}

/// Scores a whole sequence, carrying `state` across frames. Feeding chunks
/// with the same carried state gives identical results.
pub fn forward(
    params: &EndpointerParams,
    features: &FeatureSequence,
    state: &mut LstmState,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(features.n_frames());
    for frame in features.frames() {
        scores.push(step_score(params, state, frame)?);
    }
    Ok(scores)
}

pub fn score_sequence(params: &EndpointerParams, features: &FeatureSequence) -> Result<Vec<f64>> {
    forward(params, features, &mut LstmState::new(params))
}

/// Loss over flattened frames. Regression: mean squared error over unmasked
/// frames. Classification: mean negative log-likelihood of the hard label,
/// where `scores` carry the end-of-query probability.
pub fn loss(scores: &[f64], targets: &[f64], mask: &[bool], head: Head) -> Result<f64> {
    if scores.len() != targets.len() || scores.len() != mask.len() {
        return Err(Error::Shape {
            expected: format!("{} scores/targets/mask", scores.len()),
            got: format!("{} targets, {} mask", targets.len(), mask.len()),
        });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((&s, &y), &m) in scores.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        n += 1;
        total += match head {
            Head::Regression => (s - y) * (s - y),
            Head::Classification => {
                let p = if y >= 0.5 { s } else { 1.0 - s };
                -p.max(1e-300).ln()
            }
        };
    }
    if n == 0 {
        return Err(Error::Empty("unmasked frames"));
    }
    Ok(total / n as f64)
}

/// A padded mini-batch. `features` is [b x t_max x dim], `targets` and `mask`
/// are [b x t_max]; mask marks real frames.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub t_max: usize,
    pub dim: usize,
}

impl TrainingBatch {
    pub fn new(items: &[(&FeatureSequence, &[f64])]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let dim = items[0].0.n_dims();
        let t_max = items.iter().map(|(f, _)| f.n_frames()).max().unwrap();
        let batch = items.len();
        let mut features = vec![0.0; batch * t_max * dim];
        let mut targets = vec![0.0; batch * t_max];
        let mut mask = vec![false; batch * t_max];
        for (b, (feat, tgt)) in items.iter().enumerate() {
            if feat.n_dims() != dim {
                return Err(Error::Shape {
                    expected: format!("{dim}-dim features"),
                    got: format!("{}-dim in batch element {b}", feat.n_dims()),
                });
            }
            if feat.n_frames() != tgt.len() {
                return Err(Error::Shape {
                    expected: format!("{} targets", feat.n_frames()),
                    got: format!("{} in batch element {b}", tgt.len()),
                });
            }
            for (t, frame) in feat.frames().enumerate() {
                let base = (b * t_max + t) * dim;
                for (d, &v) in frame.iter().enumerate() {
                    features[base + d] = v as f64;
                }
                targets[b * t_max + t] = tgt[t];
                mask[b * t_max + t] = true;
            }
        }
        Ok(TrainingBatch {
            features,
            targets,
            mask,
            batch,
            t_max,
            dim,
        })
    }

    fn seq_len(&self, b: usize) -> usize {
        let row = &self.mask[b * self.t_max..(b + 1) * self.t_max];
        row.iter().rposition(|&m| m).map_or(0, |i| i + 1)
    }

    fn n_unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Cached activations for one sequence, indexed [layer][t * h + j].
struct SeqCache {
    gates: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
    scores: Vec<f64>,
}

fn forward_cached(
    params: &EndpointerParams,
    frames: impl Iterator<Item = Vec<f64>>,
    t_len: usize,
) -> (Vec<Vec<f64>>, SeqCache) {
    let hidden = params.hidden;
    let n_layers = params.n_layers();
    let mut gates = vec![vec![0.0; t_len * 4 * hidden]; n_layers];
    let mut cs = vec![vec![0.0; t_len * hidden]; n_layers];
    let mut hs = vec![vec![0.0; t_len * hidden]; n_layers];
    let mut scores = Vec::with_capacity(t_len);
    let mut xs = Vec::with_capacity(t_len);

    let zero = vec![0.0; hidden];
    let mut c_new = vec![0.0; hidden];
    let mut h_new = vec![0.0; hidden];
    for (t, frame) in frames.enumerate() {
        let mut x = frame;
        for l in 0..n_layers {
            let (h_prev, c_prev) = if t == 0 {
                (zero.as_slice(), zero.as_slice())
            } else {
                (
                    &hs[l][(t - 1) * hidden..t * hidden],
                    &cs[l][(t - 1) * hidden..t * hidden],
                )
            };
            let g = &mut gates[l][t * 4 * hidden..(t + 1) * 4 * hidden];
            cell_step(
                &params.layers[l],
                hidden,
                &x,
                h_prev,
                c_prev,
                g,
                &mut c_new,
                &mut h_new,
            );
            cs[l][t * hidden..(t + 1) * hidden].copy_from_slice(&c_new);
            hs[l][t * hidden..(t + 1) * hidden].copy_from_slice(&h_new);
            if l == 0 {
                xs.push(x.clone());
            }
            x.clear();
            x.extend_from_slice(&h_new);
        }
        scores.push(head_score(params, &hs[n_layers - 1][t * hidden..(t + 1) * hidden]));
    }
    (
        xs,
        SeqCache {
            gates,
            cs,
            hs,
            scores,
        },
    )
}

/// Backward pass for one sequence. `dscore[t]` is dLoss/dscore at frame t
/// (already divided by the batch-level frame count). Returns the gradient
/// contribution of this sequence.
fn backward_sequence(
    params: &EndpointerParams,
    xs: &[Vec<f64>],
    cache: &SeqCache,
    dscore: &[f64],
) -> Gradients {
    let hidden = params.hidden;
    let n_layers = params.n_layers();
    let t_len = dscore.len();
    let mut grads = Gradients::zeros_like(params);

    // dh[t] for the layer currently being processed; starts as the head's
    // contribution into the top layer and becomes each layer's input
    // gradient as we walk down the stack.
    let mut dh_seq = vec![vec![0.0; hidden]; t_len];
    for t in 0..t_len {
        if dscore[t] == 0.0 {
            continue;
        }
        let h_top = &cache.hs[n_layers - 1][t * hidden..(t + 1) * hidden];
        let s = cache.scores[t];
        match params.head {
            Head::Regression => {
                // dscore -> dz through the sigmoid.
                let dz = dscore[t] * s * (1.0 - s);
                grads.head_b[0] += dz;
                for j in 0..hidden {
                    grads.head_w[j] += dz * h_top[j];
                    dh_seq[t][j] += dz * params.head_w[j];
                }
            }
            Head::Classification => {
                // score = sigmoid(z1 - z0); d(z1-z0) = dscore * s(1-s),
                // applied with opposite signs to the two logits.
                let dgap = dscore[t] * s * (1.0 - s);
                grads.head_b[0] -= dgap;
                grads.head_b[1] += dgap;
                for j in 0..hidden {
                    grads.head_w[j] -= dgap * h_top[j];
                    grads.head_w[hidden + j] += dgap * h_top[j];
                    dh_seq[t][j] += dgap * (params.head_w[hidden + j] - params.head_w[j]);
                }
            }
        }
    }

    let zero = vec![0.0; hidden];
    let mut da = vec![0.0; 4 * hidden];
    for l in (0..n_layers).rev() {
        let layer = &params.layers[l];
        let gl = &mut grads.layers[l];
        let mut dx_seq = vec![vec![0.0; if l == 0 { params.input_dim } else { hidden }]; t_len];
        let mut dc_next = vec![0.0; hidden];
        let mut dh_rec = vec![0.0; hidden];
        for t in (0..t_len).rev() {
            let gates = &cache.gates[l][t * 4 * hidden..(t + 1) * 4 * hidden];
            let (ig, rest) = gates.split_at(hidden);
            let (fg, rest) = rest.split_at(hidden);
            let (gg, og) = rest.split_at(hidden);
            let c_t = &cache.cs[l][t * hidden..(t + 1) * hidden];
            let c_prev = if t == 0 {
                zero.as_slice()
            } else {
                &cache.cs[l][(t - 1) * hidden..t * hidden]
            };
            let h_prev = if t == 0 {
                zero.as_slice()
            } else {
                &cache.hs[l][(t - 1) * hidden..t * hidden]
            };
            let x_t: &[f64] = if l == 0 {
                &xs[t]
            } else {
                &cache.hs[l - 1][t * hidden..(t + 1) * hidden]
            };

            for j in 0..hidden {
                let dh = dh_seq[t][j] + dh_rec[j];
                let tc = c_t[j].tanh();
                let d_o = dh * tc;
                let dc = dh * og[j] * (1.0 - tc * tc) + dc_next[j];
                let d_i = dc * gg[j];
                let d_f = dc * c_prev[j];
                let d_g = dc * ig[j];
                da[j] = d_i * ig[j] * (1.0 - ig[j]);
                da[hidden + j] = d_f * fg[j] * (1.0 - fg[j]);
                da[2 * hidden + j] = d_g * (1.0 - gg[j] * gg[j]);
                da[3 * hidden + j] = d_o * og[j] * (1.0 - og[j]);
                dc_next[j] = dc * fg[j];
            }

            add_outer(&mut gl.w, &da, x_t);
            add_outer(&mut gl.u, &da, h_prev);
            for (gb, d) in gl.b.iter_mut().zip(&da) {
                *gb += d;
            }
            add_matvec_t(&mut dx_seq[t], &layer.w, &da);
            for v in dh_rec.iter_mut() {
                *v = 0.0;
            }
            add_matvec_t(&mut dh_rec, &layer.u, &da);
        }
        // The input gradient of this layer is the output gradient of the
        // layer below.
        dh_seq = dx_seq;
    }
    grads
}

/// dLoss/dscore for one frame, including the batch-level 1/n factor.
fn dscore_frame(head: Head, score: f64, target: f64, inv_n: f64) -> f64 {
    match head {
        Head::Regression => 2.0 * (score - target) * inv_n,
        Head::Classification => {
            // d(-ln p_label)/dscore with score = p(end of query).
            if target >= 0.5 {
                -inv_n / score.max(1e-300)
            } else {
                inv_n / (1.0 - score).max(1e-300)
            }
        }
    }
}

/// Loss and exact gradients for a padded batch. Batch elements are processed
/// in parallel; the reduction order is fixed, so results do not depend on
/// thread count.
pub fn forward_backward(
    params: &EndpointerParams,
    batch: &TrainingBatch,
) -> Result<(f64, Gradients)> {
    if batch.dim != params.input_dim {
        return Err(Error::Shape {
            expected: format!("{}-dim features", params.input_dim),
            got: format!("{}-dim batch", batch.dim),
        });
    }
    let n = batch.n_unmasked();
    if n == 0 {
        return Err(Error::Empty("unmasked frames"));
    }
    let inv_n = 1.0 / n as f64;

    let per_seq: Vec<(f64, Gradients)> = (0..batch.batch)
        .into_par_iter()
        .map(|b| {
            let t_len = batch.seq_len(b);
            let frames = (0..t_len).map(|t| {
                let base = (b * batch.t_max + t) * batch.dim;
                batch.features[base..base + batch.dim].to_vec()
            });
            let (xs, cache) = forward_cached(params, frames, t_len);
            let mut loss_sum = 0.0;
            let mut dscore = vec![0.0; t_len];
            for t in 0..t_len {
                if !batch.mask[b * batch.t_max + t] {
                    continue;
                }
                let s = cache.scores[t];
                let y = batch.targets[b * batch.t_max + t];
                loss_sum += match params.head {
                    Head::Regression => (s - y) * (s - y),
                    Head::Classification => {
                        let p = if y >= 0.5 { s } else { 1.0 - s };
                        -p.max(1e-300).ln()
                    }
                };
                dscore[t] = dscore_frame(params.head, s, y, inv_n);
            }
            let grads = backward_sequence(params, &xs, &cache, &dscore);
            (loss_sum, grads)
        })
        .collect();

    let mut total = Gradients::zeros_like(params);
    let mut loss_acc = 0.0;
    for (l, g) in &per_seq {
        loss_acc += l;
        total.add_assign(g);
    }
    total.check_finite()?;
    let batch_loss = loss_acc * inv_n;
    if !batch_loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok((batch_loss, total))
}

/// Gradients only; thin wrapper used by tests and tooling.
pub fn backward(params: &EndpointerParams, batch: &TrainingBatch) -> Result<Gradients> {
    forward_backward(params, batch).map(|(_, g)| g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub head: Head,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_plateau_factor")]
    pub plateau_factor: f64,
    #[serde(default = "default_plateau_patience")]
    pub plateau_patience: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_layers() -> usize {
    DEFAULT_LAYERS
}
fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    128
}
fn default_epochs() -> usize {
    15
}
fn default_plateau_factor() -> f64 {
    0.5
}
fn default_plateau_patience() -> usize {
    1
}

impl TrainConfig {
    /// Defaults for a head; the two heads train best at different rates.
    pub fn for_head(head: Head) -> Self {
        TrainConfig {
            head,
            layers: DEFAULT_LAYERS,
            hidden: DEFAULT_HIDDEN,
            learning_rate: match head {
                Head::Classification => 2e-4,
                Head::Regression => 2e-3,
            },
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            epochs: 15,
            plateau_factor: 0.5,
            plateau_patience: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "epochs, batch_size, layers, and hidden must be positive".into(),
            ));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config("plateau_factor must be in (0, 1]".into()));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau_patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// One feature sequence with its per-frame targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub features: FeatureSequence,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub learning_rate: f64,
}

pub struct AdamState {
    m: Gradients,
    v: Gradients,
    step: usize,
}

impl AdamState {
    pub fn new(params: &EndpointerParams) -> Self {
        AdamState {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
        }
    }

    pub fn update(
        &mut self,
        params: &mut EndpointerParams,
        grads: &Gradients,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()))
        {
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

fn mean_loss(params: &EndpointerParams, examples: &[TrainingExample]) -> Result<f64> {
    let per_seq: Vec<Result<(f64, usize)>> = examples
        .par_iter()
        .map(|ex| {
            let scores = score_sequence(params, &ex.features)?;
            let mask = vec![true; scores.len()];
            let l = loss(&scores, &ex.targets, &mask, params.head)?;
            Ok((l * scores.len() as f64, scores.len()))
        })
        .collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for r in per_seq {
        let (sum, count) = r?;
        total += sum;
        n += count;
    }
    if n == 0 {
        return Err(Error::Empty("evaluation frames"));
    }
    Ok(total / n as f64)
}

/// Trains from `initial` params (or a fresh seeded init) with shuffled
/// mini-batches, Adam, and halve-on-plateau learning-rate decay driven by
/// dev loss.
pub fn train(
    config: &TrainConfig,
    train_set: &[TrainingExample],
    dev_set: &[TrainingExample],
    initial: Option<EndpointerParams>,
) -> Result<(EndpointerParams, Vec<EpochStats>)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if dev_set.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    let input_dim = train_set[0].features.n_dims();
    let mut params = match initial {
        Some(p) => {
            p.expect_shape(config.layers, config.hidden, input_dim, config.head)?;
            p
        }
        None => EndpointerParams::init(
            config.layers,
            config.hidden,
            input_dim,
            config.head,
            derive_seed(config.seed, "model-init"),
        ),
    };

    let mut adam = AdamState::new(&params);
    let mut lr = config.learning_rate;
    let mut best_dev = f64::INFINITY;
    let mut epochs_since_improvement = 0usize;
    let mut history = Vec::with_capacity(config.epochs);
    let shuffle_stage = derive_seed(config.seed, "train-shuffle");

    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_from(indexed_seed(shuffle_stage, epoch as u64)));

        let mut epoch_loss_sum = 0.0;
        let mut epoch_frames = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<(&FeatureSequence, &[f64])> = chunk
                .iter()
                .map(|&i| (&train_set[i].features, train_set[i].targets.as_slice()))
                .collect();
            let batch = TrainingBatch::new(&items)?;
            let n = batch.n_unmasked();
            let (batch_loss, grads) = forward_backward(&params, &batch).map_err(|e| {
                Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    msg: e.to_string(),
                }
            })?;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    msg: format!("loss {batch_loss}"),
                });
            }
            epoch_loss_sum += batch_loss * n as f64;
            epoch_frames += n;
            adam.update(
                &mut params,
                &grads,
                lr,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
            );
        }

        let train_loss = epoch_loss_sum / epoch_frames as f64;
        let dev_loss = mean_loss(&params, dev_set)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            dev_loss,
            learning_rate: lr,
        });
        log::info!(
            "epoch {epoch}: train {train_loss:.6} dev {dev_loss:.6} lr {lr:.2e}"
        );

        if dev_loss < best_dev {
            best_dev = dev_loss;
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= config.plateau_patience {
                lr *= config.plateau_factor;
                epochs_since_improvement = 0;
                log::info!("epoch {epoch}: dev plateau, lr now {lr:.2e}");
            }
        }
    }
    Ok((params, history))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ENDP";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a versioned binary checkpoint; all weights stored as
/// little-endian f64 in a fixed tensor order.
pub fn save_params(params: &EndpointerParams, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match params.head {
        Head::Classification => 0,
        Head::Regression => 1,
    });
    out.extend_from_slice(&(params.n_layers() as u32).to_le_bytes());
    out.extend_from_slice(&(params.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(params.input_dim as u32).to_le_bytes());
    for tensor in params.tensors() {
        for v in tensor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Companion JSON for a checkpoint, stored next to it.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let name = checkpoint
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    checkpoint.with_file_name(format!("{name}.json"))
}

pub fn save_train_config(config: &TrainConfig, checkpoint: &Path) -> Result<()> {
    let path = sidecar_path(checkpoint);
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_train_config(checkpoint: &Path) -> Result<TrainConfig> {
    let path = sidecar_path(checkpoint);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn load_params(path: &Path) -> Result<EndpointerParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = *pos + n;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {pos} (need {n} more)",
                path.display()
            )));
        }
        let slice = &bytes[*pos..end];
        *pos = end;
        Ok(slice)
    };

    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not an endpointer checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {version} unsupported",
            path.display()
        )));
    }
    let head = match take(&mut pos, 1)?[0] {
        0 => Head::Classification,
        1 => Head::Regression,
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: unknown head tag {other}",
                path.display()
            )))
        }
    };
    let n_layers = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let hidden = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let input_dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if n_layers == 0 || hidden == 0 || input_dim == 0 {
        return Err(Error::Checkpoint(format!(
            "{}: degenerate shape {n_layers}x{hidden}x{input_dim}",
            path.display()
        )));
    }

    let read_tensor = |pos: &mut usize, n: usize| -> Result<Vec<f64>> {
        let raw = take(pos, n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let d = if l == 0 { input_dim } else { hidden };
        layers.push(LayerParams {
            w: read_tensor(&mut pos, 4 * hidden * d)?,
            u: read_tensor(&mut pos, 4 * hidden * hidden)?,
            b: read_tensor(&mut pos, 4 * hidden)?,
        });
    }
    let head_w = read_tensor(&mut pos, head.n_outputs() * hidden)?;
    let head_b = read_tensor(&mut pos, head.n_outputs())?;
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes after weights",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok(EndpointerParams {
        layers,
        head_w,
        head_b,
        hidden,
        input_dim,
        head,
    })
}
