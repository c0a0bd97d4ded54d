//! Object-adaptive LSTM classifier.
//!
//! Every proposal is evaluated for a single time step against the same
//! previously estimated state: an input layer maps the flattened proposal
//! features to the unit count, a stack of standard (non-peephole) LSTM
//! layers produces candidate cell/hidden states, and a two-way softmax output
//! layer scores the proposal. Training back-propagates through that one step
//! only; the previous state is a constant.
//!
//! Class index 1 is the positive (target) class.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamSet, Parameters};
use crate::error::{dim, Error, Result};
use crate::ops::{sigmoid, softmax2, softmax_xent};
use crate::tensor::Tensor;

pub const POSITIVE: u8 = 1;
pub const NEGATIVE: u8 = 0;

/// Gate order used for every per-gate array.
pub const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "cell"];
const I: usize = 0;
const F: usize = 1;
const O: usize = 2;
const G: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmConfig {
    pub units: usize,
    pub layers: usize,
    pub forget_bias: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self { units: 128, layers: 2, forget_bias: 1.0 }
    }
}

/// Weights of one LSTM layer; `u` multiplies the layer input, `v` the
/// previous hidden state. All matrices are `[n, n]`, stored row-major as
/// `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub u: [Tensor; 4],
    pub v: [Tensor; 4],
    pub b: [Tensor; 4],
}

impl LstmLayer {
    fn zeros(n: usize) -> Self {
        let mat = || Tensor::zeros(&[n, n]);
        let vecn = || Tensor::zeros(&[n]);
        Self {
            u: [mat(), mat(), mat(), mat()],
            v: [mat(), mat(), mat(), mat()],
            b: [vecn(), vecn(), vecn(), vecn()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `[m, n]`; the input layer computes `z = w_in^T x + b_in`.
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub layers: Vec<LstmLayer>,
    /// `[n, 2]`; logits are `w_out^T h + b_out`.
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl LstmParams {
    pub fn zeros(feature_len: usize, units: usize, layers: usize) -> Self {
        Self {
            w_in: Tensor::zeros(&[feature_len, units]),
            b_in: Tensor::zeros(&[units]),
            layers: (0..layers).map(|_| LstmLayer::zeros(units)).collect(),
            w_out: Tensor::zeros(&[units, 2]),
            b_out: Tensor::zeros(&[2]),
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights (fan-in is `n` for
    /// the gate and output matrices, `m` for the input layer), zero biases
    /// except the forget gate.
    pub fn init<R: Rng + ?Sized>(feature_len: usize, config: &LstmConfig, rng: &mut R) -> Result<Self> {
        if feature_len == 0 || config.units == 0 || config.layers == 0 {
            return Err(Error::Argument("LSTM needs positive feature length, units and layers".into()));
        }
        let mut p = Self::zeros(feature_len, config.units, config.layers);
        let mut fill = |t: &mut Tensor, fan_in: usize| {
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            for v in t.data_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        };
        let n = config.units;
        fill(&mut p.w_in, feature_len);
        for layer in &mut p.layers {
            for k in 0..4 {
                fill(&mut layer.u[k], n);
                fill(&mut layer.v[k], n);
            }
            layer.b[F] = Tensor::filled(&[n], config.forget_bias);
        }
        fill(&mut p.w_out, n);
        Ok(p)
    }

    pub fn feature_len(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Multiply-accumulates of one proposal's forward pass.
    pub fn forward_macs(&self) -> u64 {
        let (m, n) = (self.feature_len() as u64, self.units() as u64);
        m * n + self.layers.len() as u64 * 8 * n * n + 2 * n
    }
}

impl Parameters for LstmParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("lstm.w_in".into(), &self.w_in), ("lstm.b_in".into(), &self.b_in)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, gate) in GATE_NAMES.iter().enumerate() {
                v.push((format!("lstm.layer{}.u_{}", l, gate), &layer.u[k]));
                v.push((format!("lstm.layer{}.v_{}", l, gate), &layer.v[k]));
                v.push((format!("lstm.layer{}.b_{}", l, gate), &layer.b[k]));
            }
        }
        v.push(("lstm.w_out".into(), &self.w_out));
        v.push(("lstm.b_out".into(), &self.b_out));
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> =
            vec![("lstm.w_in".into(), &mut self.w_in), ("lstm.b_in".into(), &mut self.b_in)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let LstmLayer { u, v: vv, b } = layer;
            for (k, ((uk, vk), bk)) in u.iter_mut().zip(vv.iter_mut()).zip(b.iter_mut()).enumerate() {
                let gate = GATE_NAMES[k];
                v.push((format!("lstm.layer{}.u_{}", l, gate), uk));
                v.push((format!("lstm.layer{}.v_{}", l, gate), vk));
                v.push((format!("lstm.layer{}.b_{}", l, gate), bk));
            }
        }
        v.push(("lstm.w_out".into(), &mut self.w_out));
        v.push(("lstm.b_out".into(), &mut self.b_out));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Cell and hidden vectors of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub layers: Vec<LayerState>,
}

impl LstmState {
    pub fn zeros(units: usize, layers: usize) -> Self {
        Self { layers: (0..layers).map(|_| LayerState { c: vec![0.0; units], h: vec![0.0; units] }).collect() }
    }

    fn check(&self, params: &LstmParams) -> Result<()> {
        let n = params.units();
        if self.layers.len() != params.layer_count()
            || self.layers.iter().any(|l| l.c.len() != n || l.h.len() != n)
        {
            return Err(dim(
                "LstmState",
                format!("state does not match {} layers of {} units", params.layer_count(), n),
            ));
        }
        Ok(())
    }
}

/// Softmax output for one proposal and the state it would hand to the next frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub positive: f64,
    pub negative: f64,
    pub state: LstmState,
}

struct LayerTrace {
    gates: [Vec<f64>; 4],
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

struct Trace {
    z: Vec<f64>,
    layers: Vec<LayerTrace>,
    logits: [f64; 2],
}

/// `out = mat * x` for a row-major `[rows, cols]` matrix, accumulated.
fn matvec_acc(mat: &Tensor, x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(mat.data().chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += mat^T * g` for a row-major `[rows, cols]` matrix.
fn matvec_t_acc(mat: &Tensor, g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (gi, row) in g.iter().zip(mat.data().chunks_exact(cols)) {
        if *gi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += gi * a;
        }
    }
}

/// `mat += a ⊗ b` (outer product, `a` indexes rows).
fn outer_acc(mat: &mut Tensor, a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (ai, row) in a.iter().zip(mat.data_mut().chunks_exact_mut(cols)) {
        if *ai == 0.0 {
            continue;
        }
        for (r, bj) in row.iter_mut().zip(b) {
            *r += ai * bj;
        }
    }
}

fn check_finite(v: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

fn input_layer(params: &LstmParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.feature_len() {
        return Err(dim(
            "lstm input layer",
            format!("feature length {} but the network expects {}", x.len(), params.feature_len()),
        ));
    }
    let n = params.units();
    let mut z = params.b_in.data().to_vec();
    for (xi, row) in x.iter().zip(params.w_in.data().chunks_exact(n)) {
        if *xi == 0.0 {
            continue;
        }
        for (zj, w) in z.iter_mut().zip(row) {
            *zj += xi * w;
        }
    }
    check_finite(&z, || "lstm input layer".into())?;
    Ok(z)
}

fn forward_trace(params: &LstmParams, prev: &LstmState, x: &[f64]) -> Result<Trace> {
    let z = input_layer(params, x)?;
    let n = params.units();
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(params.layer_count());
    for (l, (layer, st)) in params.layers.iter().zip(&prev.layers).enumerate() {
        let input = layers.last().map_or(&z, |t| &t.h);
        let mut gates: [Vec<f64>; 4] = Default::default();
        for k in 0..4 {
            let mut a = layer.b[k].data().to_vec();
            matvec_acc(&layer.u[k], input, &mut a);
            matvec_acc(&layer.v[k], &st.h, &mut a);
            for v in &mut a {
                *v = if k == G { libm::tanh(*v) } else { sigmoid(*v) };
            }
            check_finite(&a, || format!("lstm layer {} {} gate", l, GATE_NAMES[k]))?;
            gates[k] = a;
        }
        let mut c = vec![0.0; n];
        let mut tanh_c = vec![0.0; n];
        let mut h = vec![0.0; n];
        for j in 0..n {
            c[j] = gates[F][j] * st.c[j] + gates[I][j] * gates[G][j];
            tanh_c[j] = libm::tanh(c[j]);
            h[j] = gates[O][j] * tanh_c[j];
        }
        check_finite(&c, || format!("lstm layer {} cell", l))?;
        layers.push(LayerTrace { gates, c, tanh_c, h });
    }
    let top = &layers.last().expect("at least one layer").h;
    let mut logits = [params.b_out.data()[0], params.b_out.data()[1]];
    for (hj, w) in top.iter().zip(params.w_out.data().chunks_exact(2)) {
        logits[0] += hj * w[0];
        logits[1] += hj * w[1];
    }
    check_finite(&logits, || "lstm output layer".into())?;
    Ok(Trace { z, layers, logits })
}

impl Trace {
    fn state(&self) -> LstmState {
        LstmState {
            layers: self.layers.iter().map(|t| LayerState { c: t.c.clone(), h: t.h.clone() }).collect(),
        }
    }

    fn scores(&self) -> ClassScores {
        let (neg, pos) = softmax2(self.logits[0], self.logits[1]);
        ClassScores { positive: pos, negative: neg, state: self.state() }
    }
}

/// First state of a sequence: one step from the zero state on the target's features.
pub fn init_state(params: &LstmParams, initial_feature: &[f64]) -> Result<LstmState> {
    let zero = LstmState::zeros(params.units(), params.layer_count());
    Ok(forward_trace(params, &zero, initial_feature)?.state())
}

/// Scores each proposal independently against the same previous state.
pub fn forward(params: &LstmParams, prev: &LstmState, features: &[&[f64]]) -> Result<Vec<ClassScores>> {
    prev.check(params)?;
    if features.is_empty() {
        return Err(Error::Argument("lstm forward: empty batch".into()));
    }
    features.iter().map(|x| Ok(forward_trace(params, prev, x)?.scores())).collect()
}

/// Batch-mean cross-entropy and its exact gradient for every parameter,
/// holding `prev` fixed.
pub fn backward(
    params: &LstmParams,
    prev: &LstmState,
    features: &[&[f64]],
    labels: &[u8],
) -> Result<(f64, LstmParams)> {
    prev.check(params)?;
    if features.len() != labels.len() {
        return Err(dim("lstm backward", format!("{} samples vs {} labels", features.len(), labels.len())));
    }
    if features.is_empty() {
        return Err(Error::Argument("lstm backward: empty batch".into()));
    }
    let traces = features
        .iter()
        .map(|x| forward_trace(params, prev, x))
        .collect::<Result<Vec<_>>>()?;
    let logits = Tensor::new(
        vec![traces.len(), 2],
        traces.iter().flat_map(|t| t.logits).collect(),
    )?;
    let (loss, dlogits) = softmax_xent(&logits, labels)?;

    let n = params.units();
    let mut grads = LstmParams::zeros(params.feature_len(), n, params.layer_count());
    let mut da: [Vec<f64>; 4] = Default::default();
    for (b, (trace, x)) in traces.iter().zip(features).enumerate() {
        let dl = &dlogits.data()[2 * b..2 * b + 2];
        let top_h = &trace.layers.last().expect("layers").h;
        let mut dh = vec![0.0; n];
        for j in 0..n {
            let w = &params.w_out.data()[2 * j..2 * j + 2];
            dh[j] = w[0] * dl[0] + w[1] * dl[1];
            let gw = &mut grads.w_out.data_mut()[2 * j..2 * j + 2];
            gw[0] += top_h[j] * dl[0];
            gw[1] += top_h[j] * dl[1];
        }
        grads.b_out.data_mut()[0] += dl[0];
        grads.b_out.data_mut()[1] += dl[1];

        for l in (0..params.layer_count()).rev() {
            let t = &trace.layers[l];
            let st = &prev.layers[l];
            let layer = &params.layers[l];
            for k in 0..4 {
                da[k].clear();
                da[k].resize(n, 0.0);
            }
            for j in 0..n {
                let (i, f, o, g) = (t.gates[I][j], t.gates[F][j], t.gates[O][j], t.gates[G][j]);
                let d_o = dh[j] * t.tanh_c[j];
                let dc = dh[j] * o * (1.0 - t.tanh_c[j] * t.tanh_c[j]);
                da[I][j] = dc * g * i * (1.0 - i);
                da[F][j] = dc * st.c[j] * f * (1.0 - f);
                da[O][j] = d_o * o * (1.0 - o);
                da[G][j] = dc * i * (1.0 - g * g);
            }
            let input: &[f64] = if l == 0 { &trace.z } else { &trace.layers[l - 1].h };
            let mut d_input = vec![0.0; n];
            let gl = &mut grads.layers[l];
            for k in 0..4 {
                outer_acc(&mut gl.u[k], &da[k], input);
                outer_acc(&mut gl.v[k], &da[k], &st.h);
                for (gb, d) in gl.b[k].data_mut().iter_mut().zip(&da[k]) {
                    *gb += d;
                }
                matvec_t_acc(&layer.u[k], &da[k], &mut d_input);
            }
            dh = d_input;
        }
        // dh now holds dL/dz for this sample.
        outer_acc(&mut grads.w_in, x, &dh);
        for (gb, d) in grads.b_in.data_mut().iter_mut().zip(&dh) {
            *gb += d;
        }
    }
    for (name, t) in grads.named() {
        t.ensure_finite(&format!("gradient of {}", name))?;
    }
    Ok((loss, grads))
}

/// One backward pass followed by one ADAM update of every parameter.
/// Returns the loss measured before the update.
pub fn train_step(
    params: &mut LstmParams,
    prev: &LstmState,
    features: &[&[f64]],
    labels: &[u8],
    adam: &mut AdamSet,
) -> Result<f64> {
    let (loss, grads) = backward(params, prev, features, labels)?;
    adam.step(params, &grads)?;
    Ok(loss)
}

/// Index of the highest positive score (lowest index on ties) and its state.
pub fn choose_target(scores: &[ClassScores]) -> Result<(usize, LstmState)> {
    let first = scores.first().ok_or_else(|| Error::Argument("choose_target: no scores".into()))?;
    let mut best = 0;
    let mut best_p = first.positive;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.positive > best_p {
            best = i;
            best_p = s.positive;
        }
    }
    Ok((best, scores[best].state.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(m: usize, n: usize, seed: u64) -> LstmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LstmParams::init(m, &LstmConfig { units: n, layers: 2, forget_bias: 1.0 }, &mut rng).unwrap()
    }

    fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_params_give_half_gates_and_zero_state() {
        let p = LstmParams::zeros(6, 4, 2);
        let s = init_state(&p, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        for l in &s.layers {
            assert!(l.c.iter().all(|&v| v == 0.0));
            assert!(l.h.iter().all(|&v| v == 0.0));
        }
        let scores = forward(&p, &s, &[&[1.0; 6], &[0.0; 6]]).unwrap();
        for sc in &scores {
            assert_eq!((sc.positive, sc.negative), (0.5, 0.5));
        }
    }

    #[test]
    fn repeated_proposals_score_identically() {
        let p = random_params(6, 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_vec(6, &mut rng);
        let prev = init_state(&p, &random_vec(6, &mut rng)).unwrap();
        let scores = forward(&p, &prev, &[&x, &x, &x]).unwrap();
        assert_eq!(scores[0], scores[1]);
        assert_eq!(scores[1], scores[2]);
        for s in &scores {
            assert!((s.positive + s.negative - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_length_mismatch_is_a_dimension_error() {
        let p = LstmParams::zeros(6, 4, 2);
        assert!(matches!(init_state(&p, &[0.0; 5]), Err(Error::Dimension { .. })));
        let s = LstmState::zeros(4, 2);
        assert!(forward(&p, &s, &[&[0.0; 7]]).is_err());
        assert!(forward(&p, &LstmState::zeros(3, 2), &[&[0.0; 6]]).is_err());
    }

    #[test]
    fn zero_params_gradients_are_forced() {
        let p = LstmParams::zeros(6, 4, 2);
        let s = LstmState::zeros(4, 2);
        let (loss, g) = backward(&p, &s, &[&[1.0; 6], &[2.0; 6]], &[POSITIVE, NEGATIVE]).unwrap();
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-12);
        assert!(g.w_out.data().iter().all(|&v| v == 0.0));
        // (0.5 - 0) / 2 + (0.5 - 1) / 2 = 0 for each class
        assert!(g.b_out.data().iter().all(|&v| v.abs() < 1e-15));
        let (_, g1) = backward(&p, &s, &[&[1.0; 6]], &[POSITIVE]).unwrap();
        assert_eq!(g1.b_out.data(), &[0.5, -0.5]);
    }

    #[test]
    fn duplicating_the_batch_keeps_gradients() {
        let p = random_params(6, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(6, &mut rng)).collect();
        let prev = init_state(&p, &xs[0]).unwrap();
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let labels = [1, 0, 1];
        let (l1, g1) = backward(&p, &prev, &refs, &labels).unwrap();
        let doubled: Vec<&[f64]> = refs.iter().chain(refs.iter()).copied().collect();
        let (l2, g2) = backward(&p, &prev, &doubled, &[1, 0, 1, 1, 0, 1]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for ((_, a), (_, b)) in g1.named().iter().zip(g2.named().iter()) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut p = random_params(6, 4, 3);
        let before = p.checksum();
        let mut adam = AdamSet::for_params(&p, AdamConfig { learning_rate: 0.0, ..Default::default() });
        let s = LstmState::zeros(4, 2);
        train_step(&mut p, &s, &[&[1.0; 6]], &[1], &mut adam).unwrap();
        assert_eq!(p.checksum(), before);
    }

    #[test]
    fn choose_target_prefers_lowest_index_on_ties() {
        let st = LstmState::zeros(1, 1);
        let mk = |p: f64| ClassScores { positive: p, negative: 1.0 - p, state: st.clone() };
        assert_eq!(choose_target(&[mk(0.3)]).unwrap().0, 0);
        assert_eq!(choose_target(&[mk(0.5), mk(0.5), mk(0.5)]).unwrap().0, 0);
        assert_eq!(choose_target(&[mk(0.1), mk(0.9), mk(0.9)]).unwrap().0, 1);
        assert!(choose_target(&[]).is_err());
    }
}
