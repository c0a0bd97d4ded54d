//! Bias-corrected ADAM and a small trait for walking named parameter tensors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::tensor::{fnv_mix, Tensor, FNV_OFFSET};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        Self {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step: 0,
            config,
        }
    }
}

/// One ADAM update of `param` in place. `name` identifies the parameter in
/// error messages.
pub fn adam_step(name: &str, param: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape()
        || param.shape() != state.first_moment.shape()
        || param.shape() != state.second_moment.shape()
    {
        return Err(dim(
            "adam_step",
            format!(
                "{}: param {:?}, grad {:?}, moments {:?}/{:?}",
                name,
                param.shape(),
                grad.shape(),
                state.first_moment.shape(),
                state.second_moment.shape()
            ),
        ));
    }
    if !grad.data().iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", name)));
    }
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(beta1, t);
    let c2 = 1.0 - libm::pow(beta2, t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (libm::sqrt(v_hat) + epsilon);
    }
    param.ensure_finite(name)
}

/// A fixed, ordered collection of named parameter tensors.
pub trait Parameters {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Bit-exact fingerprint of every value, in declaration order.
    fn checksum(&self) -> u64 {
        self.named()
            .iter()
            .fold(FNV_OFFSET, |h, (_, t)| fnv_mix(h, t.checksum()))
    }
}

impl Parameters for Tensor {
    fn named(&self) -> Vec<(String, &Tensor)> {
        alloc::vec![("tensor".into(), self)]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        alloc::vec![("tensor".into(), self)]
    }
}

/// The tensor called `name` among `entries`.
pub fn lookup_named<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Argument(format!("no tensor named {}", name)))
}

/// Overwrites every tensor of `p` with the same-named entry. Shapes must match.
pub fn load_named<P: Parameters + ?Sized>(p: &mut P, entries: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in p.named_mut() {
        let src = lookup_named(entries, &name)?;
        if src.shape() != t.shape() {
            return Err(dim("load_named", format!("{}: stored {:?} vs expected {:?}", name, src.shape(), t.shape())));
        }
        *t = src.clone();
    }
    Ok(())
}

/// One [`AdamState`] per tensor of a [`Parameters`] value.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSet {
    states: Vec<AdamState>,
}

impl AdamSet {
    pub fn for_params<P: Parameters + ?Sized>(params: &P, config: AdamConfig) -> Self {
        Self {
            states: params.named().iter().map(|(_, t)| AdamState::new(t.shape(), config)).collect(),
        }
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        for s in &mut self.states {
            s.config.learning_rate = lr;
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.named();
        let mut params = params.named_mut();
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(dim(
                "AdamSet::step",
                format!("{} params, {} grads, {} states", params.len(), grads.len(), self.states.len()),
            ));
        }
        for (((name, p), (_, g)), s) in params.iter_mut().zip(&grads).zip(&mut self.states) {
            adam_step(name, p, g, s)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_everything_at_rest() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&[3], AdamConfig::default());
        adam_step("p", &mut p, &Tensor::zeros(&[3]), &mut s).unwrap();
        assert_eq!(p, before);
        assert!(s.first_moment.data().iter().all(|&m| m == 0.0));
        assert!(s.second_moment.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        for g in [3.7, -0.02, 0.5] {
            let cfg = AdamConfig { learning_rate: 0.01, ..Default::default() };
            let mut p = scalar(0.0);
            let mut s = AdamState::new(&[1], cfg);
            adam_step("p", &mut p, &scalar(g), &mut s).unwrap();
            let expected = -cfg.learning_rate * libm::copysign(1.0, g);
            assert!((p.data()[0] - expected).abs() < 1e-6 * cfg.learning_rate, "g={}", g);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig { learning_rate: 0.1, ..Default::default() };
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&[1], cfg);
        for _ in 0..200 {
            let g = 2.0 * (p.data()[0] - 3.0);
            adam_step("p", &mut p, &scalar(g), &mut s).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 0.1, "p = {}", p.data()[0]);
        assert_eq!(s.step, 200);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&[1], AdamConfig::default());
        match adam_step("w_out", &mut p, &scalar(f64::NAN), &mut s) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("w_out")),
            other => panic!("{:?}", other),
        }
        assert_eq!(s.step, 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&[2], AdamConfig::default());
        assert!(adam_step("p", &mut p, &scalar(1.0), &mut s).is_err());
    }
}
