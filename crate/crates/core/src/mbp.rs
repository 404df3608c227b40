//! Modality-balanced pretraining weights.
//!
//! Each step compares the two mono-modal decoder losses against the joint
//! loss, turns the squared gaps into softmax targets and moves the weights
//! toward them with an exponential moving average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 0.99;

/// Joint, audio-only and video-only decoder losses on one minibatch, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub l: f64,
    pub l_a: f64,
    pub l_v: f64,
}

impl LossTriple {
    pub fn validate(&self) -> Result<()> {
        for x in [self.l, self.l_a, self.l_v] {
            if !x.is_finite() {
                return Err(Error::NonFinite("loss triple"));
            }
            if x < 0.0 {
                return Err(Error::InvalidArgument(format!("negative loss {x}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdGaps {
    pub g_a: f64,
    pub g_v: f64,
}

/// Squared distance of each mono-modal loss from the joint loss.
pub fn mmd(triple: &LossTriple) -> MmdGaps {
    let d_a = triple.l_a - triple.l;
    let d_v = triple.l_v - triple.l;
    MmdGaps { g_a: d_a * d_a, g_v: d_v * d_v }
}

/// Two-way softmax over `alpha * gap`.
pub fn target_weights(gaps: &MmdGaps, alpha: f64) -> (f64, f64) {
    let (a, v) = (alpha * gaps.g_a, alpha * gaps.g_v);
    let m = a.max(v);
    let (ea, ev) = ((a - m).exp(), (v - m).exp());
    let w_a = ea / (ea + ev);
    // 1 - w_a keeps the pair summing to one to the last bit.
    (w_a, 1.0 - w_a)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MbpState {
    pub w_a: f64,
    pub w_v: f64,
    pub alpha: f64,
    pub beta: f64,
    pub t: u64,
}

impl Default for MbpState {
    fn default() -> Self {
        MbpState::new(DEFAULT_ALPHA, DEFAULT_BETA).expect("default constants are valid")
    }
}

impl MbpState {
    /// Fresh state with equal weights; the first [`MbpState::observe`] replaces them.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidArgument(format!("beta must lie in (0, 1), got {beta}")));
        }
        Ok(MbpState { w_a: 0.5, w_v: 0.5, alpha, beta, t: 0 })
    }

    /// One EMA step toward `targets`.
    pub fn update_weights(&self, targets: (f64, f64)) -> MbpState {
        let b = self.beta;
        MbpState {
            w_a: b * self.w_a + (1.0 - b) * targets.0,
            w_v: b * self.w_v + (1.0 - b) * targets.1,
            t: self.t + 1,
            ..*self
        }
    }

    /// Folds in one minibatch's losses and returns the gaps and targets used.
    /// The very first call adopts the targets outright.
    pub fn observe(&mut self, triple: &LossTriple) -> Result<(MmdGaps, (f64, f64))> {
        triple.validate()?;
        let gaps = mmd(triple);
        let targets = target_weights(&gaps, self.alpha);
        if self.t == 0 {
            self.w_a = targets.0;
            self.w_v = targets.1;
            self.t = 1;
        } else {
            *self = self.update_weights(targets);
        }
        Ok((gaps, targets))
    }
}

/// `L + w_a L_a + w_v L_v` with the weights as constants.
pub fn pretrain_loss(tape: &mut Tape, l: Var, l_a: Var, l_v: Var, state: &MbpState) -> Result<Var> {
    for v in [l, l_a, l_v] {
        if tape.value(v).rank() != 0 {
            return Err(Error::InvalidShape(format!(
                "pretrain_loss expects scalar losses, got {:?}",
                tape.shape(v)
            )));
        }
    }
    let wa = tape.scale(l_a, state.w_a)?;
    let wv = tape.scale(l_v, state.w_v)?;
    let s = tape.add(l, wa)?;
    tape.add(s, wv)
}

/// Scalar constant helper for tests and callers that build triples by hand.
pub fn scalar_losses(tape: &mut Tape, triple: &LossTriple) -> (Var, Var, Var) {
    (
        tape.constant(Tensor::scalar(triple.l)),
        tape.constant(Tensor::scalar(triple.l_a)),
        tape.constant(Tensor::scalar(triple.l_v)),
    )
}
