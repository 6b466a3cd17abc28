//! Closed-form flop accounting for LSTM and Skim-LSTM steps.
//!
//! Counting convention (normative): a multiply and an add count as separate
//! flops, and every scalar nonlinearity (`σ`, `tanh`, `exp`) counts as one.
//!
//! * LSTM step, `flops_lstm_step(d_in, d_out, d_read)`:
//!   `8·d_out·(d_in + d_read)` for the stacked gate mat-vec (multiply + add),
//!   `4·d_out` for the bias add, `4·d_out` for the gate nonlinearities and
//!   `5·d_out` for the state update (two multiplies and an add for `c`,
//!   `tanh` and a multiply for `h`).
//! * Decision overhead: `2·k·(d_in + d) + k` for the affine map and `4·k`
//!   for the softmax (`k` exps, a `k`-term sum approximated as `k`, `2k` for
//!   max subtraction and division).
//! * Skim-unit step: decision overhead plus the LSTM cost of the branch that
//!   was taken, `(d_in, d, d)` for a read and `(d_in, d', d)` for a skim.

use crate::cell::Decision;
use crate::error::{contract, Result};
use crate::trace::DecisionTrace;
use serde::{Deserialize, Serialize};

/// Dimensions that determine the cost of one Skim-unit step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkimDims {
    pub d_in: usize,
    pub d: usize,
    pub d_small: usize,
    pub k: usize,
}

impl SkimDims {
    pub fn new(d_in: usize, d: usize, d_small: usize) -> Self {
        Self {
            d_in,
            d,
            d_small,
            k: 2,
        }
    }
}

pub fn flops_lstm_step(d_in: usize, d_out: usize, d_read: usize) -> u64 {
    let (d_in, d_out, d_read) = (d_in as u64, d_out as u64, d_read as u64);
    8 * d_out * (d_in + d_read) + 4 * d_out + 4 * d_out + 5 * d_out
}

pub fn flops_decision(dims: SkimDims) -> u64 {
    let k = dims.k as u64;
    2 * k * (dims.d_in + dims.d) as u64 + k + k + 3 * k
}

pub fn flops_skim_step(dims: SkimDims, decision: Decision) -> u64 {
    let branch = match decision {
        Decision::Read => flops_lstm_step(dims.d_in, dims.d, dims.d),
        Decision::Skim => flops_lstm_step(dims.d_in, dims.d_small, dims.d),
    };
    flops_decision(dims) + branch
}

/// Fraction of steps that skimmed.
pub fn skim_rate(trace: &DecisionTrace) -> Result<f64> {
    if trace.is_empty() {
        return Err(contract("skim rate of an empty trace"));
    }
    Ok(trace.skim_count() as f64 / trace.len() as f64)
}

/// Standard-LSTM flops over Skim-model flops for the decisions in `trace`.
pub fn flop_reduction(trace: &DecisionTrace, dims: SkimDims) -> Result<f64> {
    if trace.is_empty() {
        return Err(contract("flop reduction of an empty trace"));
    }
    let baseline = trace.len() as u64 * flops_lstm_step(dims.d_in, dims.d, dims.d);
    let actual: u64 = trace
        .steps
        .iter()
        .map(|s| flops_skim_step(dims, s.decision))
        .sum();
    Ok(baseline as f64 / actual as f64)
}

/// Flop-R over several traces sharing the same dimensions.
pub fn flop_reduction_many<'a>(
    traces: impl IntoIterator<Item = &'a DecisionTrace>,
    dims: SkimDims,
) -> Result<f64> {
    let (mut steps, mut actual) = (0u64, 0u64);
    for t in traces {
        steps += t.len() as u64;
        actual += t.steps.iter().map(|s| flops_skim_step(dims, s.decision)).sum::<u64>();
    }
    if steps == 0 {
        return Err(contract("flop reduction of an empty trace"));
    }
    Ok((steps * flops_lstm_step(dims.d_in, dims.d, dims.d)) as f64 / actual as f64)
}

/// Runtime flop counter, charged by the hard step at its branch point.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub read_steps: u64,
    pub skim_steps: u64,
    /// Plain LSTM steps (no decision network).
    pub lstm_steps: u64,
    pub decision_flops: u64,
    pub branch_flops: u64,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge_skim_unit(&mut self, dims: SkimDims, decision: Decision) {
        self.decision_flops += flops_decision(dims);
        match decision {
            Decision::Read => {
                self.read_steps += 1;
                self.branch_flops += flops_lstm_step(dims.d_in, dims.d, dims.d);
            }
            Decision::Skim => {
                self.skim_steps += 1;
                self.branch_flops += flops_lstm_step(dims.d_in, dims.d_small, dims.d);
            }
        }
    }

    pub fn charge_lstm(&mut self, d_in: usize, d_out: usize, d_read: usize) {
        self.lstm_steps += 1;
        self.branch_flops += flops_lstm_step(d_in, d_out, d_read);
    }

    pub fn total(&self) -> u64 {
        self.decision_flops + self.branch_flops
    }

    pub fn steps(&self) -> u64 {
        self.read_steps + self.skim_steps + self.lstm_steps
    }

    pub fn merge(&mut self, other: &FlopLedger) {
        self.read_steps += other.read_steps;
        self.skim_steps += other.skim_steps;
        self.lstm_steps += other.lstm_steps;
        self.decision_flops += other.decision_flops;
        self.branch_flops += other.branch_flops;
    }
}
