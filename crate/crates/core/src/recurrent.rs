//! A recurrent layer that is either a plain LSTM or a Skim-LSTM, run over a
//! whole sequence. Both variants expose the same input and output shapes.

use crate::cell::{
    lstm_step, lstm_step_tape, Decision, LstmParams, LstmVars, Policy, SkimState, SkimUnitParams,
    SkimVars,
};
use crate::error::Result;
use crate::flops::{FlopLedger, SkimDims};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};
use crate::trace::{DecisionTrace, StepRecord};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Recurrent {
    Lstm(LstmParams),
    Skim(SkimUnitParams),
}

#[derive(Clone, Copy, Debug)]
pub enum RecurrentVars {
    Lstm(LstmVars),
    Skim(SkimVars),
}

/// How Skim units behave while recording for training.
pub enum StepMode<'a> {
    /// Always take the big cell, no relaxation.
    ForcedRead,
    /// Gumbel-softmax blend at temperature `tau`; `noise` yields one
    /// `[g_read, g_skim]` pair per step.
    Relaxed {
        tau: f64,
        noise: &'a mut dyn FnMut() -> [f64; 2],
    },
}

/// Output of a recorded sequence run.
#[derive(Debug)]
pub struct TapeRun {
    /// Hidden state after each position, in input order.
    pub outputs: Vec<Var>,
    /// `p_skim` nodes for every Skim step (empty for a plain LSTM).
    pub skim_probs: Vec<Var>,
    pub trace: DecisionTrace,
}

/// Output of a hard sequence run.
#[derive(Clone, Debug)]
pub struct ValueRun {
    pub outputs: Vec<Vec<f64>>,
    pub trace: DecisionTrace,
}

fn positions(len: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    }
}

impl Recurrent {
    pub fn d_in(&self) -> usize {
        match self {
            Recurrent::Lstm(p) => p.d_in,
            Recurrent::Skim(p) => p.d_in(),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Recurrent::Lstm(p) => p.d_out,
            Recurrent::Skim(p) => p.d(),
        }
    }

    pub fn is_skim(&self) -> bool {
        matches!(self, Recurrent::Skim(_))
    }

    /// Flop dimensions; a plain LSTM reports `d' = d`.
    pub fn dims(&self) -> SkimDims {
        match self {
            Recurrent::Lstm(p) => SkimDims::new(p.d_in, p.d_out, p.d_out),
            Recurrent::Skim(p) => p.dims(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Recurrent::Lstm(p) => p.validate(),
            Recurrent::Skim(p) => p.validate(),
        }
    }

    /// Parameters in a fixed order, with names used by the weight file.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        match self {
            Recurrent::Lstm(p) => vec![
                (format!("{prefix}lstm.W"), &p.w),
                (format!("{prefix}lstm.b"), &p.b),
            ],
            Recurrent::Skim(p) => vec![
                (format!("{prefix}big.W"), &p.big.w),
                (format!("{prefix}big.b"), &p.big.b),
                (format!("{prefix}small.W"), &p.small.w),
                (format!("{prefix}small.b"), &p.small.b),
                (format!("{prefix}decision.W"), &p.decision_w),
                (format!("{prefix}decision.b"), &p.decision_b),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Recurrent::Lstm(p) => vec![&mut p.w, &mut p.b],
            Recurrent::Skim(p) => vec![
                &mut p.big.w,
                &mut p.big.b,
                &mut p.small.w,
                &mut p.small.b,
                &mut p.decision_w,
                &mut p.decision_b,
            ],
        }
    }

    /// Registers parameters as tape leaves in [`Self::named_params`] order.
    pub fn bind(&self, tape: &mut Tape) -> RecurrentVars {
        match self {
            Recurrent::Lstm(p) => RecurrentVars::Lstm(p.bind(tape)),
            Recurrent::Skim(p) => RecurrentVars::Skim(p.bind(tape)),
        }
    }

    /// Rebuilds a binding from leaves laid out by [`Self::bind`].
    pub fn vars_from(&self, leaves: &[Var]) -> RecurrentVars {
        match self {
            Recurrent::Lstm(_) => RecurrentVars::Lstm(LstmVars {
                w: leaves[0],
                b: leaves[1],
            }),
            Recurrent::Skim(_) => RecurrentVars::Skim(SkimVars {
                big: LstmVars {
                    w: leaves[0],
                    b: leaves[1],
                },
                small: LstmVars {
                    w: leaves[2],
                    b: leaves[3],
                },
                decision_w: leaves[4],
                decision_b: leaves[5],
            }),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Recurrent::Lstm(_) => 2,
            Recurrent::Skim(_) => 6,
        }
    }

    /// Hard run from a zero state. With `reverse`, positions are visited
    /// last to first; outputs and trace stay in input order.
    pub fn run_values<R: Rng + ?Sized>(
        &self,
        inputs: &[Vec<f64>],
        policy: Policy,
        rng: &mut R,
        reverse: bool,
        mut ledger: Option<&mut FlopLedger>,
    ) -> Result<ValueRun> {
        let n = inputs.len();
        let mut state = SkimState::zeros(self.d());
        let mut outputs = vec![Vec::new(); n];
        let mut steps = vec![StepRecord::new(Decision::Read, [1.0, 0.0]); n];
        for t in positions(n, reverse) {
            match self {
                Recurrent::Lstm(p) => {
                    let (h, c) = lstm_step(p, &inputs[t], &state.h, &state.c)?;
                    if let Some(l) = ledger.as_deref_mut() {
                        l.charge_lstm(p.d_in, p.d_out, p.d_read);
                    }
                    state = SkimState { h, c };
                }
                Recurrent::Skim(p) => {
                    let out = p.step_hard(&inputs[t], &state, policy, rng, ledger.as_deref_mut())?;
                    steps[t] = StepRecord::new(out.decision, out.p);
                    state = out.state;
                }
            }
            outputs[t] = state.h.clone();
        }
        Ok(ValueRun {
            outputs,
            trace: DecisionTrace { steps },
        })
    }

    /// Hard run with a given decision per position (input order).
    pub fn run_values_forced(&self, inputs: &[Vec<f64>], decisions: &[Decision]) -> Result<(ValueRun, Vec<[f64; 2]>)> {
        let mut state = SkimState::zeros(self.d());
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut steps = Vec::with_capacity(inputs.len());
        let mut probs = Vec::with_capacity(inputs.len());
        for (x, &d) in inputs.iter().zip(decisions) {
            match self {
                Recurrent::Lstm(p) => {
                    let (h, c) = lstm_step(p, x, &state.h, &state.c)?;
                    state = SkimState { h, c };
                    probs.push([1.0, 0.0]);
                    steps.push(StepRecord::new(Decision::Read, [1.0, 0.0]));
                }
                Recurrent::Skim(p) => {
                    let pr = p.decision_probs(x, &state.h)?;
                    state = p.apply(x, &state, d)?;
                    probs.push(pr);
                    steps.push(StepRecord::new(d, pr));
                }
            }
            outputs.push(state.h.clone());
        }
        Ok((
            ValueRun {
                outputs,
                trace: DecisionTrace { steps },
            },
            probs,
        ))
    }

    /// Recorded run from a zero state.
    pub fn run_tape(
        &self,
        tape: &mut Tape,
        vars: &RecurrentVars,
        inputs: &[Var],
        mode: &mut StepMode<'_>,
        reverse: bool,
    ) -> Result<TapeRun> {
        let n = inputs.len();
        let d = self.d();
        let mut h = tape.constant(Tensor::zeros(&[d]));
        let mut c = tape.constant(Tensor::zeros(&[d]));
        let mut outputs = vec![h; n];
        let mut skim_probs = Vec::new();
        let mut steps = vec![StepRecord::new(Decision::Read, [1.0, 0.0]); n];
        for t in positions(n, reverse) {
            match (self, vars) {
                (Recurrent::Lstm(p), RecurrentVars::Lstm(v)) => {
                    (h, c) = lstm_step_tape(tape, p, *v, inputs[t], h, c)?;
                }
                (Recurrent::Skim(p), RecurrentVars::Skim(v)) => {
                    let step = match mode {
                        StepMode::ForcedRead => p.step_tape_hard(tape, v, inputs[t], h, c, Decision::Read)?,
                        StepMode::Relaxed { tau, noise } => {
                            let g = noise();
                            p.step_tape_relaxed(tape, v, inputs[t], h, c, *tau, g)?
                        }
                    };
                    let pv = tape.data(step.p);
                    let pr = [pv[0], pv[1]];
                    let decision = match step.r {
                        Some(r) => Decision::from_index(argmax(tape.data(r))),
                        None => Decision::Read,
                    };
                    steps[t] = StepRecord::new(decision, pr);
                    skim_probs.push(tape.index(step.p, 1)?);
                    (h, c) = (step.h, step.c);
                }
                _ => unreachable!("binding built from a different layer kind"),
            }
            outputs[t] = h;
        }
        Ok(TapeRun {
            outputs,
            skim_probs,
            trace: DecisionTrace { steps },
        })
    }
}
