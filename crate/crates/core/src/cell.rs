//! LSTM cell and the Skim-LSTM unit.
//!
//! A Skim unit holds a big LSTM (width `d`) and a small LSTM (width `d'`)
//! plus a two-way decision network over `[x; h]`. On a read step the big
//! cell replaces the whole state; on a skim step the small cell rewrites the
//! first `d'` components of both `h` and `c` and the rest is carried over.
//! Training replaces the hard choice with a Gumbel-softmax blend of the two
//! candidate states.
//!
//! Stacked gate weights are laid out in `i, f, o, g` row order
//! ([`GATE_ORDER`]): input, forget, output gates, then the candidate.

use crate::error::{contract, Error, Result};
use crate::flops::{FlopLedger, SkimDims};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type SeedRng = ChaCha8Rng;

pub const GATE_ORDER: &str = "ifog";
/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
const UNIFORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Read,
    Skim,
}

impl Decision {
    /// Zero-based position in the probability vector.
    pub fn index(self) -> usize {
        match self {
            Decision::Read => 0,
            Decision::Skim => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Decision::Read
        } else {
            Decision::Skim
        }
    }
}

/// How a hard step turns decision probabilities into a decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Policy {
    /// Draw from the decision distribution.
    Sample,
    /// Most probable choice; ties read.
    Argmax,
    /// Read iff `p_read >= θ`.
    Threshold(f64),
    /// Ignore the probabilities.
    Forced(Decision),
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        if let Policy::Threshold(t) = *self {
            if !(0.0..=1.0).contains(&t) {
                return Err(contract(format!("threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn decide<R: Rng + ?Sized>(&self, p: [f64; 2], rng: &mut R) -> Decision {
        match *self {
            Policy::Sample => {
                let u: f64 = rng.random();
                if u < p[0] {
                    Decision::Read
                } else {
                    Decision::Skim
                }
            }
            Policy::Argmax => {
                if p[0] >= p[1] {
                    Decision::Read
                } else {
                    Decision::Skim
                }
            }
            Policy::Threshold(t) => {
                if p[0] >= t {
                    Decision::Read
                } else {
                    Decision::Skim
                }
            }
            Policy::Forced(d) => d,
        }
    }
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let s = if cols == 0 { 0.0 } else { 1.0 / (cols as f64).sqrt() };
    let data = (0..rows * cols).map(|_| rng.random_range(-s..=s)).collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `[4·d_out × (d_in + d_read)]`, rows in `i, f, o, g` order.
    pub w: Tensor,
    pub b: Tensor,
    pub d_in: usize,
    pub d_out: usize,
    pub d_read: usize,
}

impl LstmParams {
    pub fn zeros(d_in: usize, d_out: usize, d_read: usize) -> Self {
        Self {
            w: Tensor::zeros(&[4 * d_out, d_in + d_read]),
            b: Tensor::zeros(&[4 * d_out]),
            d_in,
            d_out,
            d_read,
        }
    }

    /// Uniform `±1/√fan_in` weights, zero biases with the forget gate at 1.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, d_read: usize, rng: &mut R) -> Self {
        let w = uniform_matrix(4 * d_out, d_in + d_read, rng);
        let mut b = Tensor::zeros(&[4 * d_out]);
        b.data_mut()[d_out..2 * d_out].iter_mut().for_each(|v| *v = 1.0);
        Self {
            w,
            b,
            d_in,
            d_out,
            d_read,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.d_in + self.d_read
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.shape() != [4 * self.d_out, self.fan_in()] || self.b.shape() != [4 * self.d_out] {
            return Err(Error::Dimension {
                op: "lstm params",
                lhs: self.w.shape().to_vec(),
                rhs: vec![4 * self.d_out, self.fan_in()],
            });
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmVars {
        LstmVars {
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
        }
    }
}

/// An [`LstmParams`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w: Var,
    pub b: Var,
}

fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension {
            op,
            lhs: vec![got],
            rhs: vec![want],
        });
    }
    Ok(())
}

/// One LSTM step on plain values: `z = W·[x; h_read] + b`,
/// `c' = σ(f)∘c + σ(i)∘tanh(g)`, `h' = σ(o)∘tanh(c')`.
pub fn lstm_step(
    params: &LstmParams,
    x: &[f64],
    h_read: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("lstm_step x", x.len(), params.d_in)?;
    check_len("lstm_step h", h_read.len(), params.d_read)?;
    check_len("lstm_step c", c_prev.len(), params.d_out)?;
    let d = params.d_out;
    let mut xh = Vec::with_capacity(params.fan_in());
    xh.extend_from_slice(x);
    xh.extend_from_slice(h_read);
    let mut z = vec![0.0; 4 * d];
    tensor::matvec_into(params.w.data(), 4 * d, params.fan_in(), &xh, &mut z);
    for (zi, bi) in z.iter_mut().zip(params.b.data()) {
        *zi += bi;
    }
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    for j in 0..d {
        let i = tensor::sigmoid(z[j]);
        let f = tensor::sigmoid(z[d + j]);
        let o = tensor::sigmoid(z[2 * d + j]);
        let g = z[3 * d + j].tanh();
        c[j] = f * c_prev[j] + i * g;
        h[j] = o * c[j].tanh();
    }
    Ok((h, c))
}

/// Recorded LSTM step; numerically identical to [`lstm_step`].
pub fn lstm_step_tape(
    tape: &mut Tape,
    params: &LstmParams,
    vars: LstmVars,
    x: Var,
    h_read: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    check_len("lstm_step x", tape.value(x).len(), params.d_in)?;
    check_len("lstm_step h", tape.value(h_read).len(), params.d_read)?;
    check_len("lstm_step c", tape.value(c_prev).len(), params.d_out)?;
    let d = params.d_out;
    let xh = tape.concat2(x, h_read)?;
    let z = tape.matvec(vars.w, xh)?;
    let z = tape.add(z, vars.b)?;
    let zi = tape.slice(z, 0, d)?;
    let zf = tape.slice(z, d, 2 * d)?;
    let zo = tape.slice(z, 2 * d, 3 * d)?;
    let zg = tape.slice(z, 3 * d, 4 * d)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let o = tape.sigmoid(zo);
    let g = tape.tanh(zg);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkimState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl SkimState {
    pub fn zeros(d: usize) -> Self {
        Self {
            h: vec![0.0; d],
            c: vec![0.0; d],
        }
    }
}

/// Result of a hard (non-differentiable) Skim step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: SkimState,
    /// `[p_read, p_skim]`.
    pub p: [f64; 2],
    pub decision: Decision,
}

/// A recorded step: new state, decision probabilities and, for relaxed
/// steps, the Gumbel-softmax weights and the noise that produced them.
#[derive(Clone, Copy, Debug)]
pub struct TapeStep {
    pub h: Var,
    pub c: Var,
    pub p: Var,
    pub r: Option<Var>,
    pub noise: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkimUnitParams {
    pub big: LstmParams,
    pub small: LstmParams,
    /// `[2 × (d_in + d)]`; row 0 scores "read", row 1 "skim".
    pub decision_w: Tensor,
    pub decision_b: Tensor,
}

/// A [`SkimUnitParams`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SkimVars {
    pub big: LstmVars,
    pub small: LstmVars,
    pub decision_w: Var,
    pub decision_b: Var,
}

impl SkimUnitParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d: usize, d_small: usize, rng: &mut R) -> Result<Self> {
        if d_small >= d {
            return Err(contract(format!("small width {d_small} must be below {d}")));
        }
        let big = LstmParams::init(d_in, d, d, rng);
        let small = LstmParams::init(d_in, d_small, d, rng);
        let decision_w = uniform_matrix(2, d_in + d, rng);
        Ok(Self {
            big,
            small,
            decision_w,
            decision_b: Tensor::zeros(&[2]),
        })
    }

    pub fn d_in(&self) -> usize {
        self.big.d_in
    }

    pub fn d(&self) -> usize {
        self.big.d_out
    }

    pub fn d_small(&self) -> usize {
        self.small.d_out
    }

    pub fn dims(&self) -> SkimDims {
        SkimDims::new(self.d_in(), self.d(), self.d_small())
    }

    pub fn validate(&self) -> Result<()> {
        self.big.validate()?;
        self.small.validate()?;
        let (d_in, d) = (self.d_in(), self.d());
        let ok = self.big.d_read == d
            && self.small.d_in == d_in
            && self.small.d_read == d
            && self.small.d_out <= d
            && self.decision_w.shape() == [2, d_in + d]
            && self.decision_b.shape() == [2];
        if !ok {
            return Err(Error::Dimension {
                op: "skim params",
                lhs: self.decision_w.shape().to_vec(),
                rhs: vec![2, d_in + d],
            });
        }
        Ok(())
    }

    /// The same unit with the small cell removed: skim steps become skips.
    pub fn as_skip(&self) -> Self {
        Self {
            small: LstmParams::zeros(self.d_in(), 0, self.d()),
            ..self.clone()
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> SkimVars {
        SkimVars {
            big: self.big.bind(tape),
            small: self.small.bind(tape),
            decision_w: tape.leaf(self.decision_w.clone()),
            decision_b: tape.leaf(self.decision_b.clone()),
        }
    }

    /// `softmax(W·[x; h] + b)` as `[p_read, p_skim]`.
    pub fn decision_probs(&self, x: &[f64], h: &[f64]) -> Result<[f64; 2]> {
        check_len("decision x", x.len(), self.d_in())?;
        check_len("decision h", h.len(), self.d())?;
        let mut xh = Vec::with_capacity(x.len() + h.len());
        xh.extend_from_slice(x);
        xh.extend_from_slice(h);
        let mut z = [0.0; 2];
        tensor::matvec_into(self.decision_w.data(), 2, xh.len(), &xh, &mut z);
        for (zi, bi) in z.iter_mut().zip(self.decision_b.data()) {
            *zi += bi;
        }
        let mut p = [0.0; 2];
        tensor::softmax_into(&z, &mut p);
        Ok(p)
    }

    /// Hard step: pick a branch by `policy` and update the state.
    pub fn step_hard<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        state: &SkimState,
        policy: Policy,
        rng: &mut R,
        ledger: Option<&mut FlopLedger>,
    ) -> Result<StepOutcome> {
        policy.validate()?;
        let p = self.decision_probs(x, &state.h)?;
        let decision = policy.decide(p, rng);
        let state = self.apply(x, state, decision)?;
        if let Some(ledger) = ledger {
            ledger.charge_skim_unit(self.dims(), decision);
        }
        Ok(StepOutcome { state, p, decision })
    }

    /// State update for a given decision.
    pub fn apply(&self, x: &[f64], state: &SkimState, decision: Decision) -> Result<SkimState> {
        match decision {
            Decision::Read => {
                let (h, c) = lstm_step(&self.big, x, &state.h, &state.c)?;
                Ok(SkimState { h, c })
            }
            Decision::Skim => {
                let ds = self.d_small();
                let (hs, cs) = lstm_step(&self.small, x, &state.h, &state.c[..ds])?;
                let mut h = hs;
                h.extend_from_slice(&state.h[ds..]);
                let mut c = cs;
                c.extend_from_slice(&state.c[ds..]);
                Ok(SkimState { h, c })
            }
        }
    }

    fn decision_probs_tape(&self, tape: &mut Tape, vars: &SkimVars, x: Var, h: Var) -> Result<Var> {
        let xh = tape.concat2(x, h)?;
        let z = tape.matvec(vars.decision_w, xh)?;
        let z = tape.add(z, vars.decision_b)?;
        tape.softmax(z)
    }

    /// `(h̃², c̃²)`: small-cell output over the first `d'` components.
    fn skim_candidate(&self, tape: &mut Tape, vars: &SkimVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (ds, d) = (self.d_small(), self.d());
        let c_head = tape.slice(c, 0, ds)?;
        let (hs, cs) = lstm_step_tape(tape, &self.small, vars.small, x, h, c_head)?;
        let h_tail = tape.slice(h, ds, d)?;
        let c_tail = tape.slice(c, ds, d)?;
        let h2 = tape.concat2(hs, h_tail)?;
        let c2 = tape.concat2(cs, c_tail)?;
        Ok((h2, c2))
    }

    /// Recorded hard step with a fixed decision. Only the taken branch is
    /// recorded, so the decision network gets no gradient from the state.
    pub fn step_tape_hard(
        &self,
        tape: &mut Tape,
        vars: &SkimVars,
        x: Var,
        h: Var,
        c: Var,
        decision: Decision,
    ) -> Result<TapeStep> {
        check_len("skim step x", tape.value(x).len(), self.d_in())?;
        let p = self.decision_probs_tape(tape, vars, x, h)?;
        let (h, c) = match decision {
            Decision::Read => lstm_step_tape(tape, &self.big, vars.big, x, h, c)?,
            Decision::Skim => self.skim_candidate(tape, vars, x, h, c)?,
        };
        Ok(TapeStep {
            h,
            c,
            p,
            r: None,
            noise: None,
        })
    }

    /// Relaxed step: both candidates blended by Gumbel-softmax weights `r`,
    /// applied to `h` and `c` alike.
    #[allow(clippy::too_many_arguments)]
    pub fn step_tape_relaxed(
        &self,
        tape: &mut Tape,
        vars: &SkimVars,
        x: Var,
        h: Var,
        c: Var,
        tau: f64,
        noise: [f64; 2],
    ) -> Result<TapeStep> {
        check_tau(tau)?;
        check_len("skim step x", tape.value(x).len(), self.d_in())?;
        let p = self.decision_probs_tape(tape, vars, x, h)?;
        let r = gumbel_softmax_tape(tape, p, &noise, tau)?;
        let (h1, c1) = lstm_step_tape(tape, &self.big, vars.big, x, h, c)?;
        let (h2, c2) = self.skim_candidate(tape, vars, x, h, c)?;
        let r_read = tape.index(r, 0)?;
        let r_skim = tape.index(r, 1)?;
        let a = tape.scale_by(r_read, h1)?;
        let b = tape.scale_by(r_skim, h2)?;
        let h = tape.add(a, b)?;
        let a = tape.scale_by(r_read, c1)?;
        let b = tape.scale_by(r_skim, c2)?;
        let c = tape.add(a, b)?;
        Ok(TapeStep {
            h,
            c,
            p,
            r: Some(r),
            noise: Some(noise),
        })
    }

    /// [`Self::step_tape_relaxed`] with fresh Gumbel noise from `rng`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_tape_relaxed_sampled<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &SkimVars,
        x: Var,
        h: Var,
        c: Var,
        tau: f64,
        rng: &mut R,
    ) -> Result<TapeStep> {
        let noise = [gumbel_sample(rng), gumbel_sample(rng)];
        self.step_tape_relaxed(tape, vars, x, h, c, tau, noise)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `−log(−log u)` with `u` clamped into `[ε, 1 − ε]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

pub fn gumbel_sample<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    gumbel_from_uniform(rng.random::<f64>())
}

/// `r = softmax((log p + g) / τ)` with `p` clamped at [`PROB_FLOOR`].
pub fn gumbel_softmax(p: &[f64], g: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if p.len() != g.len() {
        return Err(Error::Dimension {
            op: "gumbel_softmax",
            lhs: vec![p.len()],
            rhs: vec![g.len()],
        });
    }
    let inv = 1.0 / tau;
    let y: Vec<f64> = p
        .iter()
        .zip(g)
        .map(|(&pi, &gi)| (pi.max(PROB_FLOOR).ln() + gi) * inv)
        .collect();
    tensor::softmax(&y)
}

/// Recorded [`gumbel_softmax`], differentiable with respect to `p`.
pub fn gumbel_softmax_tape(tape: &mut Tape, p: Var, g: &[f64], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let clamped = tape.clamp_min(p, PROB_FLOOR);
    let logp = tape.log(clamped)?;
    let y = tape.add_const(logp, g)?;
    let y = tape.scale(y, 1.0 / tau);
    tape.softmax(y)
}

/// `τ(n) = max(floor, exp(−rate·n))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub rate: f64,
    pub floor: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            rate: 1e-4,
            floor: 0.5,
        }
    }
}

impl TemperatureSchedule {
    pub fn temperature(&self, step: u64) -> f64 {
        self.floor.max((-self.rate * step as f64).exp())
    }
}
