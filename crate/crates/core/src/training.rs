//! Skim loss, Adam, and the pretrain-then-finetune training loop.

use crate::cell::{gumbel_sample, Decision, Policy, SeedRng, TemperatureSchedule, PROB_FLOOR};
use crate::error::{contract, Error, Result};
use crate::models::{ClassifierModel, Evaluation, TaskModel};
use crate::recurrent::StepMode;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Longest sequence [`expected_loss_bruteforce`] will enumerate.
pub const MAX_ENUMERATION_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Weight of the skim term.
    pub gamma: f64,
    pub batch_size: usize,
    /// Length of the forced-read phase, in global steps.
    pub pretrain_steps: u64,
    /// Global steps without validation improvement before stopping.
    pub early_stop_patience: u64,
    pub max_steps: u64,
    pub eval_interval: u64,
    pub seed: u64,
    pub schedule: TemperatureSchedule,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            gamma: 0.0,
            batch_size: 32,
            pretrain_steps: 0,
            early_stop_patience: 3000,
            max_steps: 1000,
            eval_interval: 50,
            seed: 0,
            schedule: TemperatureSchedule::default(),
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    /// Field-level validation; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(contract(format!("{field}: {why}")));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be positive");
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad("gamma", "must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience", "must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be positive");
        }
        if !(self.schedule.rate >= 0.0) || !(self.schedule.floor > 0.0) {
            return bad("tau_rate/tau_floor", "rate must be >= 0 and floor > 0");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam_beta1/adam_beta2", "must lie in [0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm", "must be positive");
            }
        }
        Ok(())
    }
}

/// `L' = L + γ · (1/T) Σ_t −log p_skim_t`, on plain values.
pub fn skim_loss(task_loss: f64, skim_probs: &[f64], gamma: f64) -> Result<f64> {
    if skim_probs.is_empty() {
        return Err(contract("skim loss over zero steps"));
    }
    if gamma == 0.0 {
        return Ok(task_loss);
    }
    let nll: f64 = skim_probs.iter().map(|p| -p.max(PROB_FLOOR).ln()).sum();
    Ok(task_loss + gamma * nll / skim_probs.len() as f64)
}

/// Mean `−log p_skim` over recorded probabilities.
pub fn skim_nll_tape(tape: &mut Tape, skim_probs: &[Var]) -> Result<Var> {
    if skim_probs.is_empty() {
        return Err(contract("skim loss over zero steps"));
    }
    let stacked = tape.concat(skim_probs)?;
    let clamped = tape.clamp_min(stacked, PROB_FLOOR);
    let logs = tape.log(clamped)?;
    let s = tape.sum(logs);
    Ok(tape.scale(s, -1.0 / skim_probs.len() as f64))
}

/// Recorded `L'`; with `γ = 0` the task loss node is returned unchanged.
pub fn skim_loss_tape(tape: &mut Tape, task: Var, skim_probs: &[Var], gamma: f64) -> Result<Var> {
    if skim_probs.is_empty() {
        return Err(contract("skim loss over zero steps"));
    }
    if gamma == 0.0 {
        return Ok(task);
    }
    let nll = skim_nll_tape(tape, skim_probs)?;
    let term = tape.scale(nll, gamma);
    tape.add(task, term)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &[&mut Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters whose `skip` flag is set are
/// left untouched.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    skip: &[bool],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(contract("adam: parameter, gradient and moment counts differ"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::Dimension {
                op: "adam",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                step: state.t,
                reason: "non-finite gradient".into(),
            });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if skip.get(i).copied().unwrap_or(false) {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            let mh = *mj / bc1;
            let vh = *vj / bc2;
            *w -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|v| *v *= s);
    }
    norm
}

/// Mutable training bookkeeping.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub global_step: u64,
    pub adam: AdamState,
    pub best_metric: f64,
    pub best_step: u64,
    pub rng: SeedRng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_metric: f64,
    pub skim_rate: f64,
    pub tau: f64,
    pub flop_r: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    MaxSteps,
    EarlyStop,
}

impl HaltReason {
    pub fn as_str(self) -> &'static str {
        match self {
            HaltReason::MaxSteps => "max_steps",
            HaltReason::EarlyStop => "early_stop",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Best-validation snapshot.
    pub model: M,
    pub history: Vec<MetricRow>,
    pub halt: HaltReason,
    pub best_step: u64,
    pub best_eval: Evaluation,
    pub steps_run: u64,
}

/// Loss and gradients of one mini-batch.
pub struct BatchGrads {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Records the batch-mean loss `mean_i (L_i + γ·skim_i)` and backpropagates.
pub fn batch_gradients<M: TaskModel>(
    model: &M,
    batch: &[&M::Example],
    mode: &mut StepMode<'_>,
    gamma: f64,
) -> Result<BatchGrads> {
    let mut tape = Tape::new();
    let leaves = model.bind(&mut tape);
    let relaxed = matches!(mode, StepMode::Relaxed { .. });
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let rec = model.record_loss(&mut tape, &leaves, ex, mode)?;
        let loss = if relaxed && !rec.skim_probs.is_empty() {
            skim_loss_tape(&mut tape, rec.task, &rec.skim_probs, gamma)?
        } else {
            rec.task
        };
        losses.push(loss);
    }
    let loss = tape.mean(&losses)?;
    let g = tape.backward(loss)?;
    let grads = leaves
        .iter()
        .map(|&v| g.get_or_zeros(v, tape.value(v).len()))
        .collect();
    Ok(BatchGrads {
        loss: tape.scalar(loss),
        grads,
    })
}

fn eval_policy(pretraining: bool) -> Policy {
    if pretraining {
        Policy::Forced(Decision::Read)
    } else {
        Policy::Argmax
    }
}

/// Trains with a forced-read phase of `cfg.pretrain_steps` global steps
/// followed by relaxed Skim steps at `τ = schedule(n)`. Validation runs every
/// `eval_interval` steps with hard argmax decisions (forced reads while
/// pretraining); the best snapshot of the final phase is returned.
pub fn train<M: TaskModel>(
    model: M,
    train_set: &[M::Example],
    val_set: &[M::Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(contract("training and validation sets must be non-empty"));
    }
    let mut model = model;
    let frozen = model.frozen();
    let mut state = TrainState {
        global_step: 0,
        adam: AdamState::for_params(&model.params_mut()),
        best_metric: f64::NEG_INFINITY,
        best_step: 0,
        rng: SeedRng::seed_from_u64(cfg.seed),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut state.rng);
    let mut cursor = 0usize;

    let mut history = Vec::new();
    let mut best: Option<(M, Evaluation)> = None;
    let mut loss_acc = (0.0, 0u64);
    let mut halt = HaltReason::MaxSteps;
    let has_skim = model.has_skim();

    while state.global_step < cfg.max_steps {
        let n = state.global_step;
        let pretraining = has_skim && n < cfg.pretrain_steps;
        if has_skim && n == cfg.pretrain_steps && n > 0 {
            // New phase: the forced-read snapshot is not a Skim model.
            best = None;
            state.best_metric = f64::NEG_INFINITY;
            state.best_step = n;
        }

        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train_set.len()) {
            if cursor == order.len() {
                order.shuffle(&mut state.rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }

        let tau = cfg.schedule.temperature(n);
        let bg = if pretraining || !has_skim {
            batch_gradients(&model, &batch, &mut StepMode::ForcedRead, cfg.gamma)?
        } else {
            let rng = &mut state.rng;
            let mut noise = || [gumbel_sample(rng), gumbel_sample(rng)];
            let mut mode = StepMode::Relaxed { tau, noise: &mut noise };
            batch_gradients(&model, &batch, &mut mode, cfg.gamma)?
        };
        if !bg.loss.is_finite() {
            return Err(Error::Training {
                step: n,
                reason: format!("loss diverged ({})", bg.loss),
            });
        }
        let mut grads = bg.grads;
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                step: n,
                reason: "non-finite gradient".into(),
            });
        }
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        adam_step(&mut model.params_mut(), &grads, &frozen, &mut state.adam, cfg.lr, &cfg.adam).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step: n, reason },
            other => other,
        })?;
        loss_acc.0 += bg.loss;
        loss_acc.1 += 1;
        state.global_step += 1;
        let step = state.global_step;

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let eval = model.evaluate(val_set, eval_policy(pretraining), cfg.seed)?;
            history.push(MetricRow {
                step,
                train_loss: loss_acc.0 / loss_acc.1.max(1) as f64,
                val_metric: eval.metric,
                skim_rate: eval.skim_rate,
                tau,
                flop_r: eval.flop_r,
            });
            loss_acc = (0.0, 0);
            // Ties go to the cheaper model.
            let better = eval.metric > state.best_metric
                || (eval.metric == state.best_metric && best.as_ref().is_some_and(|(_, b)| eval.flop_r > b.flop_r));
            if better {
                state.best_metric = eval.metric;
                state.best_step = step;
                best = Some((model.clone(), eval));
            } else if step - state.best_step >= cfg.early_stop_patience && !pretraining {
                halt = HaltReason::EarlyStop;
                break;
            }
        }
    }

    let (model, best_eval) = match best {
        Some(b) => b,
        None => {
            let eval = model.evaluate(val_set, Policy::Argmax, cfg.seed)?;
            (model, eval)
        }
    };
    Ok(TrainOutcome {
        model,
        history,
        halt,
        best_step: state.best_step,
        best_eval,
        steps_run: state.global_step,
    })
}

/// Writes the metric history as CSV
/// (`step,train_loss,val_metric,skim_rate,tau,flop_r`).
pub fn write_history_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,train_loss,val_metric,skim_rate,tau,flop_r")?;
    for r in rows {
        writeln!(
            f,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.step, r.train_loss, r.val_metric, r.skim_rate, r.tau, r.flop_r
        )?;
    }
    f.flush()?;
    Ok(())
}

/// `Σ_Q L(Q)·P(Q)` over every decision sequence of length `len`, where `f`
/// returns `(L(Q), P(Q))` for one sequence.
pub fn expected_over_decisions<F>(len: usize, mut f: F) -> Result<f64>
where
    F: FnMut(&[Decision]) -> Result<(f64, f64)>,
{
    if len > MAX_ENUMERATION_LEN {
        return Err(Error::Refused(format!(
            "enumerating 2^{len} decision sequences (limit 2^{MAX_ENUMERATION_LEN})"
        )));
    }
    let mut total = 0.0;
    let mut seq = vec![Decision::Read; len];
    for mask in 0u32..(1u32 << len) {
        for (t, d) in seq.iter_mut().enumerate() {
            *d = if mask >> t & 1 == 1 { Decision::Skim } else { Decision::Read };
        }
        let (loss, prob) = f(&seq)?;
        total += loss * prob;
    }
    Ok(total)
}

/// Exact expected classification loss under sampled hard decisions, by
/// running the hard forward pass for every decision sequence.
pub fn expected_loss_bruteforce(model: &ClassifierModel, tokens: &[usize], label: usize) -> Result<f64> {
    expected_over_decisions(tokens.len(), |q| model.loss_with_decisions(tokens, label, q))
}
