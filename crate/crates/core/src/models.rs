//! Task models built on [`Recurrent`] layers: a text classifier that projects
//! the last hidden state, and a small LSTM+attention span-QA model with two
//! bidirectional layers. Either layer kind can be dropped in without changing
//! shapes.

use crate::cell::{Decision, LstmParams, Policy, SeedRng, SkimUnitParams};
use crate::error::{contract, Error, Result};
use crate::flops::{flops_lstm_step, flops_skim_step, FlopLedger, SkimDims};
use crate::recurrent::{Recurrent, StepMode, TapeRun};
use crate::tape::{Tape, Var};
use crate::tensor::{self, argmax, Tensor};
use crate::trace::{DecisionTrace, ModelTrace};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Scalar summary of a model over a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Accuracy for classification, exact match for span QA.
    pub metric: f64,
    pub skim_rate: f64,
    pub flop_r: f64,
    /// Skim rate per recurrent direction.
    pub per_direction: Vec<(String, f64)>,
    /// Mean token-overlap F1 of predicted spans (span QA only).
    #[serde(default)]
    pub f1: Option<f64>,
}

/// Loss terms recorded for one example.
pub struct RecordedLoss {
    pub task: Var,
    /// `p_skim` for every Skim step of every direction.
    pub skim_probs: Vec<Var>,
    pub trace: ModelTrace,
}

/// What the training loop needs from a model.
pub trait TaskModel: Clone {
    type Example;

    /// Parameters in a fixed order with weight-file names.
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    /// Same order as [`Self::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Per parameter, whether the optimizer leaves it alone.
    fn frozen(&self) -> Vec<bool>;
    /// Records the forward pass for one example on `tape`, given leaves
    /// registered in parameter order.
    fn record_loss(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        example: &Self::Example,
        mode: &mut StepMode<'_>,
    ) -> Result<RecordedLoss>;
    fn evaluate(&self, data: &[Self::Example], policy: Policy, seed: u64) -> Result<Evaluation>;
    fn has_skim(&self) -> bool;
    /// The same model with every small cell removed, so skims become skips.
    fn as_skip(&self) -> Self;

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }
}

fn init_embedding<R: Rng + ?Sized>(vocab: usize, d_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, 0.1).expect("valid sigma");
    let mut data: Vec<f64> = (0..vocab * d_in).map(|_| normal.sample(rng)).collect();
    // PAD
    data[..d_in.min(vocab * d_in)].iter_mut().for_each(|v| *v = 0.0);
    Tensor::matrix(vocab, d_in, data).expect("sized by construction")
}

fn new_layer<R: Rng + ?Sized>(d_in: usize, d: usize, d_small: Option<usize>, rng: &mut R) -> Result<Recurrent> {
    Ok(match d_small {
        Some(ds) => Recurrent::Skim(SkimUnitParams::init(d_in, d, ds, rng)?),
        None => Recurrent::Lstm(LstmParams::init(d_in, d, d, rng)),
    })
}

fn embed_rows(embedding: &Tensor, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
    ids.iter()
        .map(|&id| {
            if id >= embedding.rows() {
                Err(Error::Index {
                    op: "embedding",
                    detail: format!("token id {id} with vocabulary {}", embedding.rows()),
                })
            } else {
                Ok(embedding.row(id).to_vec())
            }
        })
        .collect()
}

fn embed_tape(tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Vec<Var>> {
    ids.iter().map(|&id| tape.gather_row(table, id)).collect()
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; w.rows()];
    tensor::matvec_into(w.data(), w.rows(), w.cols(), x, &mut z);
    for (zi, bi) in z.iter_mut().zip(b.data()) {
        *zi += bi;
    }
    z
}

fn skip_layer(r: &Recurrent) -> Recurrent {
    match r {
        Recurrent::Skim(p) => Recurrent::Skim(p.as_skip()),
        Recurrent::Lstm(p) => Recurrent::Lstm(p.clone()),
    }
}

/// Skim rate and Flop-R over `(dims, trace)` pairs; plain LSTM layers
/// count as full-cost reads with no decision overhead.
pub fn summarize_traces(layers: &[(&Recurrent, &DecisionTrace)]) -> (f64, f64) {
    let (mut steps, mut skims, mut baseline, mut actual) = (0u64, 0u64, 0u64, 0u64);
    for (layer, trace) in layers {
        let dims: SkimDims = layer.dims();
        let full = flops_lstm_step(dims.d_in, dims.d, dims.d);
        steps += trace.len() as u64;
        baseline += trace.len() as u64 * full;
        if layer.is_skim() {
            skims += trace.skim_count() as u64;
            actual += trace.decisions().map(|d| flops_skim_step(dims, d)).sum::<u64>();
        } else {
            actual += trace.len() as u64 * full;
        }
    }
    if steps == 0 {
        return (0.0, 1.0);
    }
    (skims as f64 / steps as f64, baseline as f64 / actual as f64)
}

// ---------------------------------------------------------------------------
// Classifier

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    /// `[V × d_in]`, row 0 is PAD.
    pub embedding: Tensor,
    pub rnn: Recurrent,
    /// `[C × d]`.
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub freeze_embedding: bool,
}

/// A token-id sequence with its class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub label: usize,
    pub tokens: Vec<usize>,
}

impl ClassifierModel {
    /// `d_small = None` builds a plain LSTM classifier.
    pub fn new<R: Rng + ?Sized>(
        vocab: usize,
        n_classes: usize,
        d_in: usize,
        d: usize,
        d_small: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab == 0 || n_classes < 2 {
            return Err(contract(format!(
                "classifier needs a vocabulary and at least 2 classes (got V={vocab}, C={n_classes})"
            )));
        }
        let embedding = init_embedding(vocab, d_in, rng);
        let rnn = new_layer(d_in, d, d_small, rng)?;
        let s = 1.0 / (d as f64).sqrt();
        let proj_w = Tensor::matrix(
            n_classes,
            d,
            (0..n_classes * d).map(|_| rng.random_range(-s..=s)).collect(),
        )?;
        Ok(Self {
            embedding,
            rnn,
            proj_w,
            proj_b: Tensor::zeros(&[n_classes]),
            freeze_embedding: false,
        })
    }

    /// Same embedding and head around a different recurrent layer.
    pub fn with_rnn(&self, rnn: Recurrent) -> Self {
        Self { rnn, ..self.clone() }
    }

    pub fn n_classes(&self) -> usize {
        self.proj_w.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn validate(&self) -> Result<()> {
        self.rnn.validate()?;
        if self.embedding.cols() != self.rnn.d_in() || self.proj_w.cols() != self.rnn.d() {
            return Err(Error::Dimension {
                op: "classifier",
                lhs: self.proj_w.shape().to_vec(),
                rhs: vec![self.n_classes(), self.rnn.d()],
            });
        }
        Ok(())
    }

    fn logits(&self, tokens: &[usize], policy: Policy, rng: &mut SeedRng, ledger: Option<&mut FlopLedger>) -> Result<(Vec<f64>, DecisionTrace)> {
        if tokens.is_empty() {
            return Err(contract("empty token sequence"));
        }
        let xs = embed_rows(&self.embedding, tokens)?;
        let run = self.rnn.run_values(&xs, policy, rng, false, ledger)?;
        let last = run.outputs.last().expect("non-empty");
        Ok((affine(&self.proj_w, &self.proj_b, last), run.trace))
    }

    /// Class probabilities from the last hidden state, plus the decision trace.
    pub fn classify(&self, tokens: &[usize], policy: Policy, rng: &mut SeedRng) -> Result<(Vec<f64>, ModelTrace)> {
        self.classify_counted(tokens, policy, rng, None)
    }

    pub fn classify_counted(
        &self,
        tokens: &[usize],
        policy: Policy,
        rng: &mut SeedRng,
        ledger: Option<&mut FlopLedger>,
    ) -> Result<(Vec<f64>, ModelTrace)> {
        let (z, trace) = self.logits(tokens, policy, rng, ledger)?;
        Ok((tensor::softmax(&z)?, ModelTrace::single("rnn", trace)))
    }

    /// Cross-entropy loss and sequence probability `Π p[Q_t]` under a fixed
    /// decision sequence.
    pub fn loss_with_decisions(&self, tokens: &[usize], label: usize, decisions: &[Decision]) -> Result<(f64, f64)> {
        if decisions.len() != tokens.len() {
            return Err(contract("one decision per token"));
        }
        let xs = embed_rows(&self.embedding, tokens)?;
        let (run, probs) = self.rnn.run_values_forced(&xs, decisions)?;
        let z = affine(&self.proj_w, &self.proj_b, run.outputs.last().ok_or_else(|| contract("empty sequence"))?);
        let loss = tensor::log_sum_exp(&z) - z[label];
        let prob = probs
            .iter()
            .zip(decisions)
            .map(|(p, d)| p[d.index()])
            .product();
        Ok((loss, prob))
    }

    /// Loss of one hard run with decisions sampled from the model.
    pub fn sampled_loss(&self, tokens: &[usize], label: usize, rng: &mut SeedRng) -> Result<f64> {
        let (z, _) = self.logits(tokens, Policy::Sample, rng, None)?;
        Ok(tensor::log_sum_exp(&z) - z[label])
    }
}

impl TaskModel for ClassifierModel {
    type Example = LabeledExample;

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        v.extend(self.rnn.named_params(""));
        v.push(("head.W".to_string(), &self.proj_w));
        v.push(("head.b".to_string(), &self.proj_b));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embedding];
        v.extend(self.rnn.params_mut());
        v.push(&mut self.proj_w);
        v.push(&mut self.proj_b);
        v
    }

    fn frozen(&self) -> Vec<bool> {
        let mut f = vec![self.freeze_embedding];
        f.extend(std::iter::repeat_n(false, self.rnn.param_count() + 2));
        f
    }

    fn record_loss(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        example: &LabeledExample,
        mode: &mut StepMode<'_>,
    ) -> Result<RecordedLoss> {
        let n = self.rnn.param_count();
        let table = leaves[0];
        let rnn_vars = self.rnn.vars_from(&leaves[1..1 + n]);
        let (w, b) = (leaves[1 + n], leaves[2 + n]);
        if example.tokens.is_empty() {
            return Err(contract("empty token sequence"));
        }
        let xs = embed_tape(tape, table, &example.tokens)?;
        let TapeRun {
            outputs,
            skim_probs,
            trace,
        } = self.rnn.run_tape(tape, &rnn_vars, &xs, mode, false)?;
        let last = *outputs.last().expect("non-empty");
        let z = tape.matvec(w, last)?;
        let z = tape.add(z, b)?;
        let task = tape.cross_entropy(z, example.label)?;
        Ok(RecordedLoss {
            task,
            skim_probs,
            trace: ModelTrace::single("rnn", trace),
        })
    }

    fn evaluate(&self, data: &[LabeledExample], policy: Policy, seed: u64) -> Result<Evaluation> {
        let mut rng = SeedRng::seed_from_u64(seed);
        let mut correct = 0usize;
        let mut traces = Vec::with_capacity(data.len());
        for ex in data {
            let (z, trace) = self.logits(&ex.tokens, policy, &mut rng, None)?;
            if argmax(&z) == ex.label {
                correct += 1;
            }
            traces.push(trace);
        }
        let pairs: Vec<_> = traces.iter().map(|t| (&self.rnn, t)).collect();
        let (skim_rate, flop_r) = summarize_traces(&pairs);
        Ok(Evaluation {
            metric: correct as f64 / data.len().max(1) as f64,
            skim_rate,
            flop_r,
            per_direction: vec![("rnn".to_string(), skim_rate)],
            f1: None,
        })
    }

    fn has_skim(&self) -> bool {
        self.rnn.is_skim()
    }

    fn as_skip(&self) -> Self {
        self.with_rnn(skip_layer(&self.rnn))
    }
}

// ---------------------------------------------------------------------------
// Span QA

pub const QA_DIRECTIONS: [&str; 4] = ["l1.fw", "l1.bw", "l2.fw", "l2.bw"];

/// Context/question ids with a gold answer span `[start, end]` (inclusive).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanExample {
    pub context: Vec<usize>,
    pub question: Vec<usize>,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaAttentionModel {
    pub embedding: Tensor,
    /// `[3·d_in]` scoring `[x_t; q_i; x_t∘q_i]`.
    pub att_w: Tensor,
    /// `[layer][direction]`, two layers, forward then backward.
    pub layers: Vec<[Recurrent; 2]>,
    pub w_start: Tensor,
    pub w_end: Tensor,
    pub freeze_embedding: bool,
}

#[derive(Clone, Debug)]
pub struct QaOutput {
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
    pub trace: ModelTrace,
}

impl QaAttentionModel {
    pub fn new<R: Rng + ?Sized>(vocab: usize, d_in: usize, d: usize, d_small: Option<usize>, rng: &mut R) -> Result<Self> {
        if vocab == 0 {
            return Err(contract("empty vocabulary"));
        }
        let embedding = init_embedding(vocab, d_in, rng);
        let s = 1.0 / ((3 * d_in) as f64).sqrt();
        let att_w = Tensor::vector((0..3 * d_in).map(|_| rng.random_range(-s..=s)).collect());
        let mut layers = Vec::with_capacity(2);
        for width in [3 * d_in, 2 * d] {
            layers.push([new_layer(width, d, d_small, rng)?, new_layer(width, d, d_small, rng)?]);
        }
        let s = 1.0 / ((2 * d) as f64).sqrt();
        let w_start = Tensor::vector((0..2 * d).map(|_| rng.random_range(-s..=s)).collect());
        let w_end = Tensor::vector((0..2 * d).map(|_| rng.random_range(-s..=s)).collect());
        Ok(Self {
            embedding,
            att_w,
            layers,
            w_start,
            w_end,
            freeze_embedding: false,
        })
    }

    pub fn d_in(&self) -> usize {
        self.embedding.cols()
    }

    pub fn d(&self) -> usize {
        self.layers[0][0].d()
    }

    pub fn directions(&self) -> impl Iterator<Item = (&'static str, &Recurrent)> {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .zip(QA_DIRECTIONS)
            .map(|(r, n)| (n, r))
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, d) = (self.d_in(), self.d());
        let mut ok = self.layers.len() == 2 && self.att_w.len() == 3 * d_in && self.w_start.len() == 2 * d && self.w_end.len() == 2 * d;
        for (i, layer) in self.layers.iter().enumerate() {
            let want = if i == 0 { 3 * d_in } else { 2 * d };
            for r in layer {
                r.validate()?;
                ok &= r.d_in() == want && r.d() == d;
            }
        }
        if !ok {
            return Err(Error::Dimension {
                op: "qa model",
                lhs: vec![d_in, d],
                rhs: vec![self.att_w.len(), self.w_start.len()],
            });
        }
        Ok(())
    }

    fn attention_weights(&self, xs: &[Vec<f64>], qs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let w = self.att_w.data();
        let d_in = self.d_in();
        xs.iter()
            .map(|x| {
                let scores: Vec<f64> = qs
                    .iter()
                    .map(|q| {
                        let prod: Vec<f64> = x.iter().zip(q).map(|(a, b)| a * b).collect();
                        tensor::dot(&w[..d_in], x)
                            + tensor::dot(&w[d_in..2 * d_in], q)
                            + tensor::dot(&w[2 * d_in..], &prod)
                    })
                    .collect();
                tensor::softmax(&scores).expect("non-empty question")
            })
            .collect()
    }

    /// Question-aware inputs `[x_t; u_t; x_t∘u_t]` with `u_t` the
    /// attention-weighted question vector.
    fn attend_values(&self, xs: &[Vec<f64>], qs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d_in = self.d_in();
        xs.iter()
            .zip(self.attention_weights(xs, qs))
            .map(|(x, a)| {
                let mut u = vec![0.0; d_in];
                for (ai, q) in a.iter().zip(qs) {
                    for (uj, qj) in u.iter_mut().zip(q) {
                        *uj += ai * qj;
                    }
                }
                let mut feat = x.clone();
                feat.extend_from_slice(&u);
                feat.extend(x.iter().zip(&u).map(|(a, b)| a * b));
                feat
            })
            .collect()
    }

    /// Attention weights over question words for each context position.
    pub fn attention(&self, context: &[usize], question: &[usize]) -> Result<Vec<Vec<f64>>> {
        if question.is_empty() {
            return Err(contract("empty question"));
        }
        let xs = embed_rows(&self.embedding, context)?;
        let qs = embed_rows(&self.embedding, question)?;
        Ok(self.attention_weights(&xs, &qs))
    }

    /// Start/end distributions over context positions and per-direction traces.
    pub fn qa_attend(&self, context: &[usize], question: &[usize], policy: Policy, rng: &mut SeedRng) -> Result<QaOutput> {
        self.qa_attend_counted(context, question, policy, rng, None)
    }

    pub fn qa_attend_counted(
        &self,
        context: &[usize],
        question: &[usize],
        policy: Policy,
        rng: &mut SeedRng,
        mut ledger: Option<&mut FlopLedger>,
    ) -> Result<QaOutput> {
        if question.is_empty() {
            return Err(contract("empty question"));
        }
        if context.is_empty() {
            return Err(contract("empty context"));
        }
        let xs = embed_rows(&self.embedding, context)?;
        let qs = embed_rows(&self.embedding, question)?;
        let mut inputs = self.attend_values(&xs, &qs);
        let mut traces = Vec::with_capacity(4);
        for (li, layer) in self.layers.iter().enumerate() {
            let fw = layer[0].run_values(&inputs, policy, rng, false, ledger.as_deref_mut())?;
            let bw = layer[1].run_values(&inputs, policy, rng, true, ledger.as_deref_mut())?;
            inputs = fw
                .outputs
                .iter()
                .zip(&bw.outputs)
                .map(|(a, b)| {
                    let mut o = a.clone();
                    o.extend_from_slice(b);
                    o
                })
                .collect();
            traces.push((QA_DIRECTIONS[2 * li].to_string(), fw.trace));
            traces.push((QA_DIRECTIONS[2 * li + 1].to_string(), bw.trace));
        }
        let start: Vec<f64> = inputs.iter().map(|o| tensor::dot(self.w_start.data(), o)).collect();
        let end: Vec<f64> = inputs.iter().map(|o| tensor::dot(self.w_end.data(), o)).collect();
        Ok(QaOutput {
            start_probs: tensor::softmax(&start)?,
            end_probs: tensor::softmax(&end)?,
            trace: ModelTrace { directions: traces },
        })
    }

    /// Per-direction skim rates, layer by layer.
    pub fn layer_skim_rates(trace: &ModelTrace) -> Vec<(String, f64)> {
        trace
            .directions
            .iter()
            .map(|(n, t)| (n.clone(), t.skim_count() as f64 / t.len().max(1) as f64))
            .collect()
    }
}

/// Best `(s, e)` by `start[s]·end[e]` with `s ≤ e ≤ s + max_span`.
pub fn answer_span(start: &[f64], end: &[f64], max_span: usize) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for (s, &ps) in start.iter().enumerate() {
        let hi = (s + max_span).min(end.len().saturating_sub(1));
        for (e, &pe) in end.iter().enumerate().take(hi + 1).skip(s) {
            let score = ps * pe;
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    best
}

/// Overlap F1 between two inclusive position spans.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if hi < lo {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let precision = overlap / (pred.1 - pred.0 + 1) as f64;
    let recall = overlap / (gold.1 - gold.0 + 1) as f64;
    2.0 * precision * recall / (precision + recall)
}

pub const DEFAULT_MAX_SPAN: usize = 10;

impl TaskModel for QaAttentionModel {
    type Example = SpanExample;

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("embedding".to_string(), &self.embedding),
            ("attention.w".to_string(), &self.att_w),
        ];
        for (name, r) in self.directions() {
            v.extend(r.named_params(&format!("{name}.")));
        }
        v.push(("head.start".to_string(), &self.w_start));
        v.push(("head.end".to_string(), &self.w_end));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embedding, &mut self.att_w];
        for layer in &mut self.layers {
            for r in layer.iter_mut() {
                v.extend(r.params_mut());
            }
        }
        v.push(&mut self.w_start);
        v.push(&mut self.w_end);
        v
    }

    fn frozen(&self) -> Vec<bool> {
        let n: usize = self.directions().map(|(_, r)| r.param_count()).sum();
        let mut f = vec![self.freeze_embedding];
        f.extend(std::iter::repeat_n(false, 1 + n + 2));
        f
    }

    fn record_loss(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        ex: &SpanExample,
        mode: &mut StepMode<'_>,
    ) -> Result<RecordedLoss> {
        if ex.question.is_empty() {
            return Err(contract("empty question"));
        }
        if ex.context.is_empty() || ex.end >= ex.context.len() || ex.start > ex.end {
            return Err(contract("gold span outside the context"));
        }
        let table = leaves[0];
        let att_w = leaves[1];
        let mut off = 2;
        let mut dir_vars = Vec::with_capacity(4);
        for (_, r) in self.directions() {
            dir_vars.push(r.vars_from(&leaves[off..off + r.param_count()]));
            off += r.param_count();
        }
        let (w_start, w_end) = (leaves[off], leaves[off + 1]);

        let xs = embed_tape(tape, table, &ex.context)?;
        let qs = embed_tape(tape, table, &ex.question)?;
        let mut inputs = Vec::with_capacity(xs.len());
        for &x in &xs {
            let mut scores = Vec::with_capacity(qs.len());
            for &q in &qs {
                let xq = tape.mul(x, q)?;
                let feat = tape.concat(&[x, q, xq])?;
                scores.push(tape.dot(att_w, feat)?);
            }
            let scores = tape.concat(&scores)?;
            let a = tape.softmax(scores)?;
            let mut u: Option<Var> = None;
            for (i, &q) in qs.iter().enumerate() {
                let ai = tape.index(a, i)?;
                let term = tape.scale_by(ai, q)?;
                u = Some(match u {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let u = u.expect("non-empty question");
            let xu = tape.mul(x, u)?;
            inputs.push(tape.concat(&[x, u, xu])?);
        }

        let mut skim_probs = Vec::new();
        let mut traces = Vec::with_capacity(4);
        for (li, layer) in self.layers.iter().enumerate() {
            let fw = layer[0].run_tape(tape, &dir_vars[2 * li], &inputs, mode, false)?;
            let bw = layer[1].run_tape(tape, &dir_vars[2 * li + 1], &inputs, mode, true)?;
            inputs = fw
                .outputs
                .iter()
                .zip(&bw.outputs)
                .map(|(&a, &b)| tape.concat2(a, b))
                .collect::<Result<_>>()?;
            skim_probs.extend(fw.skim_probs);
            skim_probs.extend(bw.skim_probs);
            traces.push((QA_DIRECTIONS[2 * li].to_string(), fw.trace));
            traces.push((QA_DIRECTIONS[2 * li + 1].to_string(), bw.trace));
        }
        let start: Vec<Var> = inputs.iter().map(|&o| tape.dot(w_start, o)).collect::<Result<_>>()?;
        let end: Vec<Var> = inputs.iter().map(|&o| tape.dot(w_end, o)).collect::<Result<_>>()?;
        let start = tape.concat(&start)?;
        let end = tape.concat(&end)?;
        let ls = tape.cross_entropy(start, ex.start)?;
        let le = tape.cross_entropy(end, ex.end)?;
        let task = tape.add(ls, le)?;
        Ok(RecordedLoss {
            task,
            skim_probs,
            trace: ModelTrace { directions: traces },
        })
    }

    fn evaluate(&self, data: &[SpanExample], policy: Policy, seed: u64) -> Result<Evaluation> {
        let mut rng = SeedRng::seed_from_u64(seed);
        let mut exact = 0usize;
        let mut f1_sum = 0.0;
        let mut per_dir: Vec<DecisionTrace> = vec![DecisionTrace::default(); 4];
        for ex in data {
            let out = self.qa_attend(&ex.context, &ex.question, policy, &mut rng)?;
            let pred = answer_span(&out.start_probs, &out.end_probs, DEFAULT_MAX_SPAN);
            if pred == (ex.start, ex.end) {
                exact += 1;
            }
            f1_sum += span_f1(pred, (ex.start, ex.end));
            for (acc, (_, t)) in per_dir.iter_mut().zip(out.trace.directions) {
                acc.steps.extend(t.steps);
            }
        }
        let layers: Vec<&Recurrent> = self.directions().map(|(_, r)| r).collect();
        let pairs: Vec<_> = layers.iter().copied().zip(per_dir.iter()).collect();
        let (skim_rate, flop_r) = summarize_traces(&pairs);
        let per_direction = QA_DIRECTIONS
            .iter()
            .zip(&per_dir)
            .map(|(n, t)| (n.to_string(), t.skim_count() as f64 / t.len().max(1) as f64))
            .collect();
        Ok(Evaluation {
            metric: exact as f64 / data.len().max(1) as f64,
            skim_rate,
            flop_r,
            per_direction,
            f1: Some(f1_sum / data.len().max(1) as f64),
        })
    }

    fn has_skim(&self) -> bool {
        self.layers.iter().flatten().any(Recurrent::is_skim)
    }

    fn as_skip(&self) -> Self {
        let mut out = self.clone();
        for layer in out.layers.iter_mut().flatten() {
            *layer = skip_layer(layer);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> SeedRng {
        SeedRng::seed_from_u64(seed)
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut m = ClassifierModel::new(10, 3, 4, 5, Some(2), &mut rng(0)).unwrap();
        m.proj_w = Tensor::zeros(&[3, 5]);
        let (p, trace) = m.classify(&[2, 3, 4], Policy::Argmax, &mut rng(1)).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(trace.get("rnn").unwrap().len(), 3);
    }

    #[test]
    fn single_token_gives_single_decision() {
        let m = ClassifierModel::new(10, 2, 4, 5, Some(2), &mut rng(0)).unwrap();
        let (_, trace) = m.classify(&[7], Policy::Argmax, &mut rng(1)).unwrap();
        assert_eq!(trace.total_steps(), 1);
    }

    #[test]
    fn out_of_vocabulary_is_an_index_error() {
        let m = ClassifierModel::new(10, 2, 4, 5, Some(2), &mut rng(0)).unwrap();
        assert!(matches!(
            m.classify(&[10], Policy::Argmax, &mut rng(1)),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn forced_read_matches_plain_lstm_bitwise() {
        let m = ClassifierModel::new(12, 3, 6, 7, Some(3), &mut rng(4)).unwrap();
        let Recurrent::Skim(unit) = &m.rnn else { unreachable!() };
        let plain = m.with_rnn(Recurrent::Lstm(unit.big.clone()));
        let tokens = [3, 1, 11, 5, 5, 2];
        let (a, _) = m.classify(&tokens, Policy::Forced(Decision::Read), &mut rng(0)).unwrap();
        let (b, _) = plain.classify(&tokens, Policy::Argmax, &mut rng(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_question_word_gets_full_attention() {
        let m = QaAttentionModel::new(20, 4, 5, Some(2), &mut rng(2)).unwrap();
        for a in m.attention(&[3, 4, 5, 6], &[7]).unwrap() {
            assert_eq!(a, vec![1.0]);
        }
    }

    #[test]
    fn zero_context_and_weights_attend_uniformly() {
        let mut m = QaAttentionModel::new(20, 4, 5, Some(2), &mut rng(2)).unwrap();
        m.att_w = Tensor::zeros(&[12]);
        // id 0 is PAD, embedded as zeros
        for a in m.attention(&[0, 0], &[3, 4, 5]).unwrap() {
            assert!(a.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn qa_outputs_are_distributions_with_four_traces() {
        let m = QaAttentionModel::new(20, 4, 5, Some(2), &mut rng(3)).unwrap();
        let out = m.qa_attend(&[3, 4, 5, 6, 7], &[8, 9], Policy::Argmax, &mut rng(0)).unwrap();
        for p in [&out.start_probs, &out.end_probs] {
            assert_eq!(p.len(), 5);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.trace.directions.len(), 4);
        assert!(out.trace.directions.iter().all(|(_, t)| t.len() == 5));
        assert!(m.qa_attend(&[3], &[], Policy::Argmax, &mut rng(0)).is_err());
    }

    #[test]
    fn span_f1_examples() {
        assert_eq!(span_f1((2, 3), (2, 3)), 1.0);
        assert_eq!(span_f1((0, 1), (2, 3)), 0.0);
        // one shared position of two predicted and one gold
        assert!((span_f1((4, 5), (5, 5)) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn answer_span_examples() {
        let peaked = |n: usize, at: usize| -> Vec<f64> {
            (0..n).map(|i| if i == at { 0.9 } else { 0.1 / (n - 1) as f64 }).collect()
        };
        assert_eq!(answer_span(&peaked(8, 3), &peaked(8, 5), 10), (3, 5));
        assert_eq!(answer_span(&peaked(8, 2), &peaked(8, 2), 10), (2, 2));
    }

    #[test]
    fn answer_span_matches_exhaustive_search_when_end_precedes_start() {
        let start = [0.0, 0.05, 0.05, 0.1, 0.8];
        let end = [0.7, 0.2, 0.05, 0.03, 0.02];
        let mut best = (0, 0);
        let mut score = -1.0;
        for s in 0..5 {
            for e in 0..5 {
                if s <= e && e <= s + 10 && start[s] * end[e] > score {
                    score = start[s] * end[e];
                    best = (s, e);
                }
            }
        }
        assert_eq!(answer_span(&start, &end, 10), best);
    }
}
