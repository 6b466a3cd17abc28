#![allow(dead_code)]

use rand::SeedableRng;
use skimrnn::cell::{SeedRng, TemperatureSchedule};
use skimrnn::data::{encode_labeled, encode_spans, gen_keyword_task, gen_span_task, LabelSet, Vocab};
use skimrnn::models::{ClassifierModel, LabeledExample, QaAttentionModel, SpanExample, TaskModel};
use skimrnn::recurrent::StepMode;
use skimrnn::training::{batch_gradients, TrainConfig};

pub fn rng(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}

/// Relaxed batch loss and gradients with the same Gumbel noise replayed on
/// every call.
pub fn replayed_loss<M: TaskModel>(
    model: &M,
    batch: &[&M::Example],
    noise: &[[f64; 2]],
    tau: f64,
    gamma: f64,
) -> (f64, Vec<Vec<f64>>) {
    let mut i = 0usize;
    let mut next = || {
        let g = noise[i % noise.len()];
        i += 1;
        g
    };
    let mut mode = StepMode::Relaxed { tau, noise: &mut next };
    let bg = batch_gradients(model, batch, &mut mode, gamma).expect("batch gradients");
    (bg.loss, bg.grads)
}

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that gradients near
/// zero are judged on absolute error.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences on every entry of every parameter.
pub fn check_gradients<M: TaskModel>(
    model: &M,
    batch: &[&M::Example],
    noise: &[[f64; 2]],
    tau: f64,
    gamma: f64,
    step: f64,
    floor: f64,
) -> GradCheck {
    let (_, analytic) = replayed_loss(model, batch, noise, tau, gamma);
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut out = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut probe = model.clone();
    for (pi, name) in names.iter().enumerate() {
        let len = analytic[pi].len();
        for j in 0..len {
            let orig = probe.params_mut()[pi].data()[j];
            probe.params_mut()[pi].data_mut()[j] = orig + step;
            let (up, _) = replayed_loss(&probe, batch, noise, tau, gamma);
            probe.params_mut()[pi].data_mut()[j] = orig - step;
            let (down, _) = replayed_loss(&probe, batch, noise, tau, gamma);
            probe.params_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(analytic[pi][j], numeric, floor);
            out.checked += 1;
            if e > out.max_rel {
                out.max_rel = e;
                out.worst = format!("{name}[{j}]: analytic {} numeric {numeric}", analytic[pi][j]);
            }
        }
    }
    out
}

pub struct KeywordData {
    pub vocab: Vocab,
    pub labels: LabelSet,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

pub const KEYWORD_VOCAB: usize = 200;
pub const KEYWORD_CLASSES: usize = 4;

/// Keyword task with a distinct generator seed per split. The validation
/// split is a quarter the size of the test split.
pub fn keyword_data(seed: u64, n_train: usize, n_test: usize, len: usize) -> KeywordData {
    let train = gen_keyword_task(3 * seed + 100, n_train, len, KEYWORD_VOCAB, KEYWORD_CLASSES).unwrap();
    let val = gen_keyword_task(3 * seed + 101, (n_test / 4).max(1), len, KEYWORD_VOCAB, KEYWORD_CLASSES).unwrap();
    let test = gen_keyword_task(3 * seed + 102, n_test, len, KEYWORD_VOCAB, KEYWORD_CLASSES).unwrap();
    let vocab = Vocab::build(train.iter().chain(&val).chain(&test).map(|e| e.tokens.as_slice()));
    let names: Vec<String> = (0..KEYWORD_CLASSES).map(|j| j.to_string()).collect();
    let labels = LabelSet::build(names.iter().map(String::as_str));
    KeywordData {
        train: encode_labeled(&train, &vocab, &labels).unwrap(),
        val: encode_labeled(&val, &vocab, &labels).unwrap(),
        test: encode_labeled(&test, &vocab, &labels).unwrap(),
        vocab,
        labels,
    }
}

pub fn keyword_model(data: &KeywordData, d_in: usize, d: usize, d_small: Option<usize>, seed: u64) -> ClassifierModel {
    ClassifierModel::new(data.vocab.len(), data.labels.len(), d_in, d, d_small, &mut rng(seed)).unwrap()
}

/// Desk-scale recipe for the keyword task: a forced-read phase followed by
/// skim training with a faster temperature decay than the default.
pub fn keyword_config(seed: u64, gamma: f64) -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        gamma,
        batch_size: 32,
        pretrain_steps: 200,
        early_stop_patience: 100_000,
        max_steps: 500,
        eval_interval: 50,
        seed,
        schedule: TemperatureSchedule { rate: 2e-3, floor: 0.5 },
        ..TrainConfig::default()
    }
}

pub struct SpanData {
    pub vocab: Vocab,
    pub train: Vec<SpanExample>,
    pub val: Vec<SpanExample>,
    pub test: Vec<SpanExample>,
}

pub fn span_data(seed: u64, n_train: usize, n_test: usize, context_len: usize) -> SpanData {
    let train = gen_span_task(3 * seed + 500, n_train, context_len, 60, 4).unwrap();
    let val = gen_span_task(3 * seed + 501, (n_test / 2).max(1), context_len, 60, 4).unwrap();
    let test = gen_span_task(3 * seed + 502, n_test, context_len, 60, 4).unwrap();
    let vocab = Vocab::build(
        train
            .iter()
            .chain(&val)
            .chain(&test)
            .flat_map(|e| [e.context.as_slice(), e.question.as_slice()]),
    );
    SpanData {
        train: encode_spans(&train, &vocab),
        val: encode_spans(&val, &vocab),
        test: encode_spans(&test, &vocab),
        vocab,
    }
}

pub fn qa_model(data: &SpanData, d_in: usize, d: usize, d_small: Option<usize>, seed: u64) -> QaAttentionModel {
    QaAttentionModel::new(data.vocab.len(), d_in, d, d_small, &mut rng(seed)).unwrap()
}

/// Desk-scale recipe for the span task.
pub fn qa_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        gamma: 0.01,
        batch_size: 16,
        pretrain_steps: 100,
        early_stop_patience: 100_000,
        max_steps: 300,
        eval_interval: 50,
        seed,
        schedule: TemperatureSchedule { rate: 2e-3, floor: 0.5 },
        ..TrainConfig::default()
    }
}
