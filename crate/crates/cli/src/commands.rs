use crate::config::{parse_policy, CellKind, RunConfig, TaskKind};
use crate::error::CliError;
use crate::render::{self, TraceRow};
use crate::{BenchArgs, Cli, Command, EvalArgs, GenDataArgs, GenTask, SweepArgs, TraceArgs};
use rand::SeedableRng;
use serde::Serialize;
use skimrnn::bench::{bench_inference, write_bench_csv, write_bench_long_csv, BenchConfig, BenchDims};
use skimrnn::cell::{Policy, SeedRng};
use skimrnn::data::{self, LabelSet, Vocab};
use skimrnn::eval::{
    default_thresholds, normalize_thresholds, policy_name, sweep_thresholds, write_sweep_csv, SweepRow, TrainSummary,
};
use skimrnn::models::{summarize_traces, ClassifierModel, Evaluation, LabeledExample, QaAttentionModel, SpanExample, TaskModel};
use skimrnn::recurrent::Recurrent;
use skimrnn::trace::{DecisionTrace, ModelTrace};
use skimrnn::training::{train, write_history_csv};
use skimrnn::weights::SavedModel;
use std::path::{Path, PathBuf};

pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads != 1 {
        return Err(CliError::Usage(format!(
            "--threads {}: only single-threaded execution is supported",
            cli.threads
        )));
    }
    match &cli.command {
        Command::Train => cmd_train(&cli),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::SweepThreshold(a) => cmd_sweep(&cli, a),
        Command::Trace(a) => cmd_trace(&cli, a),
        Command::Bench(a) => cmd_bench(&cli, a),
        Command::GenData(a) => cmd_gen_data(&cli, a),
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<SavedModel, CliError> {
    SavedModel::load(path).map_err(|e| CliError::input(&format!("model {}", path.display()), e))
}

fn classifier_data(path: &Path, vocab: &Vocab, labels: &LabelSet) -> Result<Vec<LabeledExample>, CliError> {
    let what = format!("data {}", path.display());
    let text = data::parse_classification_file(path).map_err(|e| CliError::input(&what, e))?;
    let out = data::encode_labeled(&text, vocab, labels).map_err(|e| CliError::input(&what, e))?;
    if out.is_empty() {
        return Err(CliError::input(&what, "no examples"));
    }
    Ok(out)
}

fn span_data(path: &Path, vocab: &Vocab) -> Result<Vec<SpanExample>, CliError> {
    let what = format!("data {}", path.display());
    let text = data::parse_span_file(path).map_err(|e| CliError::input(&what, e))?;
    if text.is_empty() {
        return Err(CliError::input(&what, "no examples"));
    }
    Ok(data::encode_spans(&text, vocab))
}

fn policy_arg(s: &str) -> Result<Policy, CliError> {
    parse_policy(s).map_err(|e| CliError::Usage(format!("--policy: {e}")))
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("train needs --config".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let dir = cli
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out-dir or set `out_dir`".into()))?;
    let policy = cfg.policy()?;
    let d_small = match cfg.cell {
        CellKind::Skim => cfg.d_small,
        CellKind::Lstm => None,
    };
    let mut rng = SeedRng::seed_from_u64(cfg.seed);

    match cfg.task {
        TaskKind::Classifier => {
            let read = |field: &str, p: &Path| {
                data::parse_classification_file(p).map_err(|e| CliError::input(&format!("config field `{field}`"), e))
            };
            let train_text = read("train_path", &cfg.train_path)?;
            let vocab = Vocab::build(train_text.iter().map(|e| e.tokens.as_slice()));
            let labels = LabelSet::build(train_text.iter().map(|e| e.label.as_str()));
            let encode = |field: &str, text: &[data::TextExample]| {
                data::encode_labeled(text, &vocab, &labels).map_err(|e| CliError::input(&format!("config field `{field}`"), e))
            };
            let train_set = encode("train_path", &train_text)?;
            let val_set = encode("val_path", &read("val_path", &cfg.val_path)?)?;
            let test_set = match &cfg.test_path {
                Some(p) => Some(encode("test_path", &read("test_path", p)?)?),
                None => None,
            };
            let mut model = ClassifierModel::new(vocab.len(), labels.len(), cfg.d_in, cfg.d, d_small, &mut rng)
                .map_err(|e| CliError::input("model", e))?;
            if let Some(p) = &cfg.embeddings_path {
                model.embedding = embeddings(p, &vocab, &cfg)?;
            }
            model.freeze_embedding = cfg.freeze_embedding;
            let (model, summary, history) = fit(&cfg, policy, model, &train_set, &val_set, test_set.as_deref())?;
            let saved = SavedModel::Classifier { model, vocab, labels };
            write_run(&dir, &saved, &summary, &history)
        }
        TaskKind::Qa => {
            let read = |field: &str, p: &Path| {
                data::parse_span_file(p).map_err(|e| CliError::input(&format!("config field `{field}`"), e))
            };
            let train_text = read("train_path", &cfg.train_path)?;
            let vocab = Vocab::build(
                train_text
                    .iter()
                    .flat_map(|e| [e.context.as_slice(), e.question.as_slice()]),
            );
            let train_set = data::encode_spans(&train_text, &vocab);
            let val_set = data::encode_spans(&read("val_path", &cfg.val_path)?, &vocab);
            let test_set = match &cfg.test_path {
                Some(p) => Some(data::encode_spans(&read("test_path", p)?, &vocab)),
                None => None,
            };
            let mut model =
                QaAttentionModel::new(vocab.len(), cfg.d_in, cfg.d, d_small, &mut rng).map_err(|e| CliError::input("model", e))?;
            if let Some(p) = &cfg.embeddings_path {
                model.embedding = embeddings(p, &vocab, &cfg)?;
            }
            model.freeze_embedding = cfg.freeze_embedding;
            let (model, summary, history) = fit(&cfg, policy, model, &train_set, &val_set, test_set.as_deref())?;
            let saved = SavedModel::Qa { model, vocab };
            write_run(&dir, &saved, &summary, &history)
        }
    }
}

fn embeddings(path: &Path, vocab: &Vocab, cfg: &RunConfig) -> Result<skimrnn::Tensor, CliError> {
    data::load_embeddings(path, vocab, cfg.d_in, cfg.seed).map_err(|e| CliError::input("config field `embeddings_path`", e))
}

fn fit<M: TaskModel>(
    cfg: &RunConfig,
    policy: Policy,
    model: M,
    train_set: &[M::Example],
    val_set: &[M::Example],
    test_set: Option<&[M::Example]>,
) -> Result<(M, TrainSummary, Vec<skimrnn::training::MetricRow>), CliError> {
    if train_set.is_empty() {
        return Err(CliError::Usage("config field `train_path`: no examples".into()));
    }
    if val_set.is_empty() {
        return Err(CliError::Usage("config field `val_path`: no examples".into()));
    }
    let outcome = train(model, train_set, val_set, &cfg.train_config()).map_err(CliError::runtime)?;
    let eval = outcome
        .model
        .evaluate(test_set.unwrap_or(val_set), policy, cfg.seed)
        .map_err(CliError::runtime)?;
    let summary = TrainSummary::new(
        cfg.task.as_str(),
        cfg.cell.as_str(),
        policy,
        &eval,
        outcome.best_step,
        outcome.steps_run,
        outcome.halt,
    );
    Ok((outcome.model, summary, outcome.history))
}

fn write_run(
    dir: &Path,
    saved: &SavedModel,
    summary: &TrainSummary,
    history: &[skimrnn::training::MetricRow],
) -> Result<(), CliError> {
    create_dir(dir)?;
    saved.save(&dir.join("model.bin")).map_err(CliError::runtime)?;
    write_history_csv(&dir.join("metrics.csv"), history).map_err(CliError::runtime)?;
    write_json(&dir.join("summary.json"), summary)?;
    println!(
        "{} {:.4}  skim rate {:.4}  Flop-R {:.3}  best step {} of {} ({})",
        summary.metric_name,
        summary.metric,
        summary.skim_rate,
        summary.flop_r,
        summary.best_step,
        summary.steps_run,
        summary.halt.as_str()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval and sweep

#[derive(Serialize)]
struct EvalReport {
    metric_name: &'static str,
    #[serde(flatten)]
    eval: Evaluation,
    policy: String,
    examples: usize,
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<(), CliError> {
    let saved = load_model(&args.model)?;
    let policy = policy_arg(&args.policy)?;
    let seed = cli.seed.unwrap_or(0);
    let (metric_name, eval, examples) = match &saved {
        SavedModel::Classifier { model, vocab, labels } => {
            let set = classifier_data(&args.data, vocab, labels)?;
            ("accuracy", model.evaluate(&set, policy, seed), set.len())
        }
        SavedModel::Qa { model, vocab } => {
            let set = span_data(&args.data, vocab)?;
            ("exact_match", model.evaluate(&set, policy, seed), set.len())
        }
    };
    let report = EvalReport {
        metric_name,
        eval: eval.map_err(CliError::runtime)?,
        policy: policy_name(policy),
        examples,
    };
    if let Some(dir) = &cli.out_dir {
        create_dir(dir)?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).map_err(CliError::runtime)?);
    Ok(())
}

fn sweep_both<M: TaskModel>(model: &M, set: &[M::Example], thresholds: &[f64], seed: u64, skip: bool) -> skimrnn::Result<(Vec<SweepRow>, Option<Vec<SweepRow>>)> {
    let rows = sweep_thresholds(model, set, thresholds, seed)?;
    let skip_rows = if skip {
        Some(sweep_thresholds(&model.as_skip(), set, thresholds, seed)?)
    } else {
        None
    };
    Ok((rows, skip_rows))
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<(), CliError> {
    let thresholds = normalize_thresholds(&args.thresholds.clone().unwrap_or_else(default_thresholds))
        .map_err(|e| CliError::Usage(format!("--thresholds: {e}")))?;
    let saved = load_model(&args.model)?;
    let seed = cli.seed.unwrap_or(0);
    let result = match &saved {
        SavedModel::Classifier { model, vocab, labels } => {
            if args.skip && !model.has_skim() {
                return Err(CliError::Usage("--skip needs a skim model".into()));
            }
            let set = classifier_data(&args.data, vocab, labels)?;
            sweep_both(model, &set, &thresholds, seed, args.skip)
        }
        SavedModel::Qa { model, vocab } => {
            if args.skip && !model.has_skim() {
                return Err(CliError::Usage("--skip needs a skim model".into()));
            }
            let set = span_data(&args.data, vocab)?;
            sweep_both(model, &set, &thresholds, seed, args.skip)
        }
    };
    let (rows, skip_rows) = result.map_err(CliError::runtime)?;
    let mut sections: Vec<(&str, &[SweepRow])> = vec![("skim", &rows)];
    if let Some(s) = &skip_rows {
        sections.push(("skip", s));
    }
    let dir = out_dir(cli);
    create_dir(&dir)?;
    write_sweep_csv(&dir.join("sweep.csv"), &sections).map_err(CliError::runtime)?;
    println!("mode  threshold  metric  skim_rate  flop_r");
    for (mode, rows) in &sections {
        for r in *rows {
            println!("{mode:<5} {:>9.3} {:>7.4} {:>10.4} {:>7.3}", r.threshold, r.metric, r.skim_rate, r.flop_r);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// trace

#[derive(serde::Deserialize)]
struct QaInput {
    context: String,
    question: String,
}

enum TraceInput {
    Classifier(Vec<Vec<String>>),
    Qa(Vec<(Vec<String>, Vec<String>)>),
}

fn read_trace_input(args: &TraceArgs, qa: bool) -> Result<TraceInput, CliError> {
    let text = match (&args.input, &args.text) {
        (Some(p), _) => std::fs::read_to_string(p).map_err(|e| CliError::input(&format!("--input {}", p.display()), e))?,
        (None, Some(t)) => t.clone(),
        (None, None) => return Err(CliError::Usage("trace needs --input or --text".into())),
    };
    let lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let input = if qa {
        let mut out = Vec::new();
        for (i, line) in lines {
            let q: QaInput =
                serde_json::from_str(line).map_err(|e| CliError::Usage(format!("trace input line {}: {e}", i + 1)))?;
            let (c, q) = (data::tokenize(&q.context, false), data::tokenize(&q.question, false));
            if c.is_empty() || q.is_empty() {
                return Err(CliError::Usage(format!("trace input line {}: empty context or question", i + 1)));
            }
            out.push((c, q));
        }
        if out.is_empty() {
            return Err(CliError::Usage("trace input is empty".into()));
        }
        TraceInput::Qa(out)
    } else {
        let seqs: Vec<Vec<String>> = lines.map(|(_, l)| data::tokenize(l, false)).collect();
        if seqs.is_empty() {
            return Err(CliError::Usage("trace input is empty".into()));
        }
        TraceInput::Classifier(seqs)
    };
    Ok(input)
}

fn rows_for(sequence: usize, tokens: &[String], trace: &ModelTrace, out: &mut Vec<TraceRow>) {
    for (direction, t) in &trace.directions {
        for (position, (step, token)) in t.steps.iter().zip(tokens).enumerate() {
            out.push(TraceRow {
                sequence,
                direction: direction.clone(),
                position,
                token: token.clone(),
                decision: step.decision,
                p_read: step.p_read,
                p_skim: step.p_skim,
            });
        }
    }
}

fn cmd_trace(cli: &Cli, args: &TraceArgs) -> Result<(), CliError> {
    let saved = load_model(&args.model)?;
    let policy = policy_arg(&args.policy)?;
    let input = read_trace_input(args, matches!(saved, SavedModel::Qa { .. }))?;
    let mut rng = SeedRng::seed_from_u64(cli.seed.unwrap_or(0));
    let mut rows = Vec::new();
    let mut traces: Vec<ModelTrace> = Vec::new();
    let mut layers: Vec<&Recurrent> = Vec::new();
    match (&saved, &input) {
        (SavedModel::Classifier { model, vocab, .. }, TraceInput::Classifier(seqs)) => {
            layers.push(&model.rnn);
            for (i, tokens) in seqs.iter().enumerate() {
                let (_, trace) = model.classify(&vocab.encode(tokens), policy, &mut rng).map_err(CliError::runtime)?;
                rows_for(i, tokens, &trace, &mut rows);
                traces.push(trace);
            }
        }
        (SavedModel::Qa { model, vocab }, TraceInput::Qa(items)) => {
            layers.extend(model.directions().map(|(_, r)| r));
            for (i, (context, question)) in items.iter().enumerate() {
                let out = model
                    .qa_attend(&vocab.encode(context), &vocab.encode(question), policy, &mut rng)
                    .map_err(CliError::runtime)?;
                rows_for(i, context, &out.trace, &mut rows);
                traces.push(out.trace);
            }
        }
        _ => unreachable!("input parsed for the model's task"),
    }
    let pairs: Vec<(&Recurrent, &DecisionTrace)> = traces
        .iter()
        .flat_map(|t| layers.iter().copied().zip(t.directions.iter().map(|(_, d)| d)))
        .collect();
    let (skim_rate, flop_r) = summarize_traces(&pairs);

    let jsonl = render::jsonl(&rows).map_err(CliError::runtime)?;
    let text = render::text(&rows, skim_rate, flop_r, false);
    let dir = out_dir(cli);
    create_dir(&dir)?;
    std::fs::write(dir.join("trace.jsonl"), jsonl).map_err(CliError::runtime)?;
    std::fs::write(dir.join("trace.txt"), &text).map_err(CliError::runtime)?;
    if args.color {
        print!("{}", render::text(&rows, skim_rate, flop_r, true));
    } else {
        print!("{text}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

fn parse_dims(s: &str) -> Result<BenchDims, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::Usage(format!("--grid entry {s:?}: expected d_in:d:d_small"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    Ok(BenchDims {
        d_in: n[0],
        d: n[1],
        d_small: n[2],
    })
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::input(&format!("config {}", p.display()), e))?;
            serde_json::from_str::<BenchConfig>(&text).map_err(|e| CliError::input(&format!("config {}", p.display()), e))?
        }
        None => BenchConfig::default(),
    };
    if let Some(g) = &args.grid {
        cfg.grid = g.iter().map(|s| parse_dims(s)).collect::<Result<_, _>>()?;
    }
    if let Some(r) = &args.skim_rates {
        cfg.skim_rates = r.clone();
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(w) = args.warmup {
        cfg.warmup = w;
    }
    if let Some(l) = args.seq_len {
        cfg.seq_len = l;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = out_dir(cli);
    let report = bench_inference(&cfg).map_err(CliError::runtime)?;
    create_dir(&dir)?;
    write_bench_csv(&dir.join("bench.csv"), &report).map_err(CliError::runtime)?;
    write_bench_long_csv(&dir.join("bench_long.csv"), &report).map_err(CliError::runtime)?;
    println!("d_in     d  d_small  skim_rate  latency_us  baseline_us  speedup  flop_r");
    for r in &report.rows {
        println!(
            "{:>4} {:>5} {:>8} {:>10.2} {:>11.3} {:>12.3} {:>8.3} {:>7.3}",
            r.d_in, r.d, r.d_small, r.skim_rate, r.latency_us, r.baseline_latency_us, r.speedup, r.flop_r
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data

fn cmd_gen_data(cli: &Cli, args: &GenDataArgs) -> Result<(), CliError> {
    let seed = cli.seed.unwrap_or(0);
    if args.file.file_name().is_none() {
        return Err(CliError::Usage("--file must name a file".into()));
    }
    let dir = out_dir(cli);
    let path = dir.join(&args.file);
    match args.task {
        GenTask::Keyword => {
            let examples = data::gen_keyword_task(seed, args.n, args.len, args.vocab_size, args.n_keys)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            create_dir(path.parent().unwrap_or(&dir))?;
            data::write_classification_file(&path, &examples).map_err(CliError::runtime)?;
        }
        GenTask::Span => {
            let examples = data::gen_span_task(seed, args.n, args.len, args.vocab_size, args.n_keys)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            create_dir(path.parent().unwrap_or(&dir))?;
            data::write_span_file(&path, &examples).map_err(CliError::runtime)?;
        }
    }
    println!("wrote {} examples to {}", args.n, path.display());
    Ok(())
}
