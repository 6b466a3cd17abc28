//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p skimrnn-core --test acceptance`. Pass criterion
//! numbers as arguments to run a subset, e.g. `-- 1 4 8`. The process exits
//! non-zero when any selected criterion fails.

#[path = "../common/mod.rs"]
mod common;

use common::{
    check_gradients, keyword_config, keyword_data, keyword_model, qa_config, qa_model, rng, span_data, KeywordData,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;
use skimrnn::bench::{bench_inference, BenchConfig, BenchDims};
use skimrnn::cell::{gumbel_sample, gumbel_softmax, Decision, Policy, SkimState, SkimUnitParams};
use skimrnn::eval::{compare_at_matched_flop_r, default_thresholds, sweep_thresholds, SweepRow, TrainSummary};
use skimrnn::flops::{flop_reduction, FlopLedger, SkimDims};
use skimrnn::models::{ClassifierModel, Evaluation, TaskModel};
use skimrnn::recurrent::Recurrent;
use skimrnn::training::{expected_loss_bruteforce, train, write_history_csv, TrainOutcome};
use skimrnn::weights::SavedModel;
use std::process::ExitCode;
use std::time::{Duration, Instant};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < budget_s, format!("{s:.1}s of {budget_s:.0}s budget"))
}

// ---------------------------------------------------------------------------
// Keyword-task runs shared by several criteria.

struct KeywordRun {
    data: KeywordData,
    outcome: TrainOutcome<ClassifierModel>,
    test: Evaluation,
    elapsed: Duration,
}

fn keyword_run(seed: u64, gamma: f64, d_small: usize) -> KeywordRun {
    let start = Instant::now();
    let data = keyword_data(seed, 2000, 500, 40);
    let model = keyword_model(&data, 50, 50, Some(d_small), seed);
    let outcome = train(model, &data.train, &data.val, &keyword_config(seed, gamma)).expect("keyword training");
    let test = outcome.model.evaluate(&data.test, Policy::Argmax, seed).expect("test evaluation");
    KeywordRun {
        data,
        outcome,
        test,
        elapsed: start.elapsed(),
    }
}

#[derive(Default)]
struct Shared {
    skim: Option<Vec<KeywordRun>>,
    no_penalty: Option<Vec<KeywordRun>>,
    skip: Option<Vec<KeywordRun>>,
}

impl Shared {
    fn skim(&mut self) -> &[KeywordRun] {
        self.skim
            .get_or_insert_with(|| SEEDS.iter().map(|&s| keyword_run(s, 0.02, 5)).collect())
    }

    fn no_penalty(&mut self) -> &[KeywordRun] {
        self.no_penalty
            .get_or_insert_with(|| SEEDS.iter().map(|&s| keyword_run(s, 0.0, 5)).collect())
    }

    fn skip(&mut self) -> &[KeywordRun] {
        self.skip
            .get_or_insert_with(|| SEEDS.iter().map(|&s| keyword_run(s, 0.02, 0)).collect())
    }
}

// ---------------------------------------------------------------------------

fn gradient_oracle(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let data = keyword_data(11, 8, 4, 5);
    let model = keyword_model(&data, 4, 8, Some(3), 11);
    let batch = vec![&data.train[0]];
    let mut r = rng(11);
    let noise: Vec<[f64; 2]> = (0..5).map(|_| [gumbel_sample(&mut r), gumbel_sample(&mut r)]).collect();
    // Entries below 1e-6 in magnitude are judged on absolute error, where
    // finite-difference roundoff (about 1e-11) would dominate a ratio.
    let g = check_gradients(&model, &batch, &noise, 1.0, 0.1, 1e-5, 1e-6);
    let (fast, time) = within(start.elapsed(), 10.0);
    verdict(
        g.max_rel <= 1e-4 && fast,
        format!("max relative error {:.2e} (denominator floor 1e-6) over {} entries, worst {}; {time}", g.max_rel, g.checked, g.worst),
    )
}

fn expectation_oracle(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let data = keyword_data(12, 8, 4, 6);
    let model = keyword_model(&data, 3, 4, Some(2), 12);
    let ex = &data.train[0];
    let exact = expected_loss_bruteforce(&model, &ex.tokens, ex.label).expect("enumeration");
    let n = 200_000usize;
    let mut r = rng(12);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let l = model.sampled_loss(&ex.tokens, ex.label, &mut r).expect("sample");
        sum += l;
        sq += l * l;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) * n as f64 / (n - 1) as f64 / n as f64).sqrt();
    let z = (mean - exact).abs() / se;
    let (fast, time) = within(start.elapsed(), 60.0);
    verdict(
        z <= 3.0 && fast,
        format!("enumerated {exact:.6} over 64 sequences, sampled {mean:.6} ± {se:.2e} (|z| = {z:.2}); {time}"),
    )
}

fn skip_equivalence(_: &mut Shared) -> Verdict {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (any::<u64>(), 1usize..16, 1usize..32);
    let result = runner.run(&strategy, |(seed, d_in, d)| {
        let mut r = rng(seed);
        let unit = SkimUnitParams::init(d_in, d, 0, &mut r).expect("unit");
        let state = SkimState {
            h: (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
            c: (0..d).map(|_| r.random_range(-5.0..5.0)).collect(),
        };
        let x: Vec<f64> = (0..d_in).map(|_| r.random_range(-3.0..3.0)).collect();
        let next = unit.apply(&x, &state, Decision::Skim).expect("step");
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&next.h), bits(&state.h));
        prop_assert_eq!(bits(&next.c), bits(&state.c));
        Ok(())
    });
    match result {
        Ok(()) => verdict(true, "1000 random states unchanged bit for bit"),
        Err(e) => verdict(false, format!("{e}")),
    }
}

fn low_temperature(_: &mut Shared) -> Verdict {
    let mut r = rng(14);
    let tau = 0.01;
    let (mut draws, mut misses, mut worst) = (0usize, 0usize, 1.0f64);
    let mut worst_margin = 0.0;
    while draws < 1000 {
        let p0: f64 = r.random();
        let p = [p0, 1.0 - p0];
        let g = [gumbel_sample(&mut r), gumbel_sample(&mut r)];
        let margin = p[0].max(1e-12).ln() - p[1].max(1e-12).ln() + g[0] - g[1];
        if margin.abs() <= 0.01 {
            continue;
        }
        draws += 1;
        let soft = gumbel_softmax(&p, &g, tau).expect("relaxation");
        let top = soft[0].max(soft[1]);
        if top < 0.99 {
            misses += 1;
        }
        if top < worst {
            worst = top;
            worst_margin = margin;
        }
    }
    verdict(
        misses == 0,
        format!(
            "{misses} of {draws} draws below 0.99; smallest max component {worst:.4} at margin {worst_margin:.4} \
             (two-way max component is sigmoid(|margin|/tau), reaching 0.99 only for |margin| >= {:.4})",
            tau * 99f64.ln()
        ),
    )
}

fn keyword_task(shared: &mut Shared) -> Verdict {
    let runs = shared.skim();
    let total: Duration = runs.iter().map(|r| r.elapsed).sum();
    let good = runs
        .iter()
        .filter(|r| r.test.metric >= 0.95 && r.test.skim_rate >= 0.5)
        .count();
    let per_seed: Vec<String> = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| format!("seed {s}: acc {:.3} skim {:.3} flop_r {:.2}", r.test.metric, r.test.skim_rate, r.test.flop_r))
        .collect();
    let (fast, time) = within(total, 600.0);
    verdict(good >= 2 && fast, format!("{good}/3 seeds meet both bars [{}]; {time}", per_seed.join("; ")))
}

fn gamma_monotonicity(shared: &mut Shared) -> Verdict {
    let with: f64 = shared.skim().iter().map(|r| r.test.skim_rate).sum::<f64>() / 3.0;
    let without: f64 = shared.no_penalty().iter().map(|r| r.test.skim_rate).sum::<f64>() / 3.0;
    verdict(
        with >= without,
        format!("mean skim rate {with:.3} at gamma 0.02 vs {without:.3} at gamma 0"),
    )
}

fn sweep_is_monotone(rows: &[SweepRow]) -> bool {
    rows[0].skim_rate == 0.0 && rows.windows(2).all(|w| w[1].skim_rate >= w[0].skim_rate)
}

fn threshold_sweep(shared: &mut Shared) -> Verdict {
    let thresholds = default_thresholds();
    let sweeps = |runs: &[KeywordRun]| -> Vec<Vec<SweepRow>> {
        runs.iter()
            .zip(SEEDS)
            .map(|(r, s)| sweep_thresholds(&r.outcome.model, &r.data.test, &thresholds, s).expect("sweep"))
            .collect()
    };
    let skim = sweeps(shared.skim());
    let skip = sweeps(shared.skip());
    let monotone = skim.iter().chain(&skip).all(|rows| sweep_is_monotone(rows));
    let mut wins = 0;
    let mut notes = Vec::new();
    for (seed, (a, b)) in SEEDS.iter().zip(skim.iter().zip(&skip)) {
        match compare_at_matched_flop_r(a, b) {
            Some((sa, sb, n)) => {
                if sa >= sb {
                    wins += 1;
                }
                notes.push(format!("seed {seed}: skim {sa:.3} vs skip {sb:.3} over {n} points"));
            }
            None => notes.push(format!("seed {seed}: no overlapping Flop-R range")),
        }
    }
    verdict(
        monotone && wins >= 2,
        format!(
            "skim rate non-decreasing from 0: {monotone}; skim >= skip at matched Flop-R on {wins}/3 seeds [{}]",
            notes.join("; ")
        ),
    )
}

/// Independent closed forms for the flop counts.
fn lstm_flops_oracle(d_in: u64, d_out: u64, d_read: u64) -> u64 {
    8 * d_out * (d_in + d_read) + 4 * d_out + 4 * d_out + 5 * d_out
}

fn skim_flops_oracle(d_in: u64, d: u64, d_small: u64, skim: bool) -> u64 {
    let k = 2;
    let overhead = 2 * k * (d_in + d) + k + k + 3 * k;
    overhead + if skim { lstm_flops_oracle(d_in, d_small, d) } else { lstm_flops_oracle(d_in, d, d) }
}

fn flop_accounting(_: &mut Shared) -> Verdict {
    let mut r = rng(18);
    let mut mismatches = 0;
    for _ in 0..100 {
        let d_in = r.random_range(1..40);
        let d = r.random_range(2..40);
        let d_small = r.random_range(0..d);
        let len = r.random_range(1..30);
        let layer = Recurrent::Skim(SkimUnitParams::init(d_in, d, d_small, &mut r).expect("unit"));
        let xs: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..d_in).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let mut ledger = FlopLedger::new();
        let run = layer
            .run_values(&xs, Policy::Sample, &mut r, false, Some(&mut ledger))
            .expect("run");
        let expected: u64 = run
            .trace
            .decisions()
            .map(|dec| skim_flops_oracle(d_in as u64, d as u64, d_small as u64, dec == Decision::Skim))
            .sum();
        if ledger.total() != expected {
            mismatches += 1;
        }
    }
    let steps = (0..10)
        .map(|_| skimrnn::trace::StepRecord::new(Decision::Skim, [0.0, 1.0]))
        .collect();
    let fr = flop_reduction(&skimrnn::trace::DecisionTrace { steps }, SkimDims::new(100, 100, 10)).expect("flop-r");
    let hand = 161_300.0 / 16_940.0;
    let sig6 = (fr - hand).abs() / hand < 5e-7;
    verdict(
        mismatches == 0 && sig6,
        format!("{mismatches}/100 counter mismatches; Flop-R {fr:.6} vs 161300/16940 = {hand:.6}"),
    )
}

fn benchmark_trends(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let cfg = BenchConfig {
        grid: [100, 200, 400]
            .into_iter()
            .map(|d| BenchDims {
                d_in: 100,
                d,
                d_small: 20,
            })
            .collect(),
        skim_rates: vec![0.9],
        ..BenchConfig::default()
    };
    let report = match bench_inference(&cfg) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("benchmark failed: {e}")),
    };
    let at = |d: usize| report.rows.iter().find(|r| r.d == d).expect("row");
    let (s100, s400) = (at(100).speedup, at(400).speedup);
    let bounded = report.rows.iter().all(|r| r.speedup <= r.flop_r + r.speedup_mad);
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("d {}: {:.2}x ± {:.2} (bound {:.2})", r.d, r.speedup, r.speedup_mad, r.flop_r))
        .collect();
    let (fast, time) = within(start.elapsed(), 300.0);
    verdict(
        s400 > s100 && s400 > 2.0 && bounded && fast,
        format!(
            "{}; threads {:?}; {time}",
            rows.join(", "),
            report.threads_observed
        ),
    )
}

fn determinism(shared: &mut Shared) -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let write = |run: &KeywordRun, tag: &str| -> (Vec<u8>, Vec<u8>) {
        let w = dir.path().join(format!("{tag}.bin"));
        let m = dir.path().join(format!("{tag}.csv"));
        SavedModel::Classifier {
            model: run.outcome.model.clone(),
            vocab: run.data.vocab.clone(),
            labels: run.data.labels.clone(),
        }
        .save(&w)
        .expect("save");
        write_history_csv(&m, &run.outcome.history).expect("csv");
        (std::fs::read(w).expect("read"), std::fs::read(m).expect("read"))
    };
    let first = write(&shared.skim()[0], "first");
    let again = keyword_run(SEEDS[0], 0.02, 5);
    let second = write(&again, "second");
    verdict(
        first.0 == second.0 && first.1 == second.1,
        format!(
            "weights {} bytes identical: {}; metrics {} bytes identical: {}",
            first.0.len(),
            first.0 == second.0,
            first.1.len(),
            first.1 == second.1
        ),
    )
}

fn qa_toy(_: &mut Shared) -> Verdict {
    let mut good = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        let data = span_data(seed, 1000, 200, 24);
        let model = qa_model(&data, 16, 32, Some(4), seed);
        let out = train(model, &data.train, &data.val, &qa_config(seed)).expect("qa training");
        let elapsed = start.elapsed();
        let test = out.model.evaluate(&data.test, Policy::Argmax, seed).expect("qa evaluation");
        let summary = TrainSummary::new("qa", "skim", Policy::Argmax, &test, out.best_step, out.steps_run, out.halt);
        let json = serde_json::to_value(&summary).expect("summary json");
        let layers = json["layer_skim_rates"].as_array().map_or(0, |a| a.len());
        let (fast, _) = within(elapsed, 300.0);
        if test.metric >= 0.9 && fast && layers == 4 {
            good += 1;
        }
        let rates: Vec<String> = summary
            .layer_skim_rates
            .iter()
            .map(|d| format!("{} {:.3}", d.direction, d.skim_rate))
            .collect();
        notes.push(format!(
            "seed {seed}: EM {:.3} in {:.1}s, per-layer skim [{}]",
            test.metric,
            elapsed.as_secs_f64(),
            rates.join(", ")
        ));
    }
    verdict(good >= 2, format!("{good}/3 seeds reach EM 0.9 within 300s [{}]", notes.join("; ")))
}

type Criterion = fn(&mut Shared) -> Verdict;

fn main() -> ExitCode {
    let criteria: [(u32, &str, Criterion); 11] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "expected-loss oracle", expectation_oracle),
        (3, "skip equivalence", skip_equivalence),
        (4, "low-temperature collapse", low_temperature),
        (5, "synthetic keyword task", keyword_task),
        (6, "gamma monotonicity", gamma_monotonicity),
        (7, "threshold sweep and skim vs skip", threshold_sweep),
        (8, "flop accounting", flop_accounting),
        (9, "benchmark trends", benchmark_trends),
        (10, "determinism", determinism),
        (11, "QA toy model", qa_toy),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let v = run(&mut shared);
        if !v.pass {
            failed += 1;
        }
        println!("{} [{id}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
