//! Single-thread CPU latency benchmark for hard Skim-LSTM inference.
//!
//! Each row times a length-`seq_len` loop of hard steps under a pre-drawn
//! decision pattern with exactly `round(rate · seq_len)` skims, against the
//! same big cell run as a plain LSTM. Trials alternate the two loops so
//! drift hits both equally; the speedup is the median of per-trial ratios.

use crate::cell::{lstm_step, Decision, LstmParams, SeedRng, SkimState, SkimUnitParams};
use crate::error::{Error, Result};
use crate::flops::flop_reduction;
use crate::tensor::Tensor;
use crate::trace::{DecisionTrace, StepRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::hint::black_box;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

pub const MIN_TRIALS: usize = 30;
pub const MIN_WARMUP: usize = 5;
pub const DEFAULT_SEQ_LEN: usize = 100;
/// A timed loop must last at least this many timer ticks.
const MIN_TICKS_PER_TRIAL: u32 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchDims {
    pub d_in: usize,
    pub d: usize,
    pub d_small: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub grid: Vec<BenchDims>,
    pub skim_rates: Vec<f64>,
    pub trials: usize,
    pub warmup: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            grid: [100, 200, 400]
                .into_iter()
                .map(|d| BenchDims {
                    d_in: 100,
                    d,
                    d_small: 20,
                })
                .collect(),
            skim_rates: vec![0.0, 0.5, 0.9],
            trials: MIN_TRIALS,
            warmup: MIN_WARMUP,
            seq_len: DEFAULT_SEQ_LEN,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Err(Error::Bench(format!("{field}: {detail}")));
        if self.trials < MIN_TRIALS {
            return bad("trials", format!("{} is below the minimum {MIN_TRIALS}", self.trials));
        }
        if self.warmup < MIN_WARMUP {
            return bad("warmup", format!("{} is below the minimum {MIN_WARMUP}", self.warmup));
        }
        if self.seq_len == 0 {
            return bad("seq_len", "must be positive".into());
        }
        if self.grid.is_empty() || self.skim_rates.is_empty() {
            return bad("grid", "needs at least one configuration and one skim rate".into());
        }
        for g in &self.grid {
            if g.d == 0 || g.d_in == 0 || g.d_small > g.d {
                return bad("grid", format!("invalid dims {g:?}"));
            }
        }
        if let Some(r) = self.skim_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return bad("skim_rates", format!("{r} outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub d_in: usize,
    pub d: usize,
    pub d_small: usize,
    /// Realized skim rate of the forced pattern.
    pub skim_rate: f64,
    /// Median skim-model latency per token, microseconds.
    pub latency_us: f64,
    /// Median always-read latency per token, microseconds.
    pub baseline_latency_us: f64,
    pub speedup: f64,
    /// Median absolute deviation of the per-trial speedups.
    pub speedup_mad: f64,
    pub flop_r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub trials: usize,
    pub warmup: usize,
    pub seq_len: usize,
    /// Threads in the process while timing, when the platform exposes it.
    pub threads_observed: Option<usize>,
}

/// Number of OS threads in this process (Linux only).
pub fn thread_count() -> Option<usize> {
    std::fs::read_dir("/proc/self/task").ok().map(|d| d.count())
}

/// Smallest non-zero difference between consecutive clock reads.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_abs_deviation(xs: &[f64]) -> f64 {
    let m = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// Exactly `round(rate · len)` skims at shuffled positions.
pub fn forced_pattern<R: Rng + ?Sized>(rate: f64, len: usize, rng: &mut R) -> Vec<Decision> {
    let skims = (rate * len as f64).round() as usize;
    let mut v: Vec<Decision> = (0..len)
        .map(|i| if i < skims { Decision::Skim } else { Decision::Read })
        .collect();
    v.shuffle(rng);
    v
}

fn random_unit<R: Rng + ?Sized>(dims: BenchDims, rng: &mut R) -> Result<SkimUnitParams> {
    if dims.d_small < dims.d {
        return SkimUnitParams::init(dims.d_in, dims.d, dims.d_small, rng);
    }
    // d' = d: both branches cost the same, the control row.
    let big = LstmParams::init(dims.d_in, dims.d, dims.d, rng);
    let small = LstmParams::init(dims.d_in, dims.d, dims.d, rng);
    let s = 1.0 / ((dims.d_in + dims.d) as f64).sqrt();
    let w = (0..2 * (dims.d_in + dims.d)).map(|_| rng.random_range(-s..=s)).collect();
    Ok(SkimUnitParams {
        big,
        small,
        decision_w: Tensor::matrix(2, dims.d_in + dims.d, w)?,
        decision_b: Tensor::zeros(&[2]),
    })
}

fn time_lstm(cell: &LstmParams, xs: &[Vec<f64>]) -> Result<Duration> {
    let start = Instant::now();
    let mut state = SkimState::zeros(cell.d_out);
    for x in xs {
        let (h, c) = lstm_step(cell, x, &state.h, &state.c)?;
        state = SkimState { h, c };
    }
    let elapsed = start.elapsed();
    black_box(&state);
    Ok(elapsed)
}

fn time_skim(unit: &SkimUnitParams, xs: &[Vec<f64>], pattern: &[Decision]) -> Result<Duration> {
    let start = Instant::now();
    let mut state = SkimState::zeros(unit.d());
    for (x, &d) in xs.iter().zip(pattern) {
        // The decision network still runs; only its outcome is fixed.
        black_box(unit.decision_probs(x, &state.h)?);
        state = unit.apply(x, &state, d)?;
    }
    let elapsed = start.elapsed();
    black_box(&state);
    Ok(elapsed)
}

/// Runs the benchmark grid. Rows are ordered by grid entry, then skim rate.
pub fn bench_inference(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let resolution = timer_resolution();
    let threads_before = thread_count();
    let mut rng = SeedRng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &dims in &cfg.grid {
        let unit = random_unit(dims, &mut rng)?;
        let xs: Vec<Vec<f64>> = (0..cfg.seq_len)
            .map(|_| (0..dims.d_in).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        for &rate in &cfg.skim_rates {
            let pattern = forced_pattern(rate, cfg.seq_len, &mut rng);
            let trace = DecisionTrace {
                steps: pattern.iter().map(|&d| StepRecord::new(d, [0.5, 0.5])).collect(),
            };
            let flop_r = flop_reduction(&trace, unit.dims())?;
            for _ in 0..cfg.warmup {
                time_lstm(&unit.big, &xs)?;
                time_skim(&unit, &xs, &pattern)?;
            }
            let (mut base, mut skim, mut ratio) = (Vec::new(), Vec::new(), Vec::new());
            for trial in 0..cfg.trials {
                let (b, s) = if trial % 2 == 0 {
                    let b = time_lstm(&unit.big, &xs)?;
                    (b, time_skim(&unit, &xs, &pattern)?)
                } else {
                    let s = time_skim(&unit, &xs, &pattern)?;
                    (time_lstm(&unit.big, &xs)?, s)
                };
                if s < resolution * MIN_TICKS_PER_TRIAL || b < resolution * MIN_TICKS_PER_TRIAL {
                    return Err(Error::Bench(format!(
                        "timed loop of {} steps is within {MIN_TICKS_PER_TRIAL} ticks of a {resolution:?} timer; use a larger seq_len",
                        cfg.seq_len
                    )));
                }
                let (b, s) = (b.as_secs_f64(), s.as_secs_f64());
                base.push(b);
                skim.push(s);
                ratio.push(b / s);
            }
            let per_token = 1e6 / cfg.seq_len as f64;
            rows.push(BenchRow {
                d_in: dims.d_in,
                d: dims.d,
                d_small: dims.d_small,
                skim_rate: trace.skim_count() as f64 / trace.len() as f64,
                latency_us: median(&skim) * per_token,
                baseline_latency_us: median(&base) * per_token,
                speedup: median(&ratio),
                speedup_mad: median_abs_deviation(&ratio),
                flop_r,
            });
        }
    }
    let threads_after = thread_count();
    if threads_before != threads_after {
        return Err(Error::Bench(format!(
            "thread count changed during timing ({threads_before:?} -> {threads_after:?})"
        )));
    }
    Ok(BenchReport {
        rows,
        trials: cfg.trials,
        warmup: cfg.warmup,
        seq_len: cfg.seq_len,
        threads_observed: threads_after,
    })
}

/// Wide CSV: one line per row.
pub fn write_bench_csv(path: &Path, report: &BenchReport) -> Result<()> {
    let mut out = String::from(
        "d_in,d,d_small,skim_rate,latency_us,baseline_latency_us,speedup,speedup_mad,flop_r,trials,warmup\n",
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.d_in,
            r.d,
            r.d_small,
            r.skim_rate,
            r.latency_us,
            r.baseline_latency_us,
            r.speedup,
            r.speedup_mad,
            r.flop_r,
            report.trials,
            report.warmup
        ));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Long CSV `config,skim_rate,metric,value` with config `d_in-d-d_small`.
pub fn write_bench_long_csv(path: &Path, report: &BenchReport) -> Result<()> {
    let mut out = String::from("config,skim_rate,metric,value\n");
    for r in &report.rows {
        let config = format!("{}-{}-{}", r.d_in, r.d, r.d_small);
        for (metric, value) in [
            ("latency_us", r.latency_us),
            ("baseline_latency_us", r.baseline_latency_us),
            ("speedup", r.speedup),
            ("speedup_mad", r.speedup_mad),
            ("flop_r", r.flop_r),
        ] {
            out.push_str(&format!("{config},{},{metric},{value}\n", r.skim_rate));
        }
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}
