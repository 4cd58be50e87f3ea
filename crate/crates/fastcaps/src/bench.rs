//! Wall-clock benchmarks for the routing claim: median-of-repeats timing of
//! the routing loop alone and of full training steps, with warmup excluded
//! and per-phase speedup ratios against a baseline report.

use crate::checkpoint::AdamState;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::rng::SplitMix64;
use crate::routing::{self, PredictionTensor, RoutingGrouping};
use crate::tensor::Tensor;
use crate::train::{train_step, TrainOptions};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

pub const MIN_REPEATS: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseStat {
    pub phase: String,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    /// Raw per-repeat samples, retained for inspection.
    pub samples: Vec<f64>,
}

impl PhaseStat {
    fn from_samples(phase: &str, mut samples: Vec<f64>) -> PhaseStat {
        let mut sorted = samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        let stat = PhaseStat {
            phase: phase.to_string(),
            median_s: median,
            min_s: sorted[0],
            max_s: *sorted.last().unwrap(),
            samples: std::mem::take(&mut samples),
        };
        stat
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub configuration: String,
    pub coefficient_count: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub phases: Vec<PhaseStat>,
    /// phase name -> baseline_median / this_median
    pub speedup_vs_baseline: BTreeMap<String, f64>,
}

impl BenchReport {
    pub fn phase(&self, name: &str) -> Option<&PhaseStat> {
        self.phases.iter().find(|p| p.phase == name)
    }

    /// Fill `speedup_vs_baseline` as baseline_median / self_median per phase.
    pub fn compute_speedup(&mut self, baseline: &BenchReport) {
        self.speedup_vs_baseline.clear();
        for p in &self.phases {
            if let Some(b) = baseline.phase(&p.phase) {
                if p.median_s > 0.0 {
                    self.speedup_vs_baseline
                        .insert(p.phase.clone(), b.median_s / p.median_s);
                }
            }
        }
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "configuration: {}\ncoefficients:  {}\nrepeats: {} (warmup {})\n",
            self.configuration, self.coefficient_count, self.repeats, self.warmup
        );
        s.push_str(&format!(
            "{:<18}{:>14}{:>14}{:>14}{:>12}\n",
            "phase", "median_s", "min_s", "max_s", "speedup"
        ));
        for p in &self.phases {
            let sp = self
                .speedup_vs_baseline
                .get(&p.phase)
                .map(|v| format!("{v:.2}x"))
                .unwrap_or_else(|| "-".to_string());
            s.push_str(&format!(
                "{:<18}{:>14.6}{:>14.6}{:>14.6}{:>12}\n",
                p.phase, p.median_s, p.min_s, p.max_s, sp
            ));
        }
        s
    }
}

fn check_repeats(repeats: usize) -> Result<()> {
    if repeats < MIN_REPEATS {
        return Err(Error::InvalidArgument(format!(
            "repeats must be >= {MIN_REPEATS}, got {repeats}"
        )));
    }
    Ok(())
}

/// Time `route()` alone on fixed random votes. Each timing sample runs
/// enough calls back to back to cover ~10ms, so microsecond-scale instances
/// still produce stable medians.
#[allow(clippy::too_many_arguments)]
pub fn bench_routing(
    children: usize,
    parents: usize,
    dim: usize,
    grouping: &RoutingGrouping,
    iterations: usize,
    repeats: usize,
    warmup: usize,
    label: &str,
) -> Result<BenchReport> {
    check_repeats(repeats)?;
    let mut rng = SplitMix64::new(0xBE) // fixed workload seed
        .fork(children as u64 ^ (parents as u64) << 24 ^ (dim as u64) << 40);
    let data: Vec<f32> = (0..children * parents * dim)
        .map(|_| rng.uniform(-1.0, 1.0) as f32)
        .collect();
    let votes = PredictionTensor::new(Tensor::from_vec(&[children, parents, dim], data)?)?;
    let ungrouped = grouping.is_identity();

    let run_once = |calls: usize| -> Result<f64> {
        let t0 = Instant::now();
        for _ in 0..calls {
            if ungrouped {
                let out = routing::route_original(&votes, iterations)?;
                std::hint::black_box(&out.0.activations);
            } else {
                let out = routing::route(&votes, grouping, iterations)?;
                std::hint::black_box(&out.0.activations);
            }
        }
        Ok(t0.elapsed().as_secs_f64())
    };

    // calibrate calls-per-sample
    let mut calls = 1usize;
    loop {
        let t = run_once(calls)?;
        if t >= 0.010 || calls >= 1 << 20 {
            break;
        }
        calls *= 2;
    }
    for _ in 0..warmup {
        run_once(calls)?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        samples.push(run_once(calls)? / calls as f64);
    }
    Ok(BenchReport {
        configuration: label.to_string(),
        coefficient_count: routing::coefficient_count(grouping, parents),
        repeats,
        warmup,
        phases: vec![PhaseStat::from_samples("routing-forward", samples)],
        speedup_vs_baseline: BTreeMap::new(),
    })
}

/// Time full training steps for a built model over a fixed batch count.
/// Phases: the routing loop inside the forward pass, the whole forward
/// pass, and the full step (forward + backward + optimizer). Batch tensors
/// are assembled before the clock starts.
#[allow(clippy::too_many_arguments)]
pub fn bench_epoch(
    config: &ModelConfig,
    data: &DatasetManifest,
    batches: usize,
    batch_size: usize,
    repeats: usize,
    warmup: usize,
    opts: &TrainOptions,
    label: &str,
) -> Result<BenchReport> {
    check_repeats(repeats)?;
    if batches == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("need at least one batch".into()));
    }
    let mut model = Model::<f32>::build(config.clone(), 0xEB)?;
    let n_needed = batches * batch_size;
    if data.len() < n_needed {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} samples, benchmark needs {n_needed}",
            data.len()
        )));
    }
    // pre-assemble batches: timing excludes the data pipeline
    let mut prepared = Vec::with_capacity(batches);
    for b in 0..batches {
        let idx: Vec<usize> = (b * batch_size..(b + 1) * batch_size).collect();
        let (batch, targets) = data.batch(&idx, opts.slice_axis)?;
        let input: Tensor<f32> = batch.cast();
        prepared.push((input, targets));
    }
    let mut adam = AdamState::new(&model)?;

    let mut routing_samples = Vec::with_capacity(repeats);
    let mut forward_samples = Vec::with_capacity(repeats);
    let mut step_samples = Vec::with_capacity(repeats);
    for rep in 0..warmup + repeats {
        let mut routing_s = 0.0;
        let mut forward_s = 0.0;
        let t_epoch = Instant::now();
        for (input, targets) in &prepared {
            let t_fwd = Instant::now();
            let fwd = model.forward(input)?;
            forward_s += t_fwd.elapsed().as_secs_f64();
            routing_s += fwd.routing_seconds;
            drop(fwd);
            train_step(&mut model, input, targets, opts, &mut adam)?;
        }
        let step_s = t_epoch.elapsed().as_secs_f64();
        if rep >= warmup {
            routing_samples.push(routing_s);
            forward_samples.push(forward_s);
            // the timed region ran forward twice (once instrumented, once
            // inside the step); subtract the extra instrumented pass
            step_samples.push(step_s - forward_s);
        }
    }

    let grouping = model.grouping()?;
    Ok(BenchReport {
        configuration: label.to_string(),
        coefficient_count: routing::coefficient_count(&grouping, config.classes),
        repeats,
        warmup,
        phases: vec![
            PhaseStat::from_samples("routing-forward", routing_samples),
            PhaseStat::from_samples("full-forward", forward_samples),
            PhaseStat::from_samples("full-step", step_samples),
        ],
        speedup_vs_baseline: BTreeMap::new(),
    })
}
