//! Inference-mode evaluation.

use std::thread;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::train::argmax;
use crate::backbone::{forward, DynamicParams, Mode, ViTConfig};
use crate::complexity::worker_count;
use crate::error::Result;
use crate::inference::PruneSchedule;
use crate::params::bind_frozen;
use crate::tensorcore::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub rho: f64,
    pub images: usize,
    pub top1: f64,
    /// Mean number of patch tokens alive after each stage.
    pub kept_per_stage: Vec<f64>,
    /// `confusion[label][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// Logits of every image, in dataset order.
    #[serde(skip)]
    pub logits: Vec<Vec<f64>>,
}

pub const EVAL_BATCH: usize = 64;

struct Partial {
    logits: Vec<Vec<f64>>,
    kept: Vec<f64>,
}

fn run_batch(
    params: &DynamicParams,
    cfg: &ViTConfig,
    schedule: &PruneSchedule,
    data: &Dataset,
    idx: &[usize],
    seed: u64,
) -> Result<Partial> {
    let (images, _) = data.batch(idx);
    let mut g = Graph::new();
    let pv = bind_frozen(&mut g, params);
    let out = forward(&mut g, &images, &pv, cfg, schedule, Mode::Infer { seed })?;
    let l = g.value(out.logits);
    let k = l.shape()[1];
    Ok(Partial {
        logits: l.data().chunks(k).map(<[f64]>::to_vec).collect(),
        kept: out
            .kept
            .iter()
            .map(|stage| stage.iter().map(Vec::len).sum::<usize>() as f64)
            .collect(),
    })
}

/// Top-1 accuracy, kept-token counts and confusion matrix over `data`.
///
/// Batches are fixed-size and the random strategy is seeded per batch, so
/// the result does not depend on the worker count.
pub fn evaluate(
    params: &DynamicParams,
    cfg: &ViTConfig,
    schedule: &PruneSchedule,
    data: &Dataset,
    seed: u64,
) -> Result<EvalReport> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let batches: Vec<&[usize]> = idx.chunks(EVAL_BATCH).collect();
    let workers = worker_count().min(batches.len()).max(1);
    let results: Vec<Result<Partial>> = if workers == 1 {
        batches
            .iter()
            .enumerate()
            .map(|(i, b)| run_batch(params, cfg, schedule, data, b, seed.wrapping_add(i as u64)))
            .collect()
    } else {
        let mut slots: Vec<Option<Result<Partial>>> = (0..batches.len()).map(|_| None).collect();
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let batches = &batches;
                    s.spawn(move || {
                        (w..batches.len())
                            .step_by(workers)
                            .map(|i| (i, run_batch(params, cfg, schedule, data, batches[i], seed.wrapping_add(i as u64))))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every batch evaluated")).collect()
    };

    let k = cfg.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut logits = Vec::with_capacity(data.len());
    let mut kept = vec![0.0; 0];
    let mut hits = 0;
    for r in results {
        let r = r?;
        if kept.is_empty() {
            kept = vec![0.0; r.kept.len()];
        }
        for (a, b) in kept.iter_mut().zip(&r.kept) {
            *a += b;
        }
        logits.extend(r.logits);
    }
    for (row, &label) in logits.iter().zip(&data.labels) {
        let pred = argmax(row);
        let label = label as usize;
        if label < k {
            confusion[label][pred] += 1;
        }
        hits += usize::from(pred == label);
    }
    let n = data.len().max(1) as f64;
    Ok(EvalReport {
        strategy: schedule.strategy.name().to_string(),
        rho: schedule.rho,
        images: data.len(),
        top1: hits as f64 / n,
        kept_per_stage: kept.iter().map(|v| v / n).collect(),
        confusion,
        logits,
    })
}
