//! Analytic FLOPs model and wall-clock throughput bench.
//!
//! Counting convention: one multiply-accumulate is one FLOP, so an
//! `n×k · k×m` product costs `n·k·m`. A block with `n` live tokens costs
//! `(4 + 2r)·n·C² + 2·n²·C` in matmuls (QKVO projections, MLP with ratio `r`,
//! the two attention products). LayerNorm, softmax and GELU are charged 5, 5
//! and 8 FLOPs per element and reported separately.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{forward, DynamicParams, Mode, ViTConfig};
use crate::error::{Error, Result};
use crate::inference::{PruneSchedule, Strategy};
use crate::params::bind_frozen;
use crate::tensorcore::{Graph, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const CONVENTION: &str = "1 multiply-accumulate = 1 FLOP; layernorm/softmax/GELU at 5/5/8 FLOPs per element";

const LN_COST: u64 = 5;
const SOFTMAX_COST: u64 = 5;
const GELU_COST: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub schema_version: u32,
    pub convention: String,
    /// Base keep ratio when built from a schedule.
    pub rho: Option<f64>,
    pub stage_blocks: Vec<usize>,
    /// Live tokens (class token included) entering each block.
    pub tokens_per_block: Vec<usize>,
    /// Matmul FLOPs per block.
    pub per_block: Vec<u64>,
    /// Elementwise FLOPs per block.
    pub per_block_elementwise: Vec<u64>,
    pub patch_embed: u64,
    /// Final norm plus classifier.
    pub head: u64,
    /// All elementwise FLOPs of the backbone (blocks and final norm).
    pub elementwise: u64,
    /// Prediction modules, matmul and elementwise.
    pub predictor_overhead: u64,
    /// Backbone without the prediction modules.
    pub backbone_total: u64,
    /// `backbone_total + predictor_overhead`.
    pub total: u64,
    /// Same architecture, no pruning.
    pub baseline_total: u64,
    /// `(1 − backbone_total/baseline_total)·100`.
    pub reduction_pct: f64,
    /// `(1 − total/baseline_total)·100`.
    pub reduction_pct_with_predictor: f64,
    /// Predictor cost as a percentage of the FLOPs pruning saves.
    pub predictor_pct_of_savings: f64,
}

impl FlopsReport {
    pub fn gflops(&self) -> f64 {
        self.backbone_total as f64 / 1e9
    }

    pub fn gflops_with_predictor(&self) -> f64 {
        self.total as f64 / 1e9
    }

    /// `block,tokens,matmul_flops,elementwise_flops` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,tokens,matmul_flops,elementwise_flops\n");
        for (i, ((t, m), e)) in self
            .tokens_per_block
            .iter()
            .zip(&self.per_block)
            .zip(&self.per_block_elementwise)
            .enumerate()
        {
            s.push_str(&format!("{i},{t},{m},{e}\n"));
        }
        s
    }
}

fn block_matmul(n: u64, c: u64, hidden: u64) -> u64 {
    4 * n * c * c + 2 * n * c * hidden + 2 * n * n * c
}

fn block_elementwise(n: u64, c: u64, hidden: u64, heads: u64) -> u64 {
    2 * LN_COST * n * c + SOFTMAX_COST * heads * n * n + GELU_COST * n * hidden
}

/// One prediction module over `n` patch tokens.
pub fn predictor_flops(n: usize, c: usize) -> u64 {
    let (n, c) = (n as u64, c as u64);
    let (half, quarter) = (c / 2, c / 4);
    let matmul = 2 * n * c * half + n * c * half + n * half * quarter + n * quarter * 2;
    let elementwise = 2 * LN_COST * n * c + GELU_COST * n * (3 * half + quarter) + SOFTMAX_COST * n * 2;
    matmul + elementwise
}

/// FLOPs with explicit patch-token counts after each stage. Stages whose
/// count does not drop below the live count are skipped, as at inference.
pub fn flops_for_counts(cfg: &ViTConfig, stage_blocks: &[usize], counts: &[usize], with_predictor: bool) -> Result<FlopsReport> {
    cfg.validate()?;
    if stage_blocks.len() != counts.len() {
        return Err(Error::Config("one kept count per stage required".into()));
    }
    let (c, hidden, heads) = (cfg.embed_dim as u64, cfg.mlp_hidden() as u64, cfg.heads as u64);
    let n_patch = cfg.num_patches();
    let mut live = n_patch;
    let mut predictor = 0;
    let mut stage = 0;
    let (mut tokens, mut per_block, mut per_elem) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..cfg.depth {
        while stage < stage_blocks.len() && stage_blocks[stage] == b {
            if counts[stage] < live {
                if with_predictor {
                    predictor += predictor_flops(live, cfg.embed_dim);
                }
                live = counts[stage].max(1);
            }
            stage += 1;
        }
        let n = live as u64 + 1;
        tokens.push(live + 1);
        per_block.push(block_matmul(n, c, hidden));
        per_elem.push(block_elementwise(n, c, hidden, heads));
    }
    if stage != stage_blocks.len() {
        return Err(Error::Config(format!("stage blocks {stage_blocks:?} outside depth {}", cfg.depth)));
    }
    let patch_embed = n_patch as u64 * cfg.patch_dim() as u64 * c;
    let final_norm = LN_COST * (live as u64 + 1) * c;
    let head = final_norm + c * cfg.num_classes as u64;
    let elementwise = per_elem.iter().sum::<u64>() + final_norm;
    let backbone_total = per_block.iter().sum::<u64>() + patch_embed + head + per_elem.iter().sum::<u64>();
    let baseline_total = if counts.iter().all(|&m| m >= n_patch) {
        backbone_total
    } else {
        flops_for_counts(cfg, &[], &[], false)?.backbone_total
    };
    let total = backbone_total + predictor;
    let saved = baseline_total.saturating_sub(backbone_total);
    Ok(FlopsReport {
        schema_version: SCHEMA_VERSION,
        convention: CONVENTION.into(),
        rho: None,
        stage_blocks: stage_blocks.to_vec(),
        tokens_per_block: tokens,
        per_block,
        per_block_elementwise: per_elem,
        patch_embed,
        head,
        elementwise,
        predictor_overhead: predictor,
        backbone_total,
        total,
        baseline_total,
        reduction_pct: (1.0 - backbone_total as f64 / baseline_total as f64) * 100.0,
        reduction_pct_with_predictor: (1.0 - total as f64 / baseline_total as f64) * 100.0,
        predictor_pct_of_savings: if saved == 0 {
            0.0
        } else {
            predictor as f64 / saved as f64 * 100.0
        },
    })
}

/// FLOPs of `cfg` under `schedule`; the structural strategy is counted as
/// one 2×2 merge at the middle block.
pub fn flops_vit(cfg: &ViTConfig, schedule: &PruneSchedule) -> Result<FlopsReport> {
    schedule.validate(cfg.depth)?;
    let n = cfg.num_patches();
    let mut report = if schedule.strategy == Strategy::Structural {
        flops_for_counts(cfg, &[schedule.structural_block(cfg.depth)], &[n / 4], false)?
    } else {
        let with_predictor = schedule.strategy == Strategy::Prediction;
        flops_for_counts(cfg, &schedule.stage_blocks, &schedule.kept_counts(n), with_predictor)?
    };
    report.rho = Some(schedule.rho);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthRow {
    pub embed_dim: usize,
    pub gflops_full: f64,
    pub gflops_pruned: f64,
}

/// The architecture of `base` at several widths, unpruned and pruned.
pub fn width_scaling_table(base: &ViTConfig, embed_dims: &[usize], schedule: &PruneSchedule) -> Result<Vec<WidthRow>> {
    embed_dims
        .iter()
        .map(|&d| {
            let cfg = base.with_embed_dim(d);
            let full = flops_for_counts(&cfg, &[], &[], false)?;
            let pruned = flops_vit(&cfg, schedule)?;
            Ok(WidthRow {
                embed_dim: d,
                gflops_full: full.gflops(),
                gflops_pruned: pruned.gflops(),
            })
        })
        .collect()
}

pub fn width_table_csv(rows: &[WidthRow]) -> String {
    let mut s = String::from("embed_dim,gflops_full,gflops_pruned\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.embed_dim, r.gflops_full, r.gflops_pruned));
    }
    s
}

/// Keep ratio for a single stage at `block` whose FLOPs match `target`
/// (bisection on the kept count).
pub fn equal_flops_single_stage(cfg: &ViTConfig, block: usize, target: u64) -> Result<f64> {
    let n = cfg.num_patches();
    let cost = |m: usize| flops_for_counts(cfg, &[block], &[m], true).map(|r| r.total);
    let (mut best, mut best_gap) = (n, u64::MAX);
    for m in 1..=n {
        let gap = cost(m)?.abs_diff(target);
        if gap < best_gap {
            best = m;
            best_gap = gap;
        }
    }
    // a ρ whose ⌊ρN⌋ is exactly `best`
    Ok((best as f64 + 0.5) / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallClockStats {
    /// Mean seconds per batch.
    pub mean: f64,
    pub std: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub batch_size: usize,
    pub rho: f64,
    pub workers: usize,
    pub warmup: usize,
    pub images_per_second: f64,
    pub baseline_images_per_second: f64,
    pub speedup_pct: f64,
    pub wall_clock_stats: WallClockStats,
    pub baseline_wall_clock_stats: WallClockStats,
    /// Analytic FLOPs reduction for the same schedule, for comparison.
    pub flops_reduction_pct: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        format!(
            "batch_size,rho,workers,images_per_second,baseline_images_per_second,speedup_pct,flops_reduction_pct\n{},{},{},{:.3},{:.3},{:.3},{:.3}\n",
            self.batch_size,
            self.rho,
            self.workers,
            self.images_per_second,
            self.baseline_images_per_second,
            self.speedup_pct,
            self.flops_reduction_pct
        )
    }
}

/// Worker count: `DYNTOK_THREADS` if set, else available parallelism.
pub fn worker_count() -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("DYNTOK_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(avail),
        _ => avail,
    }
}

fn infer_batch(params: &DynamicParams, cfg: &ViTConfig, schedule: &PruneSchedule, images: &Tensor) -> Result<()> {
    let mut g = Graph::new();
    let pv = bind_frozen(&mut g, params);
    forward(&mut g, images, &pv, cfg, schedule, Mode::Infer { seed: 0 })?;
    Ok(())
}

/// Seconds to push `images` through inference, split across `workers`.
fn time_batch(params: &DynamicParams, cfg: &ViTConfig, schedule: &PruneSchedule, shards: &[Tensor]) -> Result<f64> {
    let start = Instant::now();
    if shards.len() == 1 {
        infer_batch(params, cfg, schedule, &shards[0])?;
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = shards
                .iter()
                .map(|shard| s.spawn(move || infer_batch(params, cfg, schedule, shard)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("bench worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?;
    }
    Ok(start.elapsed().as_secs_f64())
}

fn shard(images: &Tensor, workers: usize) -> Result<Vec<Tensor>> {
    let s = images.shape();
    let b = s[0];
    let per: usize = s[1..].iter().product();
    let workers = workers.clamp(1, b.max(1));
    let chunk = b.div_ceil(workers);
    (0..b)
        .step_by(chunk)
        .map(|start| {
            let end = (start + chunk).min(b);
            let mut shape = s.to_vec();
            shape[0] = end - start;
            Tensor::new(shape, images.data()[start * per..end * per].to_vec())
        })
        .collect()
}

fn median_of_means(xs: &[f64]) -> f64 {
    let groups = 5.min(xs.len()).max(1);
    let size = xs.len() / groups;
    let mut means: Vec<f64> = (0..groups)
        .map(|g| {
            let part = if g + 1 == groups { &xs[g * size..] } else { &xs[g * size..(g + 1) * size] };
            part.iter().sum::<f64>() / part.len() as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    means[means.len() / 2]
}

fn stats(xs: &[f64]) -> WallClockStats {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len().max(2) - 1) as f64;
    WallClockStats {
        mean,
        std: var.sqrt(),
        iterations: xs.len(),
    }
}

/// Images per second of pruned inference against the same weights with
/// no pruning. Pruned and unpruned batches alternate so drift hits both.
pub fn throughput_bench(
    params: &DynamicParams,
    cfg: &ViTConfig,
    schedule: &PruneSchedule,
    images: &Tensor,
    iterations: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if warmup < 3 {
        return Err(Error::Config(format!("at least 3 warmup iterations required, got {warmup}")));
    }
    if iterations < 10 {
        return Err(Error::Config(format!("at least 10 timed iterations required, got {iterations}")));
    }
    let batch = images.shape().first().copied().unwrap_or(0);
    if batch == 0 {
        return Err(Error::Config("bench batch is empty".into()));
    }
    let workers = worker_count();
    let shards = shard(images, workers)?;
    let baseline = PruneSchedule::new(Vec::new(), 1.0, schedule.strategy)?;
    for _ in 0..warmup {
        time_batch(params, cfg, schedule, &shards)?;
        time_batch(params, cfg, &baseline, &shards)?;
    }
    let (mut pruned, mut base) = (Vec::with_capacity(iterations), Vec::with_capacity(iterations));
    for i in 0..iterations {
        if i % 2 == 0 {
            pruned.push(time_batch(params, cfg, schedule, &shards)?);
            base.push(time_batch(params, cfg, &baseline, &shards)?);
        } else {
            base.push(time_batch(params, cfg, &baseline, &shards)?);
            pruned.push(time_batch(params, cfg, schedule, &shards)?);
        }
    }
    let ips = batch as f64 / median_of_means(&pruned);
    let base_ips = batch as f64 / median_of_means(&base);
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        batch_size: batch,
        rho: schedule.rho,
        workers: shards.len(),
        warmup,
        images_per_second: ips,
        baseline_images_per_second: base_ips,
        speedup_pct: (ips / base_ips - 1.0) * 100.0,
        wall_clock_stats: stats(&pruned),
        baseline_wall_clock_stats: stats(&base),
        flops_reduction_pct: flops_vit(cfg, schedule)?.reduction_pct,
    })
}
