//! Inference-time token pruning and the baseline removal strategies.
//!
//! At stage `s` exactly `m^s = ⌊ρ^s·N⌋` patch tokens survive. The prediction
//! strategy ranks the live tokens by their keep probability; the baselines
//! rank randomly, by class-token attention, or by a learned per-position
//! score, and the structural baseline replaces the schedule with one 2×2
//! average-pool merge of the token grid.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::KeepProbs;
use crate::tensorcore::{Graph, Tensor, Var};

/// Guards `⌊ρ^s·N⌋` against `0.7³·N` landing a hair below an integer.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Prediction,
    Random,
    AttentionScore,
    Static,
    Structural,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Prediction,
        Strategy::Random,
        Strategy::AttentionScore,
        Strategy::Static,
        Strategy::Structural,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Prediction => "prediction",
            Strategy::Random => "random",
            Strategy::AttentionScore => "attention",
            Strategy::Static => "static",
            Strategy::Structural => "structural",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prediction" => Ok(Strategy::Prediction),
            "random" => Ok(Strategy::Random),
            "attention" | "attention_score" | "attention-score" => Ok(Strategy::AttentionScore),
            "static" => Ok(Strategy::Static),
            "structural" => Ok(Strategy::Structural),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Where to prune and how much: stage `s` keeps `ρ^(s+1)` of the patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub stage_blocks: Vec<usize>,
    pub rho: f64,
    pub strategy: Strategy,
}

impl PruneSchedule {
    pub fn new(stage_blocks: Vec<usize>, rho: f64, strategy: Strategy) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("keep ratio must be in (0, 1], got {rho}")));
        }
        if stage_blocks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stage blocks must be strictly increasing, got {stage_blocks:?}"
            )));
        }
        Ok(PruneSchedule {
            stage_blocks,
            rho,
            strategy,
        })
    }

    /// Three stages at a quarter, half and three quarters of the depth
    /// (`{3, 6, 9}` for 12 blocks, `{2, 3, 4}` for 6).
    pub fn default_for_depth(depth: usize, rho: f64) -> Result<Self> {
        let blocks = if depth == 6 {
            vec![2, 3, 4]
        } else {
            vec![depth / 4, depth / 2, 3 * depth / 4]
        };
        Self::new(blocks, rho, Strategy::Prediction)
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        PruneSchedule {
            strategy,
            ..self.clone()
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        Self::new(self.stage_blocks.clone(), self.rho, self.strategy)?;
        match self.stage_blocks.last() {
            Some(&last) if last >= depth => Err(Error::Config(format!(
                "stage block {last} outside a depth-{depth} model"
            ))),
            _ => Ok(()),
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_blocks.len()
    }

    /// `[ρ, ρ², ρ³, ...]`
    pub fn targets(&self) -> Vec<f64> {
        (1..=self.stages()).map(|s| self.rho.powi(s as i32)).collect()
    }

    /// `m^s = ⌊ρ^s·N⌋` (at least one) for every stage.
    pub fn kept_counts(&self, n: usize) -> Vec<usize> {
        self.targets()
            .iter()
            .map(|t| ((t * n as f64 + FLOOR_SLACK).floor() as usize).clamp(1, n))
            .collect()
    }

    /// Block before which the structural baseline pools.
    pub fn structural_block(&self, depth: usize) -> usize {
        depth / 2
    }
}

/// Indices of the `m` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn topk_select(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > scores.len() {
        return Err(Error::Index {
            op: "topk_select",
            index: m,
            len: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..m].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Uniform choice of `m` of `n` indices without replacement, ascending.
pub fn random_select(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    let mut v = index::sample(rng, n, m.min(n)).into_vec();
    v.sort_unstable();
    v
}

pub fn strategy_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Head-averaged attention from the class token to each patch token, per
/// sample, from `attn: [B, H, n, n]`.
pub fn cls_attention_scores(attn: &Tensor) -> Vec<Vec<f64>> {
    let s = attn.shape();
    let (b, h, n) = (s[0], s[1], s[2]);
    (0..b)
        .map(|bi| {
            (1..n)
                .map(|j| (0..h).map(|hi| attn.data()[((bi * h + hi) * n) * n + j]).sum::<f64>() / h as f64)
                .collect()
        })
        .collect()
}

/// Keep the class token and the selected patch tokens (`select[b]` indexes
/// patch tokens from 0, ascending), preserving order.
pub fn gather_kept(g: &mut Graph, x: Var, select: &[Vec<usize>]) -> Result<Var> {
    let rows: Vec<Vec<usize>> = select
        .iter()
        .map(|s| std::iter::once(0).chain(s.iter().map(|&k| k + 1)).collect())
        .collect();
    g.gather_rows(x, &rows)
}

/// One pruning stage driven by keep probabilities over the patch tokens of
/// `x: [B, 1+n, C]`. Returns the `[B, 1+m, C]` sequence and the selections.
pub fn prune_step(g: &mut Graph, x: Var, pi: &KeepProbs, m: usize) -> Result<(Var, Vec<Vec<usize>>)> {
    let select = (0..pi.batch())
        .map(|b| topk_select(&pi.keep(b), m))
        .collect::<Result<Vec<_>>>()?;
    Ok((gather_kept(g, x, &select)?, select))
}

/// `[m+1, N+1]` matrix averaging each 2×2 neighbourhood of a `grid×grid`
/// token layout, class token passed through.
pub fn structural_pool_matrix(grid: usize) -> Result<Tensor> {
    if grid == 0 || !grid.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "structural pooling needs an even square token grid, got side {grid}"
        )));
    }
    let n = grid * grid;
    let half = grid / 2;
    let m = half * half;
    let mut w = vec![0.0; (m + 1) * (n + 1)];
    w[0] = 1.0;
    for oy in 0..half {
        for ox in 0..half {
            let row = 1 + oy * half + ox;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = 1 + (2 * oy + dy) * grid + 2 * ox + dx;
                w[row * (n + 1) + src] = 0.25;
            }
        }
    }
    Tensor::new([m + 1, n + 1], w)
}

/// Pool `[B, N+1, C]` tokens on their grid down to `[B, N/4+1, C]`.
pub fn structural_pool(g: &mut Graph, x: Var, grid: usize) -> Result<Var> {
    let w = structural_pool_matrix(grid)?;
    if g.shape(x).get(1) != Some(&(grid * grid + 1)) {
        return Err(Error::shape("structural_pool", g.shape(x), &[grid * grid + 1]));
    }
    let wv = g.constant(w);
    g.matmul(wv, x)
}
