//! Attention masking: self-attention in which dropped tokens neither send
//! nor receive information while the sequence keeps its full length.
//!
//! Row `i` of the attention matrix is renormalised over the columns `j` with
//! `G_ij = 1`, where `G_ii = 1` and `G_ij = D̂_j` otherwise. Restricted to the
//! kept tokens this is exactly ordinary attention over the kept subsequence.

use crate::error::{Error, Result};
use crate::params::{leaf_params, linear};
use crate::predictor::DecisionMask;
use crate::tensorcore::{Graph, Var};

leaf_params! {
    /// Projection weights of one multi-head self-attention layer.
    /// Weights are `[C, C]`, biases `[C]`.
    pub struct AttentionParams { wq, bq, wk, bk, wv, bv, wo, bo }
}

/// Per-sample `(n, n)` connectivity matrix in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphMask {
    batch: usize,
    n: usize,
    values: Vec<u8>,
}

impl GraphMask {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, b: usize, i: usize, j: usize) -> u8 {
        self.values[(b * self.n + i) * self.n + j]
    }

    /// Rows of sample `b`.
    pub fn rows(&self, b: usize) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(b, i, j)).collect())
            .collect()
    }
}

/// `G_ij = 1` on the diagonal, `D̂_j` elsewhere.
pub fn build_graph_mask(mask: &DecisionMask) -> GraphMask {
    let (batch, n) = (mask.batch(), mask.len());
    let mut values = vec![0u8; batch * n * n];
    for b in 0..batch {
        let row = mask.sample(b);
        for i in 0..n {
            for j in 0..n {
                values[(b * n + i) * n + j] = if i == j || row[j] != 0.0 { 1 } else { 0 };
            }
        }
    }
    GraphMask { batch, n, values }
}

pub struct AttentionOutput {
    /// `[B, n, C]` after the output projection.
    pub out: Var,
    /// `[B, H, n, n]` attention probabilities.
    pub attn: Var,
}

/// Multi-head self-attention over `x: [B, n, C]`.
///
/// With `keep: Some([B, n])` the softmax is restricted by the graph mask
/// built from `keep`; gradients reach `keep` when it carries them.
pub fn masked_attention(
    g: &mut Graph,
    x: Var,
    p: &AttentionParams<Var>,
    heads: usize,
    keep: Option<Var>,
) -> Result<AttentionOutput> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Contract(format!("attention expects [B, n, C], got {s:?}")));
    }
    let (b, n, c) = (s[0], s[1], s[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("embed dim {c} not divisible by {heads} heads")));
    }
    let d = c / heads;
    let split = |g: &mut Graph, w: Var, bias: Var| -> Result<Var> {
        let y = linear(g, x, w, bias)?;
        let y = g.reshape(y, &[b, n, heads, d])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split(g, p.wq, p.bq)?;
    let k = split(g, p.wk, p.bk)?;
    let v = split(g, p.wv, p.bv)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = match keep {
        Some(keep) => g.masked_softmax(scores, keep)?,
        None => g.softmax(scores)?,
    };
    let o = g.matmul(attn, v)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, n, c])?;
    let out = linear(g, o, p.wo, p.bo)?;
    Ok(AttentionOutput { out, attn })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::{bind_frozen, trunc_normal};
    use crate::tensorcore::tests::{grad_check, random_tensor};
    use crate::tensorcore::Tensor;

    fn random_params(rng: &mut ChaCha8Rng, c: usize) -> AttentionParams {
        let w = |rng: &mut ChaCha8Rng| trunc_normal(rng, &[c, c], 0.3);
        let bias = |rng: &mut ChaCha8Rng| random_tensor(rng, &[c], -0.1, 0.1);
        AttentionParams {
            wq: w(rng),
            bq: bias(rng),
            wk: w(rng),
            bk: bias(rng),
            wv: w(rng),
            bv: bias(rng),
            wo: w(rng),
            bo: bias(rng),
        }
    }

    fn random_mask(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Tensor {
        let mut data = vec![0.0; b * n];
        for (i, v) in data.iter_mut().enumerate() {
            *v = if i % n == 0 || rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        }
        Tensor::new([b, n], data).unwrap()
    }

    #[test]
    fn graph_mask_formula() {
        let m = DecisionMask::new(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let gm = build_graph_mask(&m);
        assert_eq!(gm.rows(0), vec![vec![1, 0, 1], vec![1, 1, 1], vec![1, 0, 1]]);
        let ones = build_graph_mask(&DecisionMask::ones(2, 4));
        assert!((0..2).all(|b| gm_all_ones(&ones, b)));
    }

    fn gm_all_ones(gm: &GraphMask, b: usize) -> bool {
        gm.rows(b).iter().flatten().all(|&v| v == 1)
    }

    #[test]
    fn full_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 8);
        let x = random_tensor(&mut rng, &[2, 5, 8], -1.0, 1.0);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let xv = g.constant(x);
        let plain = masked_attention(&mut g, xv, &pv, 2, None).unwrap();
        let k = g.constant(Tensor::ones([2, 5]));
        let masked = masked_attention(&mut g, xv, &pv, 2, Some(k)).unwrap();
        assert!(g.value(plain.out).max_abs_diff(g.value(masked.out)).unwrap() < 1e-12);
    }

    #[test]
    fn single_kept_column() {
        // keep = [1, 0, 0, 1]: every row sees {0, 3} plus itself
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng, 4);
        let x = random_tensor(&mut rng, &[1, 4, 4], -1.0, 1.0);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let xv = g.constant(x);
        let k = g.constant(Tensor::new([1, 4], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = masked_attention(&mut g, xv, &pv, 1, Some(k)).unwrap();
        let a = g.value(out.attn).data().to_vec();
        for i in 0..4 {
            let row = &a[i * 4..(i + 1) * 4];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..4 {
                let allowed = i == j || j == 0 || j == 3;
                if !allowed {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
        // kept rows never look at dropped columns
        assert!(a[5] > 0.0 && a[10] > 0.0);
    }

    #[test]
    fn gradient_through_scores_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 4);
        let x = random_tensor(&mut rng, &[2, 4, 4], -2.0, 2.0);
        let keep = random_mask(&mut rng, 2, 4);
        let w = random_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
        let mut inputs = vec![x, keep];
        p.visit_named("", &mut |_, t| inputs.push(t.clone()));
        use crate::params::ParamTree;
        let err = grad_check(&inputs, |g, v| {
            let p = AttentionParams {
                wq: v[2],
                bq: v[3],
                wk: v[4],
                bk: v[5],
                wv: v[6],
                bv: v[7],
                wo: v[8],
                bo: v[9],
            };
            let out = masked_attention(g, v[0], &p, 2, Some(v[1]))?;
            let wv = g.constant(w.clone());
            let y = g.mul(out.out, wv)?;
            g.sum_all(y)
        });
        assert!(err < 1e-4, "rel err {err}");
    }

    proptest::proptest! {
        #[test]
        fn graph_mask_follows_columns(mut bits in proptest::collection::vec(proptest::bool::ANY, 1..24)) {
            bits[0] = true;
            let n = bits.len();
            let mask = DecisionMask::new(1, n, bits.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap();
            let g = build_graph_mask(&mask);
            for i in 0..n {
                for j in 0..n {
                    let want = u8::from(i == j || bits[j]);
                    proptest::prop_assert_eq!(g.get(0, i, j), want);
                }
            }
        }

        #[test]
        fn masked_rows_are_distributions(seed in 0u64..1000, n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, 8);
            let x = random_tensor(&mut rng, &[1, n, 8], -3.0, 3.0);
            let keep = random_mask(&mut rng, 1, n);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let kv = g.constant(keep.clone());
            let pv = bind_frozen(&mut g, &p);
            let out = masked_attention(&mut g, xv, &pv, 2, Some(kv)).unwrap();
            let a = g.value(out.attn);
            for (r, row) in a.data().chunks(n).enumerate() {
                let i = r % n;
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (j, &v) in row.iter().enumerate() {
                    if i != j && keep.data()[j] == 0.0 {
                        proptest::prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }
}
