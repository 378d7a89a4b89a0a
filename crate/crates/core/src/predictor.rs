//! The token-keep prediction module.
//!
//! Each patch token gets a local feature (its own projection) and a global
//! feature (the masked mean of a second projection over the tokens still
//! alive). The concatenation goes through a small MLP whose two-way softmax
//! gives drop/keep probabilities `π`. Training samples hard decisions from
//! `π` with a straight-through Gumbel-Softmax and folds them into the running
//! decision mask by multiplication, so a dropped token stays dropped.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{leaf_params, linear, linear_init};
use crate::tensorcore::{Graph, Tensor, Var, LN_EPS};

/// Added to `π` before taking logs for the Gumbel logits.
pub const GUMBEL_LOG_EPS: f64 = 1e-9;

leaf_params! {
    /// One prediction module (one per sparsification stage).
    ///
    /// Local and global paths are `LayerNorm → Linear(C, C/2) → GELU`; the
    /// head is `Linear(C, C/2) → GELU → Linear(C/2, C/4) → GELU → Linear(C/4, 2)`.
    pub struct PredictorParams {
        local_ln_g, local_ln_b, local_w, local_b,
        global_ln_g, global_ln_b, global_w, global_b,
        head_w1, head_b1, head_w2, head_b2, head_w3, head_b3,
    }
}

impl PredictorParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, embed_dim: usize) -> Self {
        let c = embed_dim;
        let (local_w, local_b) = linear_init(rng, c, c / 2);
        let (global_w, global_b) = linear_init(rng, c, c / 2);
        let (head_w1, head_b1) = linear_init(rng, c, c / 2);
        let (head_w2, head_b2) = linear_init(rng, c / 2, c / 4);
        let (head_w3, head_b3) = linear_init(rng, c / 4, 2);
        PredictorParams {
            local_ln_g: Tensor::ones([c]),
            local_ln_b: Tensor::zeros([c]),
            local_w,
            local_b,
            global_ln_g: Tensor::ones([c]),
            global_ln_b: Tensor::zeros([c]),
            global_w,
            global_b,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            head_w3,
            head_b3,
        }
    }
}

/// Per-sample binary keep mask over the full sequence (class token at 0).
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionMask {
    batch: usize,
    len: usize,
    values: Vec<f64>,
}

impl DecisionMask {
    /// Validates `{0,1}` entries and a kept class token in every sample.
    pub fn new(batch: usize, len: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * len || len == 0 {
            return Err(Error::shape("decision_mask", &[batch, len], &[values.len()]));
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("decision mask entries must be 0 or 1".into()));
        }
        if (0..batch).any(|b| values[b * len] != 1.0) {
            return Err(Error::Contract("class token must be kept".into()));
        }
        Ok(DecisionMask { batch, len, values })
    }

    pub fn ones(batch: usize, len: usize) -> Self {
        DecisionMask {
            batch,
            len,
            values: vec![1.0; batch * len],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [b, n] => Self::new(*b, *n, t.data().to_vec()),
            s => Err(Error::Contract(format!("decision mask must be [B, N+1], got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.batch, self.len], self.values.clone()).expect("consistent mask")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Sequence length including the class token.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        &self.values[b * self.len..(b + 1) * self.len]
    }

    /// Kept patch-token count of sample `b` (class token excluded).
    pub fn kept_patches(&self, b: usize) -> usize {
        self.sample(b)[1..].iter().filter(|&&v| v != 0.0).count()
    }

    /// `D̂ ⊙ D` with the class entry forced to 1.
    pub fn update(&self, new: &DecisionMask) -> Result<DecisionMask> {
        if self.batch != new.batch || self.len != new.len {
            return Err(Error::shape(
                "update_mask",
                &[self.batch, self.len],
                &[new.batch, new.len],
            ));
        }
        let mut values: Vec<f64> = self.values.iter().zip(&new.values).map(|(a, b)| a * b).collect();
        for b in 0..self.batch {
            values[b * self.len] = 1.0;
        }
        Ok(DecisionMask {
            batch: self.batch,
            len: self.len,
            values,
        })
    }
}

/// `π` as a plain tensor `[B, N, 2]`; column 0 drop, column 1 keep.
#[derive(Clone, Debug, PartialEq)]
pub struct KeepProbs(pub Tensor);

impl KeepProbs {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [_, _, 2] => Ok(KeepProbs(t)),
            s => Err(Error::Contract(format!("keep probabilities must be [B, N, 2], got {s:?}"))),
        }
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[1]
    }

    /// Keep column of sample `b`.
    pub fn keep(&self, b: usize) -> Vec<f64> {
        let n = self.tokens();
        self.0.data()[b * n * 2..(b + 1) * n * 2]
            .chunks(2)
            .map(|r| r[1])
            .collect()
    }
}

fn ln_linear_gelu(g: &mut Graph, x: Var, ln_g: Var, ln_b: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.layer_norm(x, ln_g, ln_b, LN_EPS)?;
    let h = linear(g, h, w, b)?;
    g.gelu(h)
}

/// `z_local = GELU(Linear(LN(x)))`, `[B, N, C] → [B, N, C/2]`.
pub fn local_features(g: &mut Graph, x: Var, p: &PredictorParams<Var>) -> Result<Var> {
    ln_linear_gelu(g, x, p.local_ln_g, p.local_ln_b, p.local_w, p.local_b)
}

/// Masked average pooling `Σ D̂ᵢuᵢ / Σ D̂ᵢ`: `u: [B, N, C']`, `mask: [B, N]` → `[B, C']`.
pub fn agg(g: &mut Graph, u: Var, mask: Var) -> Result<Var> {
    let (us, ms) = (g.shape(u).to_vec(), g.shape(mask).to_vec());
    if us.len() != 3 || ms != us[..2] {
        return Err(Error::shape("agg", &us, &ms));
    }
    for (b, row) in g.value(mask).data().chunks(us[1]).enumerate() {
        if row.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Contract(format!("agg: sample {b} has no kept tokens")));
        }
    }
    let m3 = g.reshape(mask, &[us[0], us[1], 1])?;
    let weighted = g.mul(u, m3)?;
    let num = g.sum_axis(weighted, 1)?;
    let den = g.sum_axis(mask, 1)?;
    let den = g.reshape(den, &[us[0], 1])?;
    g.div(num, den)
}

/// `π = softmax(MLP([z_local, z_global]))` for patch tokens `x: [B, N, C]`
/// under the current mask `[B, N]`. Returns `[B, N, 2]`.
pub fn predict_probs(g: &mut Graph, x: Var, mask: Var, p: &PredictorParams<Var>) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n) = (s[0], s[1]);
    let local = local_features(g, x, p)?;
    let u = ln_linear_gelu(g, x, p.global_ln_g, p.global_ln_b, p.global_w, p.global_b)?;
    let global = agg(g, u, mask)?;
    let half = g.shape(global)[1];
    let global = g.reshape(global, &[b, 1, half])?;
    let zeros = g.constant(Tensor::zeros([b, n, half]));
    let global = g.add(zeros, global)?;
    let z = g.concat_last(local, global)?;
    let h = linear(g, z, p.head_w1, p.head_b1)?;
    let h = g.gelu(h)?;
    let h = linear(g, h, p.head_w2, p.head_b2)?;
    let h = g.gelu(h)?;
    let logits = linear(g, h, p.head_w3, p.head_b3)?;
    g.softmax(logits)
}

/// Standard Gumbel noise `−ln(−ln U)` with the given shape.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Straight-through Gumbel-Softmax keep decision from `pi: [B, N, 2]`.
///
/// The forward value is the hard argmax of `(ln(π + ε) + noise)/τ` as a
/// `{0,1}` keep indicator `[B, N]`; the backward pass sees the soft
/// relaxation `softmax((ln(π + ε) + noise)/τ)[.., 1]`.
pub fn gumbel_sample_with_noise(g: &mut Graph, pi: Var, temperature: f64, noise: &Tensor) -> Result<Var> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!("Gumbel temperature must be > 0, got {temperature}")));
    }
    let s = g.shape(pi).to_vec();
    if s.len() != 3 || s[2] != 2 || noise.shape() != s.as_slice() {
        return Err(Error::shape("gumbel_sample", &s, noise.shape()));
    }
    let shifted = g.add_scalar(pi, GUMBEL_LOG_EPS)?;
    let logp = g.log(shifted, f64::MIN_POSITIVE)?;
    let nv = g.constant(noise.clone());
    let logits = g.add(logp, nv)?;
    let logits = g.scale(logits, 1.0 / temperature)?;
    let soft = g.softmax(logits)?;
    let hard: Vec<f64> = g
        .value(logits)
        .data()
        .chunks(2)
        .map(|r| if r[1] > r[0] { 1.0 } else { 0.0 })
        .collect();
    let soft_keep = g.slice(soft, 2, 1, 1)?;
    let soft_keep = g.reshape(soft_keep, &[s[0], s[1]])?;
    g.straight_through(soft_keep, Tensor::new([s[0], s[1]], hard)?)
}

pub fn gumbel_sample<R: Rng + ?Sized>(g: &mut Graph, pi: Var, temperature: f64, rng: &mut R) -> Result<Var> {
    let noise = gumbel_noise(rng, g.shape(pi));
    gumbel_sample_with_noise(g, pi, temperature, &noise)
}

/// `D̂ ← D̂ ⊙ D` on graph masks `[B, N+1]`; the class column of `new` is
/// overwritten with 1 so the class token always survives.
pub fn update_mask(g: &mut Graph, prev: Var, new_patch: Var) -> Result<Var> {
    let s = g.shape(new_patch).to_vec();
    let ones = g.constant(Tensor::ones([s[0], 1]));
    let full = g.concat(ones, new_patch, 1)?;
    if g.shape(full) != g.shape(prev) {
        return Err(Error::shape("update_mask", g.shape(prev), g.shape(full)));
    }
    g.mul(prev, full)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::{bind, bind_frozen, ParamTree};
    use crate::tensorcore::tests::{grad_check, random_tensor};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_predictor(rng: &mut ChaCha8Rng, c: usize) -> PredictorParams {
        let mut p = PredictorParams::init(rng, c);
        p.visit_named_mut("", &mut |_, t| {
            let shape = t.shape().to_vec();
            let noise = random_tensor(rng, &shape, -0.5, 0.5);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        });
        p
    }

    #[test]
    fn zero_weights_give_zero_local_features() {
        let mut r = rng();
        let mut p = PredictorParams::init(&mut r, 8);
        p.local_w = Tensor::zeros([8, 4]);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let x = g.constant(random_tensor(&mut r, &[2, 3, 8], -1.0, 1.0));
        let z = local_features(&mut g, x, &pv).unwrap();
        assert!(g.value(z).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn local_features_are_permutation_equivariant() {
        let mut r = rng();
        let p = random_predictor(&mut r, 8);
        let t = random_tensor(&mut r, &[1, 4, 8], -1.0, 1.0);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let x = g.constant(t);
        let perm = vec![vec![2, 0, 3, 1]];
        let xp = g.gather_rows(x, &perm).unwrap();
        let z = local_features(&mut g, x, &pv).unwrap();
        let zp = local_features(&mut g, xp, &pv).unwrap();
        let z_then_perm = g.gather_rows(z, &perm).unwrap();
        assert_eq!(g.value(zp), g.value(z_then_perm));

        // identical tokens → identical rows
        let same = g.constant(Tensor::full([1, 3, 8], 0.25));
        let z = local_features(&mut g, same, &pv).unwrap();
        let rows: Vec<&[f64]> = g.value(z).data().chunks(4).collect();
        assert!(rows.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn agg_examples() {
        let mut g = Graph::new();
        let u = g.constant(
            Tensor::new([1, 4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap(),
        );
        let all = g.constant(Tensor::ones([1, 4]));
        let mean = agg(&mut g, u, all).unwrap();
        assert_eq!(g.value(mean).data(), &[4.0, 5.0]);
        let plain = g.mean_axis(u, 1).unwrap();
        assert_eq!(g.value(mean).max_abs_diff(g.value(plain)).unwrap(), 0.0);

        let one = g.constant(Tensor::new([1, 4], vec![0., 0., 1., 0.]).unwrap());
        let r = agg(&mut g, u, one).unwrap();
        assert_eq!(g.value(r).data(), &[5.0, 6.0]);

        let two = g.constant(Tensor::new([1, 4], vec![1., 1., 0., 0.]).unwrap());
        let r = agg(&mut g, u, two).unwrap();
        assert_eq!(g.value(r).data(), &[(1.0 + 3.0) / 2.0, (2.0 + 4.0) / 2.0]);

        let none = g.constant(Tensor::zeros([1, 4]));
        assert!(matches!(agg(&mut g, u, none), Err(Error::Contract(_))));
    }

    #[test]
    fn agg_gradient_only_reaches_kept_tokens() {
        let mut g = Graph::new();
        let u = g.param(Tensor::ones([1, 3, 2]));
        let m = g.constant(Tensor::new([1, 3], vec![1., 0., 1.]).unwrap());
        let a = agg(&mut g, u, m).unwrap();
        let l = g.sum_all(a).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(u).unwrap().data(), &[0.5, 0.5, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut r = rng();
        let mut p = random_predictor(&mut r, 8);
        p.head_w3 = Tensor::zeros([2, 2]);
        p.head_b3 = Tensor::zeros([2]);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let x = g.constant(random_tensor(&mut r, &[2, 5, 8], -1.0, 1.0));
        let m = g.constant(Tensor::ones([2, 5]));
        let pi = predict_probs(&mut g, x, m, &pv).unwrap();
        assert!(g.value(pi).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn different_masks_change_global_context() {
        let mut r = rng();
        let p = random_predictor(&mut r, 8);
        let t = random_tensor(&mut r, &[1, 5, 8], -1.0, 1.0);
        let two = Tensor::new([2, 5, 8], [t.data(), t.data()].concat()).unwrap();
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let x = g.constant(two);
        let m = g.constant(
            Tensor::new([2, 5], vec![1., 1., 1., 1., 1., 1., 0., 1., 0., 1.]).unwrap(),
        );
        let pi = predict_probs(&mut g, x, m, &pv).unwrap();
        let v = g.value(pi).data();
        assert_ne!(&v[..10], &v[10..]);
        for row in v.chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn full_predictor_gradient_check() {
        let mut r = rng();
        let p = random_predictor(&mut r, 8);
        let x = random_tensor(&mut r, &[2, 4, 8], -2.0, 2.0);
        let mask = Tensor::new([2, 4], vec![1., 0., 1., 1., 0., 1., 1., 0.]).unwrap();
        let w = random_tensor(&mut r, &[2, 4, 2], -1.0, 1.0);
        let mut inputs = vec![x, mask];
        p.visit_named("", &mut |_, t| inputs.push(t.clone()));
        let err = grad_check(&inputs, |g, v| {
            let mut it = v[2..].iter().copied();
            let pv = p.map_named("", &mut |_, _| it.next().unwrap());
            let pi = predict_probs(g, v[0], v[1], &pv)?;
            let wv = g.constant(w.clone());
            let y = g.mul(pi, wv)?;
            g.sum_all(y)
        });
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn gumbel_certain_keep() {
        let mut r = rng();
        let mut g = Graph::new();
        let pi = g.constant(Tensor::new([1, 2000, 2], [0.0, 1.0].repeat(2000)).unwrap());
        let d = gumbel_sample(&mut g, pi, 1.0, &mut r).unwrap();
        assert!(g.value(d).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn gumbel_is_deterministic_per_seed_and_rejects_bad_tau() {
        let mut g = Graph::new();
        let pi = g.constant(Tensor::full([2, 50, 2], 0.5));
        let a = gumbel_sample(&mut g, pi, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = gumbel_sample(&mut g, pi, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(matches!(
            gumbel_sample(&mut g, pi, 0.0, &mut rng()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gumbel_straight_through_reaches_pi() {
        let mut r = rng();
        let mut g = Graph::new();
        let pi0 = Tensor::new([1, 3, 2], vec![0.3, 0.7, 0.6, 0.4, 0.5, 0.5]).unwrap();
        let pi = g.param(pi0);
        let d = gumbel_sample(&mut g, pi, 1.0, &mut r).unwrap();
        let l = g.sum_all(d).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(pi).unwrap().data().iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn update_mask_examples() {
        let prev = DecisionMask::ones(1, 4);
        let new = DecisionMask::new(1, 4, vec![1., 0., 1., 0.]).unwrap();
        assert_eq!(prev.update(&new).unwrap(), new);

        let prev = DecisionMask::new(1, 4, vec![1., 0., 1., 1.]).unwrap();
        let new = DecisionMask::new(1, 4, vec![1., 1., 1., 0.]).unwrap();
        assert_eq!(prev.update(&new).unwrap().sample(0), &[1., 0., 1., 0.]);

        assert!(DecisionMask::new(1, 3, vec![0., 1., 1.]).is_err());
        assert!(DecisionMask::new(1, 3, vec![1., 0.5, 1.]).is_err());
    }

    #[test]
    fn graph_update_mask_matches_value_update() {
        let mut g = Graph::new();
        let prev = g.constant(Tensor::new([1, 4], vec![1., 0., 1., 1.]).unwrap());
        let new = g.constant(Tensor::new([1, 3], vec![1., 1., 0.]).unwrap());
        let upd = update_mask(&mut g, prev, new).unwrap();
        assert_eq!(g.value(upd).data(), &[1., 0., 1., 0.]);
        let _ = bind::<PredictorParams>;
    }

    proptest::proptest! {
        #[test]
        fn update_mask_is_elementwise_and(bits in proptest::collection::vec(proptest::bool::ANY, 2..40)) {
            let half = bits.len() / 2;
            let n = half + 1;
            let mk = |src: &[bool]| {
                let mut v = vec![1.0];
                v.extend(src.iter().map(|&b| if b { 1.0 } else { 0.0 }));
                DecisionMask::new(1, n, v).unwrap()
            };
            let a = mk(&bits[..half]);
            let b = mk(&bits[half..2 * half]);
            let u = a.update(&b).unwrap();
            for i in 1..n {
                let expect = bits[i - 1] && bits[half + i - 1];
                proptest::prop_assert_eq!(u.sample(0)[i] == 1.0, expect);
            }
            proptest::prop_assert_eq!(u.sample(0)[0], 1.0);
        }

        #[test]
        fn keep_probs_are_distributions(seed in 0u64..1000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = PredictorParams::init(&mut rng, 8);
            let x = random_tensor(&mut rng, &[2, n, 8], -4.0, 4.0);
            let mut mask = vec![1.0; 2 * n];
            for (k, v) in mask.iter_mut().enumerate() {
                if k % n != 0 {
                    *v = f64::from(u8::from(rng.gen_bool(0.6)));
                }
            }
            let mut g = Graph::new();
            let pv = bind_frozen(&mut g, &p);
            let xv = g.constant(x);
            let mv = g.constant(Tensor::new([2, n], mask).unwrap());
            let pi = predict_probs(&mut g, xv, mv, &pv).unwrap();
            for row in g.value(pi).data().chunks(2) {
                proptest::prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
                proptest::prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
