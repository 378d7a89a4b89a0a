//! Training objective: classification, token distillation, prediction KL and
//! the keep-ratio constraint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{Graph, Tensor, Var};

/// Floor applied to teacher probabilities inside the KL term.
pub const TEACHER_PROB_FLOOR: f64 = 1e-9;
/// Floor for logs of student probabilities (only reached by exact zeros).
const LOG_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_distill: f64,
    pub lambda_ratio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_kl: 0.5,
            lambda_distill: 0.5,
            lambda_ratio: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_kl, self.lambda_distill, self.lambda_ratio];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Which way round the prediction KL is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student ‖ teacher)`.
    #[default]
    StudentTeacher,
    /// `KL(teacher ‖ student)`, the usual distillation direction.
    TeacherStudent,
}

/// The four loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T = f64> {
    pub cls: T,
    pub kl: T,
    pub distill: T,
    pub ratio: T,
}

impl LossParts<f64> {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.cls + w.lambda_kl * self.kl + w.lambda_distill * self.distill + w.lambda_ratio * self.ratio
    }
}

/// Mean over the batch of `−log p(label)` for `probs: [B, K]`.
pub fn cls_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("cls_loss", &s, &[labels.len()]));
    }
    let k = s[1];
    let mut onehot = vec![0.0; s[0] * k];
    for (b, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Index {
                op: "cls_loss",
                index: l,
                len: k,
            });
        }
        onehot[b * k + l] = 1.0;
    }
    let logp = g.log(probs, LOG_FLOOR)?;
    let oh = g.constant(Tensor::new(s, onehot)?);
    let picked = g.mul(logp, oh)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / labels.len() as f64)
}

/// `Σ_b Σ_i D̂_i ‖t_i − t'_i‖² / Σ_b Σ_i D̂_i` with the mask `[B, n]` held
/// constant; tokens are `[B, n, C]`.
pub fn distill_loss(g: &mut Graph, student: Var, teacher: &Tensor, mask: &Tensor) -> Result<Var> {
    let s = g.shape(student).to_vec();
    if s.len() != 3 || teacher.shape() != s.as_slice() || mask.shape() != &s[..2] {
        return Err(Error::shape("distill_loss", &s, mask.shape()));
    }
    let kept: f64 = mask.data().iter().sum();
    if kept <= 0.0 {
        return Err(Error::Contract("distill_loss: every token is dropped".into()));
    }
    let t = g.constant(teacher.clone());
    let d = g.sub(student, t)?;
    let sq = g.mul(d, d)?;
    let per_token = g.sum_axis(sq, 2)?;
    let m = g.constant(mask.clone());
    let weighted = g.mul(per_token, m)?;
    let total = g.sum_all(weighted)?;
    g.scale(total, 1.0 / kept)
}

/// Batch-mean KL divergence between student probabilities (graph) and
/// teacher probabilities (constant), both `[B, K]`.
pub fn kl_loss(g: &mut Graph, student: Var, teacher: &Tensor, direction: KlDirection) -> Result<Var> {
    let s = g.shape(student).to_vec();
    if s.len() != 2 || teacher.shape() != s.as_slice() {
        return Err(Error::shape("kl_loss", &s, teacher.shape()));
    }
    let b = s[0] as f64;
    let t_clamped: Vec<f64> = teacher.data().iter().map(|&v| v.max(TEACHER_PROB_FLOOR)).collect();
    let log_t = Tensor::new(s.clone(), t_clamped.iter().map(|v| v.ln()).collect())?;
    let log_y = g.log(student, LOG_FLOOR)?;
    let total = match direction {
        KlDirection::StudentTeacher => {
            let lt = g.constant(log_t);
            let diff = g.sub(log_y, lt)?;
            let terms = g.mul(student, diff)?;
            g.sum_all(terms)?
        }
        KlDirection::TeacherStudent => {
            let entropy_part: f64 = t_clamped.iter().zip(log_t.data()).map(|(t, l)| t * l).sum();
            let tv = g.constant(Tensor::new(s.clone(), t_clamped)?);
            let cross = g.mul(tv, log_y)?;
            let cross = g.sum_all(cross)?;
            let neg = g.scale(cross, -1.0)?;
            g.add_scalar(neg, entropy_part)?
        }
    };
    g.scale(total, 1.0 / b)
}

/// `(1/BS) Σ_b Σ_s (ρ_s − mean_i D̂_i^{b,s})²` over patch masks `[B, N]`.
pub fn ratio_loss(g: &mut Graph, masks: &[Var], targets: &[f64]) -> Result<Var> {
    if masks.len() != targets.len() || masks.is_empty() {
        return Err(Error::Contract(format!(
            "ratio_loss: {} masks for {} targets",
            masks.len(),
            targets.len()
        )));
    }
    let b = g.shape(masks[0])[0];
    let mut acc: Option<Var> = None;
    for (&m, &rho) in masks.iter().zip(targets) {
        let achieved = g.mean_axis(m, 1)?;
        let target = g.constant(Tensor::full([b], rho));
        let d = g.sub(target, achieved)?;
        let sq = g.mul(d, d)?;
        let s = g.sum_all(sq)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    let total = acc.expect("at least one stage");
    g.scale(total, 1.0 / (b * masks.len()) as f64)
}

/// `L_cls + λ_KL·L_KL + λ_distill·L_distill + λ_ratio·L_ratio`.
pub fn total_loss(g: &mut Graph, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    let kl = g.scale(parts.kl, w.lambda_kl)?;
    let distill = g.scale(parts.distill, w.lambda_distill)?;
    let ratio = g.scale(parts.ratio, w.lambda_ratio)?;
    let a = g.add(parts.cls, kl)?;
    let b = g.add(a, distill)?;
    g.add(b, ratio)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensorcore::tests::{grad_check, random_tensor};

    fn random_probs(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor {
        let raw = random_tensor(rng, &[b, k], 0.05, 1.0);
        let mut d = raw.into_data();
        for row in d.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new([b, k], d).unwrap()
    }

    fn value(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn cls_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new([2, 3], vec![0., 1., 0., 1., 0., 0.]).unwrap());
        let l = cls_loss(&mut g, p, &[1, 0]).unwrap();
        assert_eq!(value(&g, l), 0.0);
        let u = g.constant(Tensor::full([2, 4], 0.25));
        let l = cls_loss(&mut g, u, &[3, 2]).unwrap();
        assert!((value(&g, l) - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(cls_loss(&mut g, u, &[4, 0]), Err(Error::Index { .. })));

        let mut r = ChaCha8Rng::seed_from_u64(1);
        let probs = random_probs(&mut r, 5, 4);
        let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
        let oracle = -labels.iter().enumerate().map(|(b, &l)| probs.data()[b * 4 + l].ln()).sum::<f64>() / 5.0;
        let p = g.constant(probs);
        let l = cls_loss(&mut g, p, &labels).unwrap();
        assert!((value(&g, l) - oracle).abs() < 1e-12);
    }

    #[test]
    fn distill_examples() {
        let mut g = Graph::new();
        let t = Tensor::new([1, 3, 2], vec![0.; 6]).unwrap();
        // per-token squared diffs 0.5, 1.5 on kept tokens and 9 on the dropped one
        let s = Tensor::new([1, 3, 2], vec![0.5, 0.5, 1.5f64.sqrt(), 0.0, 3.0, 0.0]).unwrap();
        let m = Tensor::new([1, 3], vec![1., 1., 0.]).unwrap();
        let sv = g.constant(s);
        let l = distill_loss(&mut g, sv, &t, &m).unwrap();
        assert!((value(&g, l) - 1.0).abs() < 1e-12);

        let same = g.constant(t.clone());
        let l = distill_loss(&mut g, same, &t, &m).unwrap();
        assert_eq!(value(&g, l), 0.0);
        assert!(distill_loss(&mut g, same, &t, &Tensor::zeros([1, 3])).is_err());
    }

    #[test]
    fn dropped_token_never_matters_for_distill() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor(&mut r, &[2, 4, 3], -1.0, 1.0);
        let s = random_tensor(&mut r, &[2, 4, 3], -1.0, 1.0);
        let m = Tensor::new([2, 4], vec![1., 0., 1., 1., 0., 1., 1., 0.]).unwrap();
        let mut g = Graph::new();
        let sv = g.param(s.clone());
        let l = distill_loss(&mut g, sv, &t, &m).unwrap();
        let before = value(&g, l);
        let grads = g.backward(l).unwrap();
        let gs = grads.get(sv).unwrap();
        assert!(gs.data()[3..6].iter().all(|v| *v == 0.0));
        let mut s2 = s;
        s2.data_mut()[4] += 10.0;
        let sv2 = g.constant(s2);
        let l2 = distill_loss(&mut g, sv2, &t, &m).unwrap();
        assert_eq!(value(&g, l2), before);
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
        let l = kl_loss(&mut g, y, &Tensor::full([1, 2], 0.5), KlDirection::StudentTeacher).unwrap();
        assert!((value(&g, l) - 2f64.ln()).abs() < 1e-15);

        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a = random_probs(&mut r, 4, 5);
        let b = random_probs(&mut r, 4, 5);
        let av = g.constant(a.clone());
        let same = kl_loss(&mut g, av, &a, KlDirection::StudentTeacher).unwrap();
        assert!(value(&g, same).abs() < 1e-15);
        for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
            let (p, q) = match dir {
                KlDirection::StudentTeacher => (&a, &b),
                KlDirection::TeacherStudent => (&b, &a),
            };
            let oracle = p.data().iter().zip(q.data()).map(|(x, y)| x * (x / y).ln()).sum::<f64>() / 4.0;
            let l = kl_loss(&mut g, av, &b, dir).unwrap();
            assert!((value(&g, l) - oracle).abs() < 1e-12);
            assert!(value(&g, l) >= 0.0);
        }
    }

    #[test]
    fn ratio_examples() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::new([1, 4], vec![1., 0., 1., 0.]).unwrap());
        let l = ratio_loss(&mut g, &[m], &[0.7]).unwrap();
        assert!((value(&g, l) - 0.04).abs() < 1e-15);
        let l = ratio_loss(&mut g, &[m], &[0.5]).unwrap();
        assert_eq!(value(&g, l), 0.0);

        let mut r = ChaCha8Rng::seed_from_u64(4);
        let ms: Vec<Tensor> = (0..3)
            .map(|_| {
                let d = (0..2 * 8).map(|_| if r.gen_bool(0.6) { 1.0 } else { 0.0 }).collect();
                Tensor::new([2, 8], d).unwrap()
            })
            .collect();
        let targets = [0.7, 0.49, 0.343];
        let mut oracle = 0.0;
        for b in 0..2 {
            for (s, m) in ms.iter().enumerate() {
                let achieved = m.data()[b * 8..(b + 1) * 8].iter().sum::<f64>() / 8.0;
                oracle += (targets[s] - achieved).powi(2);
            }
        }
        oracle /= 6.0;
        let vars: Vec<Var> = ms.into_iter().map(|t| g.constant(t)).collect();
        let l = ratio_loss(&mut g, &vars, &targets).unwrap();
        assert!((value(&g, l) - oracle).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let ones = LossParts {
            cls: 1.0,
            kl: 1.0,
            distill: 1.0,
            ratio: 1.0,
        };
        assert_eq!(ones.total(&w), 4.0);
        assert_eq!(LossParts::default().total(&w), 0.0);
        let mut g = Graph::new();
        let parts = LossParts {
            cls: g.constant(Tensor::scalar(0.3)),
            kl: g.constant(Tensor::scalar(1.7)),
            distill: g.constant(Tensor::scalar(0.2)),
            ratio: g.constant(Tensor::scalar(0.05)),
        };
        let t = total_loss(&mut g, &parts, &w).unwrap();
        assert!((value(&g, t) - (0.3 + 0.85 + 0.1 + 0.1)).abs() < 1e-15);
        assert!(LossWeights { lambda_kl: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn loss_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let probs = random_probs(&mut r, 3, 4);
        let teacher = random_probs(&mut r, 3, 4);
        let tok_t = random_tensor(&mut r, &[2, 3, 2], -1.0, 1.0);
        let tok_s = random_tensor(&mut r, &[2, 3, 2], -1.0, 1.0);
        let mask = Tensor::new([2, 3], vec![1., 0., 1., 1., 1., 0.]).unwrap();
        let m1 = random_tensor(&mut r, &[2, 5], 0.0, 1.0);
        let m2 = random_tensor(&mut r, &[2, 5], 0.0, 1.0);
        let labels = [0, 3, 2];
        for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
            let err = grad_check(std::slice::from_ref(&probs), |g, v| kl_loss(g, v[0], &teacher, dir));
            assert!(err < 1e-6, "kl {err}");
        }
        let err = grad_check(std::slice::from_ref(&probs), |g, v| cls_loss(g, v[0], &labels));
        assert!(err < 1e-6, "cls {err}");
        let err = grad_check(&[tok_s], |g, v| distill_loss(g, v[0], &tok_t, &mask));
        assert!(err < 1e-6, "distill {err}");
        let err = grad_check(&[m1, m2], |g, v| ratio_loss(g, v, &[0.7, 0.49]));
        assert!(err < 1e-6, "ratio {err}");
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative(a in proptest::collection::vec(0.01f64..1.0, 3), b in proptest::collection::vec(0.01f64..1.0, 3)) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let (a, b) = (norm(&a), norm(&b));
            let mut g = Graph::new();
            let y = g.constant(Tensor::new([1, 3], a).unwrap());
            let t = Tensor::new([1, 3], b).unwrap();
            for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
                let l = kl_loss(&mut g, y, &t, dir).unwrap();
                proptest::prop_assert!(g.value(l).item().unwrap() >= -1e-12);
            }
        }
    }
}
