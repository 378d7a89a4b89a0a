//! Named parameter trees.
//!
//! Model parameters live in plain structs generic over the leaf type. The
//! same struct holds `Tensor`s at rest, `Var`s while bound into a graph, and
//! gradient tensors after backward; [`ParamTree`] gives all of them a stable
//! visiting order and dotted names for checkpoints.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensorcore::{Gradients, Graph, Tensor, Var};

pub trait ParamTree<T> {
    type Mapped<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U>;

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &T));

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));
}

macro_rules! leaf_params {
    ($(#[$meta:meta])* $vis:vis struct $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        $vis struct $name<T = $crate::tensorcore::Tensor> {
            $(pub $field: T,)*
        }

        impl<T> $crate::params::ParamTree<T> for $name<T> {
            type Mapped<U> = $name<U>;

            fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)*
                }
            }

            fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}
pub(crate) use leaf_params;

/// Put every tensor of `tree` into `g` as a gradient-tracking leaf.
pub fn bind<P: ParamTree<Tensor>>(g: &mut Graph, tree: &P) -> P::Mapped<Var> {
    tree.map_named("", &mut |_, t| g.param(t.clone()))
}

/// Put every tensor of `tree` into `g` as a constant (no gradients).
pub fn bind_frozen<P: ParamTree<Tensor>>(g: &mut Graph, tree: &P) -> P::Mapped<Var> {
    tree.map_named("", &mut |_, t| g.constant(t.clone()))
}

/// Gradients of a bound tree in visiting order; unreached leaves get zeros.
pub fn collect_grads<P: ParamTree<Var>>(g: &Graph, bound: &P, grads: &mut Gradients) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    bound.visit_named("", &mut |name, v| {
        let t = grads
            .take(*v)
            .unwrap_or_else(|| Tensor::zeros(g.shape(*v).to_vec()));
        out.push((name.to_string(), t));
    });
    out
}

pub fn count_params<P: ParamTree<Tensor>>(tree: &P) -> usize {
    let mut n = 0;
    tree.visit_named("", &mut |_, t| n += t.numel());
    n
}

/// Truncated normal (cut at two standard deviations).
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Weight `[fan_in, fan_out]` plus zero bias `[fan_out]`.
pub fn linear_init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    (
        trunc_normal(rng, &[fan_in, fan_out], 0.02),
        Tensor::zeros([fan_out]),
    )
}

/// Affine `x·W + b` for `x: [.., in]`, `W: [in, out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> crate::Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}
