//! Small neural building blocks on top of the tensor core: parameter store,
//! linear / conv / layer-norm layers, MLPs and multi-head attention.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ops, Elem, Tensor};

/// Epsilon added to the variance in every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Named parameter registry. Iteration order is name order, which fixes
/// the optimizer and checkpoint layouts.
pub struct VarStore<E: Elem> {
    vars: BTreeMap<String, Tensor<E>>,
}

impl<E: Elem> Default for VarStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> VarStore<E> {
    pub fn new() -> Self {
        VarStore {
            vars: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, t: Tensor<E>) -> Tensor<E> {
        let prev = self.vars.insert(name.to_string(), t.clone());
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
        t
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn zero_grads(&self) {
        for t in self.vars.values() {
            t.zero_grad();
        }
    }

    /// Parameters whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.vars.values().map(|t| t.numel()).sum()
    }
}

fn randn<E: Elem>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<E> {
    // Box-Muller; two uniforms per normal keeps the stream layout simple.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            E::from_f64(z * std)
        })
        .collect()
}

/// He-style init for a weight with the given fan-in.
pub fn init_kaiming<E: Elem>(
    vs: &mut VarStore<E>,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    vs.register(name, Tensor::param(randn(rng, n, std), shape).expect("init shape"))
}

pub fn init_normal<E: Elem>(
    vs: &mut VarStore<E>,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
    std: f64,
) -> Tensor<E> {
    let n: usize = shape.iter().product();
    vs.register(name, Tensor::param(randn(rng, n, std), shape).expect("init shape"))
}

pub fn init_zeros<E: Elem>(vs: &mut VarStore<E>, name: &str, shape: &[usize]) -> Tensor<E> {
    let n: usize = shape.iter().product();
    vs.register(name, Tensor::param(vec![E::ZERO; n], shape).expect("init shape"))
}

pub fn init_ones<E: Elem>(vs: &mut VarStore<E>, name: &str, shape: &[usize]) -> Tensor<E> {
    let n: usize = shape.iter().product();
    vs.register(name, Tensor::param(vec![E::ONE; n], shape).expect("init shape"))
}

/// `y = x W + b` over rows.
pub struct Linear<E: Elem> {
    pub w: Tensor<E>, // (in, out)
    pub b: Tensor<E>, // (out)
}

impl<E: Elem> Linear<E> {
    pub fn new(
        vs: &mut VarStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim_in: usize,
        dim_out: usize,
    ) -> Self {
        Linear {
            w: init_kaiming(vs, rng, &format!("{name}.w"), &[dim_in, dim_out], dim_in),
            b: init_zeros(vs, &format!("{name}.b"), &[dim_out]),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        ops::add_row_bias(&ops::matmul(x, &self.w)?, &self.b)
    }
}

/// Square-kernel conv layer (k in {1,3}).
pub struct Conv2d<E: Elem> {
    pub w: Tensor<E>, // (out, in, k, k)
    pub b: Tensor<E>, // (out)
    pub stride: usize,
    pub pad: usize,
}

impl<E: Elem> Conv2d<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vs: &mut VarStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            w: init_kaiming(
                vs,
                rng,
                &format!("{name}.w"),
                &[cout, cin, k, k],
                cin * k * k,
            ),
            b: init_zeros(vs, &format!("{name}.b"), &[cout]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        ops::conv2d(x, &self.w, Some(&self.b), self.stride, self.pad)
    }
}

/// Layer norm over the channel axis, usable on `(R,C)` rows or `(C,H,W)`
/// feature maps (normalizing each spatial position across channels).
pub struct LayerNorm<E: Elem> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Elem> LayerNorm<E> {
    pub fn new(vs: &mut VarStore<E>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: init_ones(vs, &format!("{name}.g"), &[dim]),
            beta: init_zeros(vs, &format!("{name}.b"), &[dim]),
        }
    }

    pub fn forward_rows(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        ops::layer_norm_rows(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }

    pub fn forward_chw(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (h, w) = match x.shape() {
            [_, h, w] => (*h, *w),
            s => return Err(Error::shape(format!("LayerNorm chw: {s:?}"))),
        };
        let rows = ops::chw_to_lc(x)?;
        let normed = self.forward_rows(&rows)?;
        ops::lc_to_chw(&normed, h, w)
    }
}

/// 3-layer MLP with ReLU between layers.
pub struct Mlp<E: Elem> {
    layers: Vec<Linear<E>>,
}

impl<E: Elem> Mlp<E> {
    pub fn new(
        vs: &mut VarStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim_in: usize,
        dim_hidden: usize,
        dim_out: usize,
        num_layers: usize,
    ) -> Self {
        assert!(num_layers >= 1);
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            let din = if i == 0 { dim_in } else { dim_hidden };
            let dout = if i + 1 == num_layers { dim_out } else { dim_hidden };
            layers.push(Linear::new(vs, rng, &format!("{name}.{i}"), din, dout));
        }
        Mlp { layers }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = ops::silu(&h);
            }
        }
        Ok(h)
    }
}

/// Feedforward block: linear, ReLU, linear.
pub struct FeedForward<E: Elem> {
    lin1: Linear<E>,
    lin2: Linear<E>,
}

impl<E: Elem> FeedForward<E> {
    pub fn new(
        vs: &mut VarStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            lin1: Linear::new(vs, rng, &format!("{name}.1"), dim, hidden),
            lin2: Linear::new(vs, rng, &format!("{name}.2"), hidden, dim),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.lin2.forward(&ops::silu(&self.lin1.forward(x)?))
    }
}

/// Multi-head attention with input projections. Positional embeddings are
/// added to the query/key inputs before projection; values never carry
/// position. The allow-mask is shared across heads.
pub struct MultiHeadAttention<E: Elem> {
    wq: Linear<E>,
    wk: Linear<E>,
    wv: Linear<E>,
    wo: Linear<E>,
    heads: usize,
    head_dim: usize,
}

impl<E: Elem> MultiHeadAttention<E> {
    pub fn new(
        vs: &mut VarStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            wq: Linear::new(vs, rng, &format!("{name}.q"), dim, dim),
            wk: Linear::new(vs, rng, &format!("{name}.k"), dim, dim),
            wv: Linear::new(vs, rng, &format!("{name}.v"), dim, dim),
            wo: Linear::new(vs, rng, &format!("{name}.o"), dim, dim),
            heads,
            head_dim: dim / heads,
        }
    }

    /// Returns the output and the head-averaged attention weights `(Nq,Nk)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        q_in: &Tensor<E>,
        q_pos: Option<&Tensor<E>>,
        k_in: &Tensor<E>,
        k_pos: Option<&Tensor<E>>,
        v_in: &Tensor<E>,
        allow: Option<&Rc<Vec<bool>>>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let q_src = match q_pos {
            Some(p) => ops::add(q_in, p)?,
            None => q_in.clone(),
        };
        let k_src = match k_pos {
            Some(p) => ops::add(k_in, p)?,
            None => k_in.clone(),
        };
        let q = self.wq.forward(&q_src)?;
        let k = self.wk.forward(&k_src)?;
        let v = self.wv.forward(v_in)?;

        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weight_sum: Option<Tensor<E>> = None;
        for h in 0..self.heads {
            let qs = ops::narrow_cols(&q, h * self.head_dim, self.head_dim)?;
            let ks = ops::narrow_cols(&k, h * self.head_dim, self.head_dim)?;
            let vs_ = ops::narrow_cols(&v, h * self.head_dim, self.head_dim)?;
            let (out, w) = ops::attention_with_weights(&qs, &ks, &vs_, allow)?;
            head_outs.push(out);
            weight_sum = Some(match weight_sum {
                Some(acc) => ops::add(&acc, &w)?,
                None => w,
            });
        }
        let mut merged = head_outs[0].clone();
        for out in &head_outs[1..] {
            merged = ops::concat_cols(&merged, out)?;
        }
        let out = self.wo.forward(&merged)?;
        let avg_w = ops::mul_scalar(
            &weight_sum.expect("at least one head"),
            E::from_f64(1.0 / self.heads as f64),
        );
        Ok((out, avg_w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::tensor::gradcheck::finite_diff_gradcheck;

    #[test]
    fn var_store_rejects_duplicates() {
        let mut vs = VarStore::<f64>::new();
        init_zeros(&mut vs, "a.w", &[2]);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            init_zeros(&mut vs, "a.w", &[2]);
        }));
        assert!(result.is_err());
    }

    #[test]
    fn mha_shapes_and_gradcheck() {
        let mut vs = VarStore::<f64>::new();
        let mut rng = rng_for(0, "mha-test", 0);
        let mha = MultiHeadAttention::new(&mut vs, &mut rng, "attn", 8, 2);
        let x = Tensor::<f64>::param(
            (0..5 * 8).map(|i| ((i * 37 % 97) as f64 - 48.0) / 48.0).collect(),
            &[5, 8],
        )
        .unwrap();
        let q = Tensor::<f64>::param(
            (0..3 * 8).map(|i| ((i * 53 % 89) as f64 - 44.0) / 44.0).collect(),
            &[3, 8],
        )
        .unwrap();
        let (qs, xs) = (q.clone(), x.clone());
        let (out, w) = mha.forward(&qs, None, &xs, None, &xs, None).unwrap();
        assert_eq!(out.shape(), &[3, 8]);
        assert_eq!(w.shape(), &[3, 5]);
        // weights rows sum to 1 (average of per-head softmaxes)
        let wv = w.to_vec();
        for r in 0..3 {
            let s: f64 = wv[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }

        let f = move || {
            let (out, _) = mha.forward(&qs, None, &xs, None, &xs, None)?;
            ops::sum_all(&ops::mul(&out, &out)?)
        };
        let mut params = vs.group("attn");
        params.push(("q".into(), q));
        params.push(("x".into(), x));
        let report = finite_diff_gradcheck(&f, &params, 1e-4, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
