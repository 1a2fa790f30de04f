//! Layers built from graph ops: linear maps, layer norm, multi-head
//! attention, and the two-layer feed-forward block.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::rng::SeededRng;
use crate::numerics::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        Self::with_std(store, name, d_in, d_out, xavier_std(d_in, d_out), rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = store.register_normal(format!("{name}.weight"), &[d_in, d_out], std, rng);
        let bias = store.register_const(format!("{name}.bias"), &[1, d_out], 0.0);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.register_const(format!("{name}.gain"), &[1, d], 1.0),
            bias: store.register_const(format!("{name}.bias"), &[1, d], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Attention weights of one call, shape `heads × L_q × L_k`.
pub type AttnWeights = Tensor;

/// Multi-head scaled dot-product attention with its own projections.
///
/// With `tied` set, a single projection produces queries, keys and values.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d: usize,
    pub query: Linear,
    pub key: Option<Linear>,
    pub value: Option<Linear>,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        tied: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        let query = Linear::new(store, &format!("{name}.wq"), d, d, rng);
        let (key, value) = if tied {
            (None, None)
        } else {
            (
                Some(Linear::new(store, &format!("{name}.wk"), d, d, rng)),
                Some(Linear::new(store, &format!("{name}.wv"), d, d, rng)),
            )
        };
        let output = Linear::new(store, &format!("{name}.wo"), d, d, rng);
        Ok(Self {
            heads,
            d,
            query,
            key,
            value,
            output,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Attends `q_in` (L_q × d) over `k_in`/`v_in` (L_k × d).
    pub fn forward(&self, g: &mut Graph, q_in: Var, k_in: Var, v_in: Var) -> Result<(Var, AttnWeights)> {
        for v in [q_in, k_in, v_in] {
            let t = g.value(v);
            if !t.is_matrix() || t.cols() != self.d {
                return Err(Error::ShapeMismatch {
                    op: "attention input",
                    left: t.shape().to_vec(),
                    right: vec![self.d],
                });
            }
        }
        if g.value(k_in).rows() != g.value(v_in).rows() {
            return Err(Error::ShapeMismatch {
                op: "attention keys/values",
                left: g.value(k_in).shape().to_vec(),
                right: g.value(v_in).shape().to_vec(),
            });
        }
        let q = self.query.forward(g, q_in)?;
        let k = self.key.as_ref().unwrap_or(&self.query).forward(g, k_in)?;
        let v = self.value.as_ref().unwrap_or(&self.query).forward(g, v_in)?;

        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (lq, lk) = (g.value(q).rows(), g.value(k).rows());
        let mut weights = Vec::with_capacity(self.heads * lq * lk);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            weights.extend_from_slice(g.value(attn).data());
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let out = self.output.forward(g, merged)?;
        Ok((out, Tensor::new(vec![self.heads, lq, lk], weights)?))
    }
}

/// `Linear(d → hidden) → GELU → Linear(hidden → d)`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Init std of projections that write back into a residual stream.
pub const RESIDUAL_OUT_INIT_STD: f64 = 0.02;

/// Re-initializes one post-norm block: each key projection becomes a copy of
/// its query projection, and every output projection is drawn from
/// `N(0, RESIDUAL_OUT_INIT_STD²)`.
pub fn init_residual_block(store: &mut ParamStore, attns: &[&MultiHeadAttention], ffn: &FeedForward, rng: &mut SeededRng) {
    for attn in attns {
        if let Some(key) = &attn.key {
            let w = store.get(attn.query.weight).value.clone();
            store.get_mut(key.weight).value = w;
        }
    }
    let outs = attns.iter().map(|a| a.output.weight).chain([ffn.down.weight]);
    for id in outs.collect::<Vec<_>>() {
        let p = store.get_mut(id);
        p.value.data_mut().iter_mut().for_each(|x| *x = RESIDUAL_OUT_INIT_STD * rng.normal());
    }
}

/// `norm(x + sublayer_out)`.
pub fn residual_norm(g: &mut Graph, x: Var, sub: Var, norm: &LayerNorm) -> Result<Var> {
    let s = g.add(x, sub)?;
    norm.forward(g, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> Tensor {
        let mut t = Tensor::zeros(&[r, c]);
        t.data_mut().iter_mut().for_each(|x| *x = rng.normal());
        t
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        store.get_mut(id).value = t;
    }

    fn identity(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data_mut()[i * d + i] = 1.0;
        }
        t
    }

    /// Unbatched per-head loop, written directly against `Tensor`.
    fn loop_oracle(store: &ParamStore, mha: &MultiHeadAttention, q_in: &Tensor, kv: &Tensor) -> (Tensor, Vec<f64>) {
        let lin = |l: &Linear, x: &Tensor| {
            let w = &store.get(l.weight).value;
            let b = &store.get(l.bias).value;
            let mut out = vec![0.0; x.rows() * w.cols()];
            for i in 0..x.rows() {
                for j in 0..w.cols() {
                    let mut acc = b.data()[j];
                    for p in 0..x.cols() {
                        acc += x.get2(i, p) * w.get2(p, j);
                    }
                    out[i * w.cols() + j] = acc;
                }
            }
            Tensor::new(vec![x.rows(), w.cols()], out).unwrap()
        };
        let q = lin(&mha.query, q_in);
        let k = lin(mha.key.as_ref().unwrap(), kv);
        let v = lin(mha.value.as_ref().unwrap(), kv);
        let dh = mha.head_dim();
        let mut merged = vec![0.0; q.rows() * mha.d];
        let mut weights = Vec::new();
        for h in 0..mha.heads {
            for i in 0..q.rows() {
                let mut s: Vec<f64> = (0..k.rows())
                    .map(|j| (0..dh).map(|c| q.get2(i, h * dh + c) * k.get2(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                s.iter_mut().for_each(|x| *x = (*x - m).exp() / z);
                for c in 0..dh {
                    merged[i * mha.d + h * dh + c] = (0..k.rows()).map(|j| s[j] * v.get2(j, h * dh + c)).sum();
                }
                weights.extend(s);
            }
        }
        let merged = Tensor::new(vec![q.rows(), mha.d], merged).unwrap();
        (lin(&mha.output, &merged), weights)
    }

    #[test]
    fn single_key_gets_all_weight() {
        let mut rng = SeededRng::new(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, false, &mut rng).unwrap();
        let qs = random(&mut rng, 3, 8);
        let kv = random(&mut rng, 1, 8);
        let mut g = Graph::new(&store);
        let q = g.constant(qs);
        let k = g.constant(kv.clone());
        let (out, w) = mha.forward(&mut g, q, k, k).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
        // every query row reads the same projected value row
        let out = g.value(out);
        for i in 1..3 {
            assert_eq!(out.row(i), out.row(0));
        }
    }

    #[test]
    fn identity_projections_hand_case() {
        let mut rng = SeededRng::new(0);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 2, 1, false, &mut rng).unwrap();
        for l in [mha.query, mha.key.unwrap(), mha.value.unwrap(), mha.output] {
            set(&mut store, l.weight, identity(2));
        }
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let (out, w) = mha.forward(&mut g, xv, xv, xv).unwrap();
        // scores: diag 1/sqrt(2), off-diag 0
        let hi = (1.0 / 2f64.sqrt()).exp();
        let p = hi / (hi + 1.0);
        let expected = [p, 1.0 - p, 1.0 - p, p];
        for (a, e) in w.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        assert!(p > 0.5);
        let out = g.value(out);
        assert!((out.get2(0, 0) - p).abs() < 1e-15);
        assert!((out.get2(0, 1) - (1.0 - p)).abs() < 1e-15);
    }

    #[test]
    fn matches_per_head_loop_oracle() {
        let mut rng = SeededRng::new(17);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 12, 3, false, &mut rng).unwrap();
        // nonzero biases so the oracle exercises them
        for l in [mha.query, mha.key.unwrap(), mha.value.unwrap(), mha.output] {
            let b = random(&mut rng, 1, 12);
            set(&mut store, l.bias, b);
        }
        let qs = random(&mut rng, 4, 12);
        let kv = random(&mut rng, 7, 12);
        let mut g = Graph::new(&store);
        let q = g.constant(qs.clone());
        let k = g.constant(kv.clone());
        let (out, w) = mha.forward(&mut g, q, k, k).unwrap();
        let (expected, weights) = loop_oracle(&store, &mha, &qs, &kv);
        assert!(g.value(out).max_abs_diff(&expected) <= 1e-10);
        assert_eq!(w.shape(), &[3, 4, 7]);
        for (a, b) in w.data().iter().zip(&weights) {
            assert!((a - b).abs() <= 1e-10);
        }
        for row in w.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let err = MultiHeadAttention::new(&mut store, "a", 10, 4, false, &mut SeededRng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn layer_norm_cases() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 2);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_rows(&[vec![3.0, 3.0], vec![1.0, -1.0]]).unwrap());
        let y = ln.forward(&mut g, x).unwrap();
        let y = g.value(y);
        assert_eq!(y.row(0), &[0.0, 0.0]);
        assert!((y.get2(1, 0) - 1.0).abs() < 1e-5);
        assert!((y.get2(1, 1) + 1.0).abs() < 1e-5);

        let mut rng = SeededRng::new(4);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 16);
        let mut g = Graph::new(&store);
        let raw = random(&mut rng, 3, 16).map(|v| 5.0 * v + 2.0);
        let x = g.constant(raw.clone());
        let y = ln.forward(&mut g, x).unwrap();
        for r in 0..3 {
            let src = raw.row(r);
            let mean = src.iter().sum::<f64>() / 16.0;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            let row = g.value(y).row(r);
            for (out, x) in row.iter().zip(src) {
                assert!((out - (x - mean) / (var + LN_EPS).sqrt()).abs() < 1e-9);
            }
            let out_mean = row.iter().sum::<f64>() / 16.0;
            let out_var = row.iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!(out_mean.abs() < 1e-9);
            assert!((out_var - var / (var + LN_EPS)).abs() < 1e-9);
        }
    }
}
