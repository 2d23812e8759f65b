//! Linear maps, layer norm, attention and the position-wise FFN.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-6;

/// Registers parameters of one group with seeded initialisation.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub group: ParamGroup,
}

impl Init<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize], limit: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect();
        self.store
            .register(name, self.group, Tensor::new(shape.to_vec(), data)?)
    }

    /// Glorot/Xavier uniform.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(name, &[rows, cols], limit)
    }

    /// Uniform with standard deviation `1/sqrt(cols)`.
    pub fn embedding(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let limit = (3.0 / cols as f64).sqrt();
        self.uniform(name, &[rows, cols], limit)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store
            .register(name, self.group, Tensor::filled(shape, value))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Linear> {
        let w = self.xavier(&format!("{name}.w"), d_in, d_out)?;
        let b = if bias {
            Some(self.filled(&format!("{name}.b"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.filled(&format!("{name}.gain"), &[d], 1.0)?,
            bias: self.filled(&format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn mha(&mut self, name: &str, d: usize, heads: usize) -> Result<MultiHeadAttention> {
        Ok(MultiHeadAttention {
            q: self.linear(&format!("{name}.q"), d, d, true)?,
            k: self.linear(&format!("{name}.k"), d, d, true)?,
            v: self.linear(&format!("{name}.v"), d, d, true)?,
            o: self.linear(&format!("{name}.o"), d, d, true)?,
            heads,
        })
    }

    pub fn ffn(&mut self, name: &str, d: usize, d_ff: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            inner: self.linear(&format!("{name}.inner"), d, d_ff, true)?,
            outer: self.linear(&format!("{name}.outer"), d_ff, d, true)?,
        })
    }
}

/// `x·W + b` applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let y = s.graph.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gain), s.param(self.bias));
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two linear maps with a ReLU between, applied to each row independently.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.inner.forward(s, x)?;
        let h = s.graph.relu(h);
        self.outer.forward(s, h)
    }
}

/// `softmax(QKᵀ/√r)·V`. `mask[i*b + j] == true` hides key `j` from query
/// `i`. Returns the output and the post-softmax weights.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.value(q).shape(), g.value(k).shape(), g.value(v).shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::shape("attention", qs, ks));
    }
    let (a, r, b) = (qs[0], qs[1], ks[0]);
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, 1.0 / (r as f64).sqrt());
    if let Some(mask) = mask {
        if mask.len() != a * b {
            return Err(Error::shape("attention mask", &[a, b], &[mask.len()]));
        }
        if mask.chunks(b).any(|row| row.iter().all(|&m| m)) {
            return Err(Error::contract("attention row with every key masked"));
        }
        logits = g.mask_neg_inf(logits, mask)?;
    }
    let weights = g.softmax(logits)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// `[T×T]` mask hiding future positions.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|i| i % t > i / t).collect()
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Projects, attends per head, concatenates and projects again. Also
    /// returns each head's `[a×b]` weight matrix.
    pub fn forward(
        &self,
        s: &mut Session,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, key)?;
        let v = self.v.forward(s, value)?;
        let d = s.value(q).cols();
        let dh = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    s.graph.slice_cols(q, h * dh, dh)?,
                    s.graph.slice_cols(k, h * dh, dh)?,
                    s.graph.slice_cols(v, h * dh, dh)?,
                )
            };
            let (o, w) = scaled_dot_attention(&mut s.graph, qh, kh, vh, mask)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            s.graph.concat_cols(&outs)?
        };
        Ok((self.o.forward(s, cat)?, weights))
    }
}

/// Sinusoidal position table `[len × d]`.
pub fn sinusoid_table(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, d], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GroupSet;
    use rand::SeedableRng;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn singleton_key_returns_its_value() {
        let mut g = Graph::new();
        let q = g.constant(m(&[vec![0.3, -2.0], vec![5.0, 1.0]]));
        let k = g.constant(m(&[vec![1.0, 1.0]]));
        let v = g.constant(m(&[vec![7.0, -3.0, 0.5]]));
        let (out, w) = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 1.0]);
        assert_eq!(g.value(out).data(), &[7.0, -3.0, 0.5, 7.0, -3.0, 0.5]);
    }

    #[test]
    fn orthonormal_queries_keys_give_near_uniform_weights() {
        // Q = K = I_2: logits are 1/√2 on the diagonal and 0 off it.
        let mut g = Graph::new();
        let q = g.constant(Tensor::identity(2));
        let k = g.constant(Tensor::identity(2));
        let v = g.constant(Tensor::identity(2));
        let (_, w) = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let diag = e / (e + 1.0);
        let w = g.value(w);
        assert!((w.at(0, 0) - diag).abs() < 1e-15);
        assert!((w.at(0, 1) - (1.0 - diag)).abs() < 1e-15);

        // As the width grows the same unit-norm rows flatten out further.
        let r = 64;
        let mut g = Graph::new();
        let q = g.constant(Tensor::identity(r).slice_rows(0, 2).unwrap());
        let (_, w) = scaled_dot_attention(&mut g, q, q, q, None).unwrap();
        assert!(g.value(w).data().iter().all(|&p| (p - 0.5).abs() < 0.07));
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let t = 4;
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[t, 3], 0.2));
        let mask = causal_mask(t);
        let (_, w) = scaled_dot_attention(&mut g, x, x, x, Some(&mask)).unwrap();
        let w = g.value(w);
        for i in 0..t {
            for j in 0..t {
                if j > i {
                    assert_eq!(w.at(i, j), 0.0);
                } else {
                    assert!(w.at(i, j) > 0.0);
                }
            }
        }
    }

    #[test]
    fn fully_masked_row_is_contract_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 2], 0.2));
        let r = scaled_dot_attention(&mut g, x, x, x, Some(&[true, true, false, false]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        store.get_mut(id).tensor = t;
    }

    #[test]
    fn single_identity_head_matches_plain_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = Init { store: &mut store, rng: &mut rng, group: ParamGroup::Base }
            .mha("att", 3, 1)
            .unwrap();
        for lin in [&mha.q, &mha.k, &mha.v, &mha.o] {
            set(&mut store, lin.w, Tensor::identity(3));
        }
        let x = m(&[vec![0.1, 0.4, -0.3], vec![1.0, 0.0, 2.0]]);
        let kv = m(&[vec![0.5, -0.5, 0.0], vec![0.2, 0.9, 1.1], vec![-1.0, 0.3, 0.7]]);
        let mut s = Session::eval(&store);
        let (xq, xk) = (s.constant(x), s.constant(kv));
        let (out, heads) = mha.forward(&mut s, xq, xk, xk, None).unwrap();
        let (plain, w) = scaled_dot_attention(&mut s.graph, xq, xk, xk, None).unwrap();
        assert_eq!(s.value(out), s.value(plain));
        assert_eq!(s.value(heads[0]), s.value(w));
    }

    #[test]
    fn multi_head_shapes_and_normalisation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mha = Init { store: &mut store, rng: &mut rng, group: ParamGroup::Base }
            .mha("att", 8, 4)
            .unwrap();
        let mut s = Session::new(&store, GroupSet::NONE, None);
        let q = s.constant(Tensor::filled(&[3, 8], 0.3));
        let kv_data: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let kv = s.constant(Tensor::new(vec![5, 8], kv_data).unwrap());
        let (out, heads) = mha.forward(&mut s, q, kv, kv, None).unwrap();
        assert_eq!(s.value(out).shape(), &[3, 8]);
        assert_eq!(heads.len(), 4);
        for h in heads {
            let w = s.value(h);
            assert_eq!(w.shape(), &[3, 5]);
            for r in 0..3 {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ffn_hand_case_and_rowwise_independence() {
        // 2 -> 3 -> 2 with hand-picked weights.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ffn = Init { store: &mut store, rng: &mut rng, group: ParamGroup::Base }
            .ffn("ffn", 2, 3)
            .unwrap();
        set(&mut store, ffn.inner.w, m(&[vec![1., -1., 0.5], vec![2., 1., -1.]]));
        set(&mut store, ffn.inner.b.unwrap(), Tensor::new(vec![3], vec![0., 0.5, 1.]).unwrap());
        set(&mut store, ffn.outer.w, m(&[vec![1., 0.], vec![0., 1.], vec![1., 1.]]));
        set(&mut store, ffn.outer.b.unwrap(), Tensor::new(vec![2], vec![0.1, -0.1]).unwrap());
        // x = [1, 1]: inner = [3, 0.5, 0.5] -> relu same -> outer = [3.5, 1.0] + b
        // x = [1, -1]: inner = [-1, -1.5, 2.5] -> relu [0, 0, 2.5] -> [2.5, 2.5] + b
        let mut s = Session::eval(&store);
        let x = s.constant(m(&[vec![1., 1.], vec![1., -1.]]));
        let y = ffn.forward(&mut s, x).unwrap();
        let expect = [3.6, 0.9, 2.6, 2.4];
        for (got, want) in s.value(y).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        let x1 = s.constant(m(&[vec![1., -1.]]));
        let y1 = ffn.forward(&mut s, x1).unwrap();
        assert_eq!(s.value(y1).data(), &s.value(y).data()[2..]);

        // zero weights leave only the bias path
        set(&mut store, ffn.inner.w, Tensor::zeros(&[2, 3]));
        set(&mut store, ffn.outer.w, Tensor::zeros(&[3, 2]));
        let mut s = Session::eval(&store);
        let x = s.constant(m(&[vec![4., -7.]]));
        let y = ffn.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).data(), &[0.1, -0.1]);
    }

    #[test]
    fn sinusoid_first_rows() {
        let t = sinusoid_table(3, 4);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.at(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((t.at(1, 3) - (1.0 / 100.0f64).cos()).abs() < 1e-15);
    }
}
