use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-6;

/// Parameter initializer; `None` yields zeros (used when values are loaded afterwards).
pub(crate) struct Init<'a> {
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Init<'_> {
    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        if let Some(rng) = self.rng.as_deref_mut() {
            for v in t.data_mut() {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        t
    }

    pub fn ones(&mut self, n: usize) -> Tensor {
        if self.rng.is_some() {
            Tensor::filled(&[n], 1.0)
        } else {
            Tensor::zeros(&[n])
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, init: &mut Init, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let std = (2.0 / (inp + out) as f64).sqrt();
        let w = store.add(format!("{name}.w"), init.normal(&[inp, out], std));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out])));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub(crate) fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), init.ones(dim));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Norm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Two-layer GELU feed-forward net; used for experts and decoder MLPs.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub(crate) fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}

/// Multi-head self-attention applied independently to consecutive segments of `seg_len` rows.
/// The key projection has no bias: softmax is invariant to it, so its gradient is identically zero.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub(crate) fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Attention {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim, false),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim, true),
            proj: Linear::new(store, init, &format!("{name}.proj"), dim, dim, true),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, seg_len: usize) -> Result<Var> {
        let (rows, dim) = (g.shape(x)[0], g.shape(x)[1]);
        let qa = self.q.forward(g, store, x)?;
        let ka = self.k.forward(g, store, x)?;
        let va = self.v.forward(g, store, x)?;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut segments = Vec::with_capacity(rows / seg_len.max(1));
        let mut start = 0;
        while start < rows {
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = g.slice(qa, start, seg_len, h * dh, dh)?;
                let k = g.slice(ka, start, seg_len, h * dh, dh)?;
                let v = g.slice(va, start, seg_len, h * dh, dh)?;
                let kt = g.transpose(k)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, scale);
                let a = g.softmax(s, 1)?;
                heads.push(g.matmul(a, v)?);
            }
            segments.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
            start += seg_len;
        }
        let merged = if segments.len() == 1 { segments[0] } else { g.concat_rows(&segments)? };
        self.proj.forward(g, store, merged)
    }
}
