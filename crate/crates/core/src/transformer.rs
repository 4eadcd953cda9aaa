//! Post-LN transformer blocks shared by the encoder and the proposal net.

use rand::{Rng, RngCore};

use crate::autodiff::{Segment, Tape, Var};
use crate::error::Result;
use crate::params::{normal_tensor, Binder, ParamId, ParamStore};
use crate::tensor::Tensor;

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

impl LayerParams {
    /// Registers a block in canonical order: attention, FFN, norms.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Self {
        let w = |store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut R| {
            store.add(format!("{prefix}.{name}"), normal_tensor(shape, INIT_STD, rng))
        };
        let z = |store: &mut ParamStore, name: &str, n: usize| {
            store.add(format!("{prefix}.{name}"), Tensor::zeros(&[n]))
        };
        let wq = w(store, "attn.wq", &[hidden, hidden], rng);
        let bq = z(store, "attn.bq", hidden);
        let wk = w(store, "attn.wk", &[hidden, hidden], rng);
        let bk = z(store, "attn.bk", hidden);
        let wv = w(store, "attn.wv", &[hidden, hidden], rng);
        let bv = z(store, "attn.bv", hidden);
        let wo = w(store, "attn.wo", &[hidden, hidden], rng);
        let bo = z(store, "attn.bo", hidden);
        let w1 = w(store, "ffn.w1", &[hidden, ffn], rng);
        let b1 = z(store, "ffn.b1", ffn);
        let w2 = w(store, "ffn.w2", &[ffn, hidden], rng);
        let b2 = z(store, "ffn.b2", hidden);
        let ln1_g = store.add(format!("{prefix}.ln1.gamma"), Tensor::filled(&[hidden], 1.0));
        let ln1_b = z(store, "ln1.beta", hidden);
        let ln2_g = store.add(format!("{prefix}.ln2.gamma"), Tensor::filled(&[hidden], 1.0));
        let ln2_b = z(store, "ln2.beta", hidden);
        Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            w1,
            b1,
            w2,
            b2,
            ln1_g,
            ln1_b,
            ln2_g,
            ln2_b,
        }
    }

    pub fn ids(&self) -> [ParamId; 16] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.w1,
            self.b1, self.w2, self.b2, self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b,
        ]
    }
}

/// Runtime context for one forward pass.
pub struct Pass<'a> {
    pub tape: &'a mut Tape,
    pub binder: &'a mut Binder,
    pub store: &'a ParamStore,
    /// Dropout rate and its RNG; `None` disables dropout.
    pub dropout: Option<(f64, &'a mut dyn RngCore)>,
}

impl Pass<'_> {
    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        self.binder.bind(self.tape, self.store, id)
    }

    pub fn drop(&mut self, x: Var) -> Result<Var> {
        match self.dropout.as_mut() {
            Some((p, rng)) => self.tape.dropout(x, *p, &mut **rng),
            None => Ok(x),
        }
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (self.p(w)?, self.p(b)?);
        self.tape.linear(x, w, b)
    }

    pub fn layernorm(&mut self, x: Var, g: ParamId, b: ParamId) -> Result<Var> {
        let (g, b) = (self.p(g)?, self.p(b)?);
        self.tape.layernorm(x, g, b)
    }

    pub fn block(&mut self, layer: &LayerParams, x: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        let q = self.linear(x, layer.wq, layer.bq)?;
        let k = self.linear(x, layer.wk, layer.bk)?;
        let v = self.linear(x, layer.wv, layer.bv)?;
        let a = self.tape.attention(q, k, v, segments, heads)?;
        let a = self.linear(a, layer.wo, layer.bo)?;
        let a = self.drop(a)?;
        let x = self.tape.add(x, a)?;
        let x = self.layernorm(x, layer.ln1_g, layer.ln1_b)?;
        let f = self.linear(x, layer.w1, layer.b1)?;
        let f = self.tape.gelu(f)?;
        let f = self.linear(f, layer.w2, layer.b2)?;
        let f = self.drop(f)?;
        let x = self.tape.add(x, f)?;
        self.layernorm(x, layer.ln2_g, layer.ln2_b)
    }
}

/// Flattened ids, position ids and segments for a list of sentences.
pub(crate) fn pack(sentences: &[&[u32]]) -> (Vec<usize>, Vec<usize>, Vec<Segment>) {
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut segments = Vec::with_capacity(sentences.len());
    for s in sentences {
        segments.push(Segment {
            start: ids.len(),
            len: s.len(),
        });
        ids.extend(s.iter().map(|&t| t as usize));
        pos.extend(0..s.len());
    }
    (ids, pos, segments)
}
