use super::params::{Init, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// `y = x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            weight: store.add(&format!("{name}.weight"), input, output, Init::Glorot, seed)?,
            bias: store.add(&format!("{name}.bias"), 1, output, Init::Zeros, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        affine(tape, x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `x W + b` for tape-resident operands.
pub fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// `Softmax(q k^T / sqrt(d_k)) v`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, d_k: usize) -> Result<Var> {
    let (qs, ks, vs) = (tape.value(q).shape(), tape.value(k).shape(), tape.value(v).shape());
    if qs.1 != d_k || ks.1 != d_k {
        return Err(Error::shape("attention query/key width", qs, ks));
    }
    if ks.0 != vs.0 {
        return Err(Error::shape("attention key/value rows", ks, vs));
    }
    let scores = tape.matmul_t(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, v)
}

/// Two affine layers with a tanh in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub hidden: Affine,
    pub output: Affine,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Affine::new(store, &format!("{name}.hidden"), input, hidden, seed)?,
            output: Affine::new(store, &format!("{name}.output"), hidden, output, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.tanh(h);
        self.output.forward(tape, store, h)
    }
}

/// Token embedding table.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            table: store.add(&format!("{name}.table"), vocab, dim, Init::Glorot, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.table);
        tape.gather(t, tokens)
    }
}
