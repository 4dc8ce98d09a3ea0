//! Forward-only tensor operations.
//!
//! These run the same kernels as the tape but on plain tensors, for callers
//! that do not need gradients.

use crate::autodiff::{NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Default batch-norm running-average momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::lit(BN_MOMENTUM),
        }
    }

    /// `running = (1 - momentum) * running + momentum * observed`.
    pub fn update(&mut self, mean: &[T], var: &[T]) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &o) in self.mean.iter_mut().zip(mean) {
            *r = keep * *r + m * o;
        }
        for (r, &o) in self.var.iter_mut().zip(var) {
            *r = keep * *r + m * o;
        }
    }
}

fn run<'a, T: Scalar>(build: impl FnOnce(&mut Tape<'a, T>) -> Result<Var>) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let out = build(&mut tape)?;
    Ok(tape.take(out))
}

pub fn matmul<'a, T: Scalar>(a: &'a Tensor<T>, b: &'a Tensor<T>) -> Result<Tensor<T>> {
    run(|t| {
        let (a, b) = (t.input(a), t.input(b));
        t.matmul(a, b)
    })
}

pub fn conv2d<'a, T: Scalar>(
    x: &'a Tensor<T>,
    w: &'a Tensor<T>,
    bias: Option<&'a Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    run(|t| {
        let (x, w) = (t.input(x), t.input(w));
        let b = bias.map(|b| t.input(b));
        t.conv2d(x, w, b, stride, padding)
    })
}

pub fn conv_transpose2d<'a, T: Scalar>(
    x: &'a Tensor<T>,
    w: &'a Tensor<T>,
    bias: Option<&'a Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    run(|t| {
        let (x, w) = (t.input(x), t.input(w));
        let b = bias.map(|b| t.input(b));
        t.conv_transpose2d(x, w, b, stride, padding)
    })
}

/// Batch normalization; in [`NormMode::Train`] the running statistics are
/// updated from the batch.
pub fn batch_norm2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: NormMode,
    running: &mut RunningStats<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let (xv, g, b) = (tape.input(x), tape.input(gamma), tape.input(beta));
    let stats = match mode {
        NormMode::Train => NormStats::Batch,
        NormMode::Eval => NormStats::Running {
            mean: &running.mean,
            var: &running.var,
        },
    };
    let (out, observed) = tape.batch_norm2d(xv, g, b, stats, eps)?;
    let out = tape.take(out);
    if let Some(obs) = observed {
        running.update(&obs.mean, &obs.var);
    }
    Ok(out)
}

pub fn elementwise<'a, T: Scalar>(x: &'a Tensor<T>, f: Activation) -> Result<Tensor<T>> {
    run(|t| {
        let x = t.input(x);
        match f {
            Activation::Relu => t.relu(x),
            Activation::Gelu => t.gelu(x),
            Activation::Sigmoid => t.sigmoid(x),
        }
    })
}

pub fn concat_channels<'a, T: Scalar>(a: &'a Tensor<T>, b: &'a Tensor<T>) -> Result<Tensor<T>> {
    run(|t| {
        let (a, b) = (t.input(a), t.input(b));
        t.concat_channels(a, b)
    })
}

/// Projection weights of a multi-head self-attention layer. Each weight is
/// `[D, D]` (input-major), each bias `[D]`.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

/// Self-attention output `[N,T,D]` together with the attention
/// probabilities `[N, heads, T, T]`.
pub fn multi_head_attention<T: Scalar>(
    x: &Tensor<T>,
    heads: usize,
    w: &AttentionWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("attention input {s:?} is not [N,T,D]")));
    }
    if heads == 0 || s[2] % heads != 0 {
        return Err(Error::Config(format!("embed dim {} not divisible by {heads} heads", s[2])));
    }
    let (n, tokens) = (s[0], s[1]);
    let mut tape = Tape::no_grad();
    let xv = tape.input(x);
    fn proj<'a, T: Scalar>(tape: &mut Tape<'a, T>, wt: &'a Tensor<T>, bt: &'a Tensor<T>, inp: Var) -> Result<Var> {
        let (wv, bv) = (tape.input(wt), tape.input(bt));
        tape.linear(inp, wv, Some(bv))
    }
    let q = proj(&mut tape, &w.wq, &w.bq, xv)?;
    let k = proj(&mut tape, &w.wk, &w.bk, xv)?;
    let v = proj(&mut tape, &w.wv, &w.bv, xv)?;
    let a = tape.attention(q, k, v, heads)?;
    let probs = Tensor::new(
        vec![n, heads, tokens, tokens],
        tape.attention_probs(a).expect("attention node").to_vec(),
    )?;
    let out = proj(&mut tape, &w.wo, &w.bo, a)?;
    Ok((tape.take(out), probs))
}
