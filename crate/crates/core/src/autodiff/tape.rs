//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the
//! information its backward rule needs. [`Tape::backward`] consumes the
//! tape, walks the nodes once in reverse order, and returns the gradients
//! of every leaf that requires them.

use std::collections::BTreeMap;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Caller-chosen identifier for a parameter leaf, used to key gradients.
pub type ParamKey = usize;

type CustomBackward<T> = Box<dyn Fn(&[T], &[T], &[T]) -> Vec<T>>;

enum Value<'a, T> {
    Borrowed(&'a Tensor<T>),
    Owned(Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        filters: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        in_channels: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
        batch: usize,
        channels: usize,
        plane: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
        batch: usize,
        tokens: usize,
        dim: usize,
        heads: usize,
    },
    MeanTokens {
        x: Var,
        batch: usize,
        tokens: usize,
        dim: usize,
    },
    TokensFromMap {
        x: Var,
        batch: usize,
        channels: usize,
        plane: usize,
    },
    Reshape {
        x: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        batch: usize,
        ca: usize,
        cb: usize,
        plane: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
        clamp: T,
    },
    Custom {
        x: Var,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::MeanTokens { .. } => "mean_tokens",
            Op::TokensFromMap { .. } => "tokens_from_map",
            Op::Reshape { .. } => "reshape",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Bce { .. } => "bce",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamKey>,
}

/// Batch-norm statistics source.
pub enum NormStats<'s, T> {
    /// Normalize with the batch's own statistics.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'s [T], var: &'s [T] },
}

/// Per-channel statistics observed by a training-mode batch norm: the mean
/// and the unbiased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    by_var: BTreeMap<Var, Vec<T>>,
    by_param: BTreeMap<ParamKey, Vec<T>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a non-parameter leaf.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.by_var.get(&v).map(Vec::as_slice)
    }

    /// Gradient of a parameter leaf, summed over every use on the tape.
    pub fn param(&self, key: ParamKey) -> Option<&[T]> {
        self.by_param.get(&key).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamKey, &[T])> {
        self.by_param.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn into_params(self) -> BTreeMap<ParamKey, Vec<T>> {
        self.by_param
    }

    /// Number of nodes whose backward rule ran (leaves included).
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}

/// A recording of tensor operations that can be differentiated once.
pub struct Tape<'a, T> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which no leaf requires gradients; used for inference.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Moves a node's value out of the tape.
    pub fn take(mut self, v: Var) -> Tensor<T> {
        let node = self.nodes.swap_remove(v.0);
        match node.value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t.clone(),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Value<'a, T>, needs_grad: bool, param: Option<ParamKey>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: needs_grad && self.grad_enabled,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; tracked if the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push_leaf(Value::Owned(t), rg, None)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Value::Owned(t), false, None)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn input(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_leaf(Value::Borrowed(t), false, None)
    }

    /// Borrowed parameter leaf; its gradient is reported under `key`.
    pub fn param(&mut self, key: ParamKey, t: &'a Tensor<T>) -> Var {
        self.push_leaf(Value::Borrowed(t), t.requires_grad(), Some(key))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(false, false, m, n, k, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `x @ w + b` over the last dimension; `w` is `[din, dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let din = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != din {
            return dim_err(format!("linear input {sx:?} with weight {sw:?}"));
        }
        let dout = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return dim_err(format!("linear bias {:?} for {dout} outputs", self.shape(b)));
            }
        }
        let rows = if din == 0 { 0 } else { self.value(x).numel() / din };
        let mut out = vec![T::zero(); rows * dout];
        let beta = match b {
            Some(b) => {
                let bv = self.value(b).data();
                out.chunks_mut(dout).for_each(|r| r.copy_from_slice(bv));
                T::one()
            }
            None => T::zero(),
        };
        kernels::gemm(false, false, rows, dout, din, T::one(), self.value(x).data(), self.value(w).data(), beta, &mut out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Linear { x, w, b, rows, din, dout },
            &parents,
        )
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, &[a, b])
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return dim_err(format!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let bl = self.value(b).numel();
        let bv = self.value(b).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % bl])
            .collect();
        let shape = sa.to_vec();
        self.push(Tensor::from_parts(shape, out), Op::AddBroadcast { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale { x, c }, &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, kernels::gelu, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, kernels::sigmoid, Op::Sigmoid { x })
    }

    /// Cross-correlation. `x: [N,C,H,W]`, `w: [F,C,k,k]`, `b: [F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return dim_err(format!("conv2d input {sx:?} with weight {sw:?}"));
        }
        let filters = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [filters] {
                return dim_err(format!("conv2d bias {:?} for {filters} filters", self.shape(b)));
            }
        }
        let geom = ConvGeom::forward(sx[1], sx[2], sx[3], sw[2], stride, padding).ok_or_else(|| {
            Error::Dimension(format!(
                "kernel {} larger than padded input {}x{} (padding {padding}, stride {stride})",
                sw[2], sx[2], sx[3]
            ))
        })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            sx[0],
            &geom,
            self.value(w).data(),
            filters,
            b.map(|b| self.value(b).data()),
        );
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            Tensor::from_parts(vec![sx[0], filters, geom.out_h, geom.out_w], out),
            Op::Conv2d { x, w, b, geom, batch: sx[0], filters },
            &parents,
        )
    }

    /// Transposed convolution. `x: [N,C,H,W]`, `w: [C,F,k,k]`, `b: [F]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] {
            return dim_err(format!("conv_transpose2d input {sx:?} with weight {sw:?}"));
        }
        let (c, f, k) = (sw[0], sw[1], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [f] {
                return dim_err(format!("conv_transpose2d bias {:?} for {f} filters", self.shape(b)));
            }
        }
        let out_side = |n: usize| -> Result<usize> {
            let full = (n as isize - 1) * stride as isize + k as isize - 2 * padding as isize;
            if full <= 0 || stride == 0 {
                return dim_err(format!(
                    "conv_transpose2d output size {full} from input {n} (k={k}, stride={stride}, padding={padding})"
                ));
            }
            Ok(full as usize)
        };
        let (oh, ow) = (out_side(sx[2])?, out_side(sx[3])?);
        let geom = ConvGeom::forward(f, oh, ow, k, stride, padding)
            .filter(|g| g.out_h == sx[2] && g.out_w == sx[3])
            .ok_or_else(|| Error::Dimension("inconsistent transposed-convolution geometry".into()))?;
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            sx[0],
            c,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            Tensor::from_parts(vec![sx[0], f, oh, ow], out),
            Op::ConvTranspose2d { x, w, b, geom, batch: sx[0], in_channels: c },
            &parents,
        )
    }

    /// Per-channel normalization of `[N,C,H,W]` over `(N,H,W)`.
    ///
    /// With [`NormStats::Batch`] the returned [`BatchStats`] carry the
    /// observed mean and unbiased variance for the caller's running averages.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return dim_err(format!("batch_norm2d expects [N,C,H,W], got {sx:?}"));
        }
        let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err(format!("batch_norm2d affine params for {c} channels"));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let count = n * plane;
        let (mean, var_biased, observed) = match stats {
            NormStats::Batch => {
                if count < 2 {
                    return Err(Error::DegenerateVariance(format!(
                        "batch norm in training mode needs N*H*W >= 2, got {count}"
                    )));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let cnt = T::from_usize_lossy(count);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<T>();
                    }
                    let m = s / cnt;
                    let mut v = T::zero();
                    for b in 0..n {
                        for &xv in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                            v += (xv - m) * (xv - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / cnt;
                }
                let unbiased = T::from_usize_lossy(count) / T::from_usize_lossy(count - 1);
                let observed = BatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbiased).collect(),
                };
                (mean, var, Some(observed))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return dim_err(format!("running statistics for {c} channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bta[ch];
                }
            }
        }
        let batch_stats = observed.is_some();
        let v = self.push(
            Tensor::from_parts(sx, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                batch: n,
                channels: c,
                plane,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, observed))
    }

    /// Normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let dim = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] || dim == 0 {
            return dim_err(format!("layer_norm over {sx:?}"));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let rows = xd.len() / dim;
        let d = T::from_usize_lossy(dim);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * dim..(r + 1) * dim];
            let m = row.iter().copied().sum::<T>() / d;
            let v = row.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / d;
            let is = T::one() / (v + eps).sqrt();
            inv_std[r] = is;
            for j in 0..dim {
                let h = (row[j] - m) * is;
                xhat[r * dim + j] = h;
                out[r * dim + j] = g[j] * h + bta[j];
            }
        }
        self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std, dim },
            &[x, gamma, beta],
        )
    }

    /// Scaled dot-product attention on `[N,T,D]` projections split into
    /// `heads` heads of width `D / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return dim_err(format!(
                "attention projections {:?} {:?} {:?}",
                sq,
                self.shape(k),
                self.shape(v)
            ));
        }
        let (n, t, d) = (sq[0], sq[1], sq[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("embed dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); n * heads * t * t];
        let mut out = vec![T::zero(); n * t * d];
        let mut qh = vec![T::zero(); t * dh];
        let mut kh = vec![T::zero(); t * dh];
        let mut vh = vec![T::zero(); t * dh];
        let mut oh = vec![T::zero(); t * dh];
        for b in 0..n {
            for h in 0..heads {
                gather_head(qd, b, h, t, d, dh, &mut qh);
                gather_head(kd, b, h, t, d, dh, &mut kh);
                gather_head(vd, b, h, t, d, dh, &mut vh);
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                kernels::gemm(false, true, t, t, dh, scale, &qh, &kh, T::zero(), p);
                p.chunks_mut(t).for_each(kernels::softmax_row);
                kernels::gemm(false, false, t, dh, t, T::one(), p, &vh, T::zero(), &mut oh);
                scatter_head(&oh, b, h, t, d, dh, &mut out, false);
            }
        }
        self.push(
            Tensor::from_parts(sq, out),
            Op::Attention { q, k, v, probs, batch: n, tokens: t, dim: d, heads },
            &[q, k, v],
        )
    }

    /// Attention probabilities `[N, heads, T, T]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `[N,T,D] -> [N,D]` by averaging over tokens.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] == 0 {
            return dim_err(format!("mean_tokens expects [N,T,D], got {sx:?}"));
        }
        let (n, t, d) = (sx[0], sx[1], sx[2]);
        let xd = self.value(x).data();
        let inv = T::one() / T::from_usize_lossy(t);
        let mut out = vec![T::zero(); n * d];
        for b in 0..n {
            for tok in 0..t {
                let row = &xd[(b * t + tok) * d..(b * t + tok + 1) * d];
                out[b * d..(b + 1) * d].iter_mut().zip(row).for_each(|(o, &v)| *o += v);
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::from_parts(vec![n, d], out), Op::MeanTokens { x, batch: n, tokens: t, dim: d }, &[x])
    }

    /// `[N,C,H,W] -> [N,H*W,C]`.
    pub fn tokens_from_map(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return dim_err(format!("tokens_from_map expects [N,C,H,W], got {sx:?}"));
        }
        let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    out[(b * plane + p) * c + ch] = xd[(b * c + ch) * plane + p];
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![n, plane, c], out),
            Op::TokensFromMap { x, batch: n, channels: c, plane },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return dim_err(format!("cannot reshape {:?} into {:?}", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape { x }, &[x])
    }

    /// Stacks `a: [N,Ca,H,W]` and `b: [N,Cb,H,W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return dim_err(format!("concat_channels of {sa:?} and {sb:?}"));
        }
        let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&ad[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&bd[i * cb * plane..(i + 1) * cb * plane]);
        }
        self.push(
            Tensor::from_parts(vec![n, ca + cb, sa[2], sa[3]], out),
            Op::ConcatChannels { a, b, batch: n, ca, cb, plane },
            &[a, b],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return contract_err("mean of an empty tensor");
        }
        let m = t.sum() / T::from_usize_lossy(t.numel());
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// Mean binary cross-entropy with predictions clamped to
    /// `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>, clamp: T) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return contract_err(format!(
                "bce prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            ));
        }
        let p = self.value(pred).data();
        if p.is_empty() {
            return contract_err("bce over an empty tensor");
        }
        let (lo, hi) = (clamp, T::one() - clamp);
        let total: T = p
            .iter()
            .zip(target.data())
            .map(|(&pv, &y)| {
                let pc = pv.max(lo).min(hi);
                -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
            })
            .sum();
        let loss = total / T::from_usize_lossy(p.len());
        self.push(
            Tensor::scalar(loss),
            Op::Bce { pred, target: target.data().to_vec(), clamp },
            &[pred],
        )
    }

    /// Elementwise op with a caller-supplied forward and backward rule.
    /// `backward(input, output, grad_output)` returns the input gradient.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(T) -> T,
        backward: impl Fn(&[T], &[T], &[T]) -> Vec<T> + 'static,
    ) -> Result<Var> {
        self.map(x, forward, Op::Custom { x, backward: Box::new(backward) })
    }

    /// Hash of every piecewise branch taken on the tape: ReLU input signs and
    /// BCE clamp activity. Two evaluations with equal signatures lie on the
    /// same smooth piece of the recorded function.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hasher};
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.value(*x).data() {
                        h.write_u8((v > T::zero()) as u8);
                    }
                }
                Op::Bce { pred, clamp, .. } => {
                    let (lo, hi) = (*clamp, T::one() - *clamp);
                    for &v in self.value(*pred).data() {
                        h.write_u8(if v < lo { 0 } else if v > hi { 2 } else { 1 });
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Runs the backward pass from a one-element `loss` and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            by_var: BTreeMap::new(),
            by_param: BTreeMap::new(),
            visited: 0,
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            out.visited += 1;
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match node.param {
                    Some(key) => match out.by_param.get_mut(&key) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => {
                            out.by_param.insert(key, g);
                        }
                    },
                    None => {
                        out.by_var.insert(Var(i), g);
                    }
                }
                continue;
            }
            for (parent, pg) in self.backward_node(i, &g) {
                if !self.needs(parent) {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out_val = node.value.get().data();
        let val = |v: Var| self.value(v).data();
        let mut res = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm(false, true, *m, *k, *n, T::one(), g, val(*b), T::zero(), &mut ga);
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm(true, false, *k, *n, *m, T::one(), val(*a), g, T::zero(), &mut gb);
                    res.push((*b, gb));
                }
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); rows * din];
                    kernels::gemm(false, true, *rows, *din, *dout, T::one(), g, val(*w), T::zero(), &mut gx);
                    res.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); din * dout];
                    kernels::gemm(true, false, *din, *dout, *rows, T::one(), val(*x), g, T::zero(), &mut gw);
                    res.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut gb = vec![T::zero(); *dout];
                    for r in g.chunks(*dout) {
                        gb.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
                    }
                    res.push((b, gb));
                }
            }
            Op::Add { a, b } => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::AddBroadcast { a, b } => {
                res.push((*a, g.to_vec()));
                if self.needs(*b) {
                    let bl = self.value(*b).numel();
                    let mut gb = vec![T::zero(); bl];
                    for (j, &v) in g.iter().enumerate() {
                        gb[j % bl] += v;
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                res.push((*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect()));
                res.push((*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect()));
            }
            Op::Scale { x, c } => res.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::Relu { x } => res.push((
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect(),
            )),
            Op::Gelu { x } => res.push((
                *x,
                g.iter().zip(val(*x)).map(|(&gi, &xi)| gi * kernels::gelu_grad(xi)).collect(),
            )),
            Op::Sigmoid { x } => res.push((
                *x,
                g.iter().zip(out_val).map(|(&gi, &s)| gi * s * (T::one() - s)).collect(),
            )),
            Op::Conv2d { x, w, b, geom, batch, filters } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let (gx, gw, gb) = kernels::conv2d_backward(val(*x), *batch, geom, val(*w), *filters, g, need);
                push_some(&mut res, *x, gx);
                push_some(&mut res, *w, gw);
                if let Some(b) = b {
                    push_some(&mut res, *b, gb);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, batch, in_channels } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let (gx, gw, gb) =
                    kernels::conv_transpose2d_backward(val(*x), *batch, *in_channels, geom, val(*w), g, need);
                push_some(&mut res, *x, gx);
                push_some(&mut res, *w, gw);
                if let Some(b) = b {
                    push_some(&mut res, *b, gb);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats, batch, channels, plane } => {
                let gam = val(*gamma);
                let mut ggamma = vec![T::zero(); *channels];
                let mut gbeta = vec![T::zero(); *channels];
                let mut sum_dxhat = vec![T::zero(); *channels];
                let mut sum_dxhat_xhat = vec![T::zero(); *channels];
                for b in 0..*batch {
                    for c in 0..*channels {
                        let base = (b * channels + c) * plane;
                        for i in base..base + plane {
                            ggamma[c] += g[i] * xhat[i];
                            gbeta[c] += g[i];
                            let dh = g[i] * gam[c];
                            sum_dxhat[c] += dh;
                            sum_dxhat_xhat[c] += dh * xhat[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    let m = T::from_usize_lossy(batch * plane);
                    for b in 0..*batch {
                        for c in 0..*channels {
                            let base = (b * channels + c) * plane;
                            for i in base..base + plane {
                                let dh = g[i] * gam[c];
                                gx[i] = if *batch_stats {
                                    inv_std[c] / m * (m * dh - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c])
                                } else {
                                    dh * inv_std[c]
                                };
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                res.push((*gamma, ggamma));
                res.push((*beta, gbeta));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std, dim } => {
                let gam = val(*gamma);
                let mut ggamma = vec![T::zero(); *dim];
                let mut gbeta = vec![T::zero(); *dim];
                let mut gx = vec![T::zero(); g.len()];
                let d = T::from_usize_lossy(*dim);
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * dim..(r + 1) * dim];
                    let hr = &xhat[r * dim..(r + 1) * dim];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..*dim {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    for j in 0..*dim {
                        let dh = gr[j] * gam[j];
                        gx[r * dim + j] = *is / d * (d * dh - s1 - hr[j] * s2);
                    }
                }
                res.push((*x, gx));
                res.push((*gamma, ggamma));
                res.push((*beta, gbeta));
            }
            Op::Attention { q, k, v, probs, batch, tokens, dim, heads } => {
                let (n, t, d, nh) = (*batch, *tokens, *dim, *heads);
                let dh = d / nh;
                let scale = T::one() / T::from_usize_lossy(dh).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut gq = vec![T::zero(); n * t * d];
                let mut gk = vec![T::zero(); n * t * d];
                let mut gv = vec![T::zero(); n * t * d];
                let mut qh = vec![T::zero(); t * dh];
                let mut kh = vec![T::zero(); t * dh];
                let mut vh = vec![T::zero(); t * dh];
                let mut gh = vec![T::zero(); t * dh];
                let mut tmp = vec![T::zero(); t * dh];
                let mut dp = vec![T::zero(); t * t];
                for b in 0..n {
                    for h in 0..nh {
                        gather_head(qd, b, h, t, d, dh, &mut qh);
                        gather_head(kd, b, h, t, d, dh, &mut kh);
                        gather_head(vd, b, h, t, d, dh, &mut vh);
                        gather_head(g, b, h, t, d, dh, &mut gh);
                        let p = &probs[(b * nh + h) * t * t..(b * nh + h + 1) * t * t];
                        // dV = P^T dO
                        kernels::gemm(true, false, t, dh, t, T::one(), p, &gh, T::zero(), &mut tmp);
                        scatter_head(&tmp, b, h, t, d, dh, &mut gv, true);
                        // dP = dO V^T, then softmax backward into dS.
                        kernels::gemm(false, true, t, t, dh, T::one(), &gh, &vh, T::zero(), &mut dp);
                        for r in 0..t {
                            let pr = &p[r * t..(r + 1) * t];
                            let dr = &mut dp[r * t..(r + 1) * t];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            dr.iter_mut().zip(pr).for_each(|(dv, &pv)| *dv = pv * (*dv - dot));
                        }
                        kernels::gemm(false, false, t, dh, t, scale, &dp, &kh, T::zero(), &mut tmp);
                        scatter_head(&tmp, b, h, t, d, dh, &mut gq, true);
                        kernels::gemm(true, false, t, dh, t, scale, &dp, &qh, T::zero(), &mut tmp);
                        scatter_head(&tmp, b, h, t, d, dh, &mut gk, true);
                    }
                }
                res.push((*q, gq));
                res.push((*k, gk));
                res.push((*v, gv));
            }
            Op::MeanTokens { x, batch, tokens, dim } => {
                let inv = T::one() / T::from_usize_lossy(*tokens);
                let mut gx = vec![T::zero(); batch * tokens * dim];
                for b in 0..*batch {
                    for tok in 0..*tokens {
                        for j in 0..*dim {
                            gx[(b * tokens + tok) * dim + j] = g[b * dim + j] * inv;
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::TokensFromMap { x, batch, channels, plane } => {
                let mut gx = vec![T::zero(); g.len()];
                for b in 0..*batch {
                    for c in 0..*channels {
                        for p in 0..*plane {
                            gx[(b * channels + c) * plane + p] = g[(b * plane + p) * channels + c];
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::Reshape { x } => res.push((*x, g.to_vec())),
            Op::ConcatChannels { a, b, batch, ca, cb, plane } => {
                let mut ga = Vec::with_capacity(batch * ca * plane);
                let mut gb = Vec::with_capacity(batch * cb * plane);
                let stride = (ca + cb) * plane;
                for i in 0..*batch {
                    ga.extend_from_slice(&g[i * stride..i * stride + ca * plane]);
                    gb.extend_from_slice(&g[i * stride + ca * plane..(i + 1) * stride]);
                }
                res.push((*a, ga));
                res.push((*b, gb));
            }
            Op::Sum { x } => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                res.push((*x, vec![g[0] / T::from_usize_lossy(n); n]));
            }
            Op::Bce { pred, target, clamp } => {
                let p = val(*pred);
                let n = T::from_usize_lossy(p.len());
                let (lo, hi) = (*clamp, T::one() - *clamp);
                let gp = p
                    .iter()
                    .zip(target)
                    .map(|(&pv, &y)| {
                        if pv < lo || pv > hi {
                            T::zero()
                        } else {
                            g[0] * (pv - y) / (pv * (T::one() - pv)) / n
                        }
                    })
                    .collect();
                res.push((*pred, gp));
            }
            Op::Custom { x, backward } => res.push((*x, backward(val(*x), out_val, g))),
        }
        res
    }
}

fn push_some<T>(res: &mut Vec<(Var, Vec<T>)>, v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        res.push((v, g));
    }
}

fn gather_head<T: Scalar>(src: &[T], b: usize, h: usize, t: usize, d: usize, dh: usize, dst: &mut [T]) {
    for tok in 0..t {
        let s = (b * t + tok) * d + h * dh;
        dst[tok * dh..(tok + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head<T: Scalar>(src: &[T], b: usize, h: usize, t: usize, d: usize, dh: usize, dst: &mut [T], add: bool) {
    for tok in 0..t {
        let s = (b * t + tok) * d + h * dh;
        let row = &mut dst[s..s + dh];
        let from = &src[tok * dh..(tok + 1) * dh];
        if add {
            row.iter_mut().zip(from).for_each(|(a, &v)| *a += v);
        } else {
            row.copy_from_slice(from);
        }
    }
}
