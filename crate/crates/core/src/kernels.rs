//! Slice-level numeric kernels shared by the plain tensor ops and the tape.

use crate::scalar::Scalar;

/// `c = alpha * op(a) @ op(b) + beta * c` with `c` row-major `m x n`.
///
/// `op(a)` is `m x k`: stored row-major as `m x k`, or as `k x m` when
/// `trans_a` is set. Likewise `op(b)` is `k x n`, stored `n x k` when
/// `trans_b` is set.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above cover every index reachable with these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution, `None` if the kernel does not fit.
    pub fn forward(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 {
            return None;
        }
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if kernel > ph || kernel > pw {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one `C x H x W` image into a `(C*k*k) x (out_h*out_w)` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    if g.is_pointwise() {
        cols.copy_from_slice(&x[..g.col_rows() * g.col_cols()]);
        return;
    }
    let ncols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into the image.
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    if g.is_pointwise() {
        x.iter_mut().zip(cols).for_each(|(a, &b)| *a += b);
        return;
    }
    let ncols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward over a batch.
///
/// `x`: `n x C x H x W`, `w`: `F x C x k x k`, `bias`: `F`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    filters: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = filters * g.col_cols();
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let os = &mut out[n * out_len..(n + 1) * out_len];
        let beta = match bias {
            Some(b) => {
                for (f, &bv) in b.iter().enumerate() {
                    os[f * g.col_cols()..(f + 1) * g.col_cols()].fill(bv);
                }
                T::one()
            }
            None => T::zero(),
        };
        if g.is_pointwise() {
            gemm(false, false, filters, g.col_cols(), g.col_rows(), T::one(), w, xs, beta, os);
        } else {
            im2col(xs, g, &mut cols);
            gemm(false, false, filters, g.col_cols(), g.col_rows(), T::one(), w, &cols, beta, os);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Returns `(dx, dw, dbias)`; each is
/// computed only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    filters: usize,
    gout: &[T],
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.channels * g.height * g.width;
    let out_len = filters * g.col_cols();
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); filters];
        for n in 0..batch {
            for (f, d) in db.iter_mut().enumerate() {
                let s = &gout[n * out_len + f * g.col_cols()..n * out_len + (f + 1) * g.col_cols()];
                *d += s.iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let gs = &gout[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm(false, true, filters, g.col_rows(), g.col_cols(), T::one(), gs, cols_ref, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(true, false, g.col_rows(), g.col_cols(), filters, T::one(), w, gs, T::zero(), dxs);
            } else {
                gemm(true, false, g.col_rows(), g.col_cols(), filters, T::one(), w, gs, T::zero(), &mut cols);
                col2im_add(&cols, g, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution forward. `geom_out` is the geometry of the
/// *equivalent forward convolution* mapping the output back to the input:
/// channels = F, height/width = output size, out_h/out_w = input size.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    in_channels: usize,
    geom_out: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let g = geom_out;
    let filters = g.channels;
    let hw_in = g.col_cols();
    let in_len = in_channels * hw_in;
    let out_plane = g.height * g.width;
    let out_len = filters * out_plane;
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); g.col_rows() * hw_in];
    for n in 0..batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let os = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (f, &bv) in b.iter().enumerate() {
                os[f * out_plane..(f + 1) * out_plane].fill(bv);
            }
        }
        // cols = W^T @ x, W stored as C x (F*k*k).
        gemm(true, false, g.col_rows(), hw_in, in_channels, T::one(), w, xs, T::zero(), &mut cols);
        col2im_add(&cols, g, os);
    }
    out
}

/// Gradients of [`conv_transpose2d_forward`]; returns `(dx, dw, dbias)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    in_channels: usize,
    geom_out: &ConvGeom,
    w: &[T],
    gout: &[T],
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let g = geom_out;
    let filters = g.channels;
    let hw_in = g.col_cols();
    let in_len = in_channels * hw_in;
    let out_plane = g.height * g.width;
    let out_len = filters * out_plane;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); filters];
        for n in 0..batch {
            for (f, d) in db.iter_mut().enumerate() {
                let s = &gout[n * out_len + f * out_plane..n * out_len + (f + 1) * out_plane];
                *d += s.iter().copied().sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }
    let mut cols = vec![T::zero(); g.col_rows() * hw_in];
    for n in 0..batch {
        let gs = &gout[n * out_len..(n + 1) * out_len];
        im2col(gs, g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * in_len..(n + 1) * in_len];
            gemm(false, false, in_channels, hw_in, g.col_rows(), T::one(), w, &cols, T::zero(), dxs);
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[n * in_len..(n + 1) * in_len];
            gemm(false, true, in_channels, g.col_rows(), hw_in, T::one(), xs, &cols, T::one(), dw);
        }
    }
    (dx, dw, db)
}

/// Logistic function, clamped so the result is strictly inside `(0, 1)`
/// even where the exact value rounds to an endpoint.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    s.max(T::min_positive_value())
        .min(T::one() - T::epsilon() * T::lit(0.5))
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// In-place softmax over a row.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
