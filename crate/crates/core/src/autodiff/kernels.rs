//! Forward and backward kernels for the spatial and linear-algebra ops.
//!
//! Feature maps are NHWC, kernels are `[kh, kw, c_in, c_out]`, matrices are
//! row-major.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Visits every (output pixel, kernel tap) pair that lands inside the
    /// unpadded input, passing flat offsets of the input pixel, kernel tap
    /// and output pixel (each scaled to the start of the channel run).
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let out_off = ((b * self.oh + oy) * self.ow + ox) * self.c_out;
                    for ky in 0..self.kh {
                        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let in_off =
                                ((b * self.h + iy as usize) * self.w + ix as usize) * self.c_in;
                            let k_off = (ky * self.kw + kx) * self.c_in * self.c_out;
                            f(in_off, k_off, out_off);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * g.c_out];
    let c_out = g.c_out;
    g.for_each_tap(|in_off, k_off, out_off| {
        let orow = &mut out[out_off..out_off + c_out];
        for ci in 0..g.c_in {
            let x = input[in_off + ci];
            if x == T::zero() {
                continue;
            }
            let krow = &kernel[k_off + ci * c_out..k_off + (ci + 1) * c_out];
            for (o, &k) in orow.iter_mut().zip(krow) {
                *o += x * k;
            }
        }
    });
    out
}

/// Returns (d_input, d_kernel).
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut d_in = want_input.then(|| vec![T::zero(); input.len()]);
    let mut d_k = want_kernel.then(|| vec![T::zero(); kernel.len()]);
    let c_out = g.c_out;
    g.for_each_tap(|in_off, k_off, out_off| {
        let grow = &grad_out[out_off..out_off + c_out];
        for ci in 0..g.c_in {
            let kbase = k_off + ci * c_out;
            if let Some(d_in) = d_in.as_mut() {
                let krow = &kernel[kbase..kbase + c_out];
                let mut acc = T::zero();
                for (&gv, &k) in grow.iter().zip(krow) {
                    acc += gv * k;
                }
                d_in[in_off + ci] += acc;
            }
            if let Some(d_k) = d_k.as_mut() {
                let x = input[in_off + ci];
                if x != T::zero() {
                    for (dk, &gv) in d_k[kbase..kbase + c_out].iter_mut().zip(grow) {
                        *dk += x * gv;
                    }
                }
            }
        }
    });
    (d_in, d_k)
}

/// Non-overlapping average pooling over exact `kh x kw` tiles.
pub(crate) fn avg_pool_forward<T: Scalar>(
    input: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
) -> Vec<T> {
    let (oh, ow) = (h / kh, w / kw);
    let inv = T::one() / T::lit((kh * kw) as f64);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let src = ((b * h + y) * w + x) * c;
                let dst = ((b * oh + y / kh) * ow + x / kw) * c;
                for ch in 0..c {
                    out[dst + ch] += input[src + ch];
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(
    grad_out: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
) -> Vec<T> {
    let (oh, ow) = (h / kh, w / kw);
    let inv = T::one() / T::lit((kh * kw) as f64);
    let mut d = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let dst = ((b * h + y) * w + x) * c;
                let src = ((b * oh + y / kh) * ow + x / kw) * c;
                for ch in 0..c {
                    d[dst + ch] = grad_out[src + ch] * inv;
                }
            }
        }
    }
    d
}

/// `[m, k] x [k, n] -> [m, n]`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `G [m, n] x B^T -> [m, k]`.
pub(crate) fn matmul_grad_a<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(&b[p * n..(p + 1) * n]) {
                acc += gv * bv;
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// `A^T x G [m, n] -> [k, n]`.
pub(crate) fn matmul_grad_b<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Moves axis data according to `axes` (output axis i reads input axis axes[i]).
pub(crate) fn permute<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = crate::tensor::strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..data.len() {
        let src: usize = idx
            .iter()
            .zip(axes)
            .map(|(&i, &a)| i * in_strides[a])
            .sum();
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
