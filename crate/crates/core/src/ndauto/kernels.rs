//! Raw numeric kernels shared by forward and backward rules.

/// `c = beta * c + op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `ta` set, `a` is stored as `k×m`; with `tb` set, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made through these strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Writes `src` (shape `shape`) permuted by `perm` into `dst`, accumulating
/// when `accumulate` is set. `dst` has shape `shape[perm[i]]`.
pub fn permute_into(src: &[f64], shape: &[usize], perm: &[usize], dst: &mut [f64], accumulate: bool) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the source for each output axis
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for out in dst.iter_mut() {
        if accumulate {
            *out += src[offset];
        } else {
            *out = src[offset];
        }
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Builds the `[batch * l_out, k * c_in]` patch matrix of a channels-last
/// `[batch, l_in, c_in]` signal.
pub fn im2col(x: &[f64], batch: usize, l_in: usize, c_in: usize, kernel: usize, stride: usize, pad: usize, l_out: usize) -> Vec<f64> {
    let width = kernel * c_in;
    let mut cols = vec![0.0; batch * l_out * width];
    for b in 0..batch {
        for o in 0..l_out {
            let row = &mut cols[(b * l_out + o) * width..(b * l_out + o + 1) * width];
            for kk in 0..kernel {
                let pos = (o * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < l_in {
                    let src = (b * l_in + pos as usize) * c_in;
                    row[kk * c_in..(kk + 1) * c_in].copy_from_slice(&x[src..src + c_in]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the signal.
pub fn col2im_add(cols: &[f64], dx: &mut [f64], batch: usize, l_in: usize, c_in: usize, kernel: usize, stride: usize, pad: usize, l_out: usize) {
    let width = kernel * c_in;
    for b in 0..batch {
        for o in 0..l_out {
            let row = &cols[(b * l_out + o) * width..(b * l_out + o + 1) * width];
            for kk in 0..kernel {
                let pos = (o * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < l_in {
                    let dst = (b * l_in + pos as usize) * c_in;
                    for (d, s) in dx[dst..dst + c_in].iter_mut().zip(&row[kk * c_in..(kk + 1) * c_in]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
