//! Dense row-major kernels used by the forward and backward passes.

use super::Real;

/// Dot product with eight independent accumulators; the fixed summation
/// order keeps results reproducible.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy<F: Real>(a: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * *xi;
    }
}

/// `y[rows, out] = x[rows, inp] · w[inp, out] + b[out]`
pub fn linear<F: Real>(x: &[F], w: &[F], b: &[F], rows: usize, inp: usize, out: usize) -> Vec<F> {
    let mut y = vec![F::zero(); rows * out];
    for i in 0..rows {
        let yr = &mut y[i * out..(i + 1) * out];
        yr.copy_from_slice(b);
        let xr = &x[i * inp..(i + 1) * inp];
        for (k, &xk) in xr.iter().enumerate() {
            if xk != F::zero() {
                axpy(xk, &w[k * out..(k + 1) * out], yr);
            }
        }
    }
    y
}

/// Backward of [`linear`]: accumulates `dw`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Real>(
    x: &[F],
    w: &[F],
    dy: &[F],
    dw: &mut [F],
    db: &mut [F],
    rows: usize,
    inp: usize,
    out: usize,
) -> Vec<F> {
    let mut dx = vec![F::zero(); rows * inp];
    for i in 0..rows {
        let dyr = &dy[i * out..(i + 1) * out];
        axpy(F::one(), dyr, db);
        let xr = &x[i * inp..(i + 1) * inp];
        let dxr = &mut dx[i * inp..(i + 1) * inp];
        for k in 0..inp {
            let wr = &w[k * out..(k + 1) * out];
            if xr[k] != F::zero() {
                axpy(xr[k], dyr, &mut dw[k * out..(k + 1) * out]);
            }
            dxr[k] = dot(dyr, wr);
        }
    }
    dx
}

pub const LN_EPS: f64 = 1e-5;

pub struct NormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
    pub out: Vec<F>,
}

pub fn layer_norm<F: Real>(x: &[F], gamma: &[F], beta: &[F], rows: usize, d: usize) -> NormCache<F> {
    let eps = F::from_f64(LN_EPS).unwrap();
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mut xhat = vec![F::zero(); rows * d];
    let mut rstd = vec![F::zero(); rows];
    let mut out = vec![F::zero(); rows * d];
    for i in 0..rows {
        let xr = &x[i * d..(i + 1) * d];
        let mean = xr.iter().copied().fold(F::zero(), |a, b| a + b) * inv_d;
        let var = xr
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .fold(F::zero(), |a, b| a + b)
            * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[i] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gamma[j] + beta[j];
        }
    }
    NormCache { xhat, rstd, out }
}

pub fn layer_norm_backward<F: Real>(
    cache: &NormCache<F>,
    gamma: &[F],
    dy: &[F],
    dgamma: &mut [F],
    dbeta: &mut [F],
    rows: usize,
    d: usize,
) -> Vec<F> {
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mut dx = vec![F::zero(); rows * d];
    let mut dxhat = vec![F::zero(); d];
    for i in 0..rows {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            dgamma[j] = dgamma[j] + dyr[j] * xh[j];
            dbeta[j] = dbeta[j] + dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            mean_dxhat = mean_dxhat + dxhat[j];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xh[j];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let rs = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// tanh-approximated GELU, as in GPT-2.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C).unwrap();
    let k = F::from_f64(GELU_K).unwrap();
    let half = F::from_f64(0.5).unwrap();
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C).unwrap();
    let k = F::from_f64(GELU_K).unwrap();
    let half = F::from_f64(0.5).unwrap();
    let three = F::from_f64(3.0).unwrap();
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}

/// In-place softmax; returns `ln Σ exp(v)` for log-probability use.
pub fn softmax_in_place<F: Real>(v: &mut [F]) -> F {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = F::one() / sum;
    for x in v.iter_mut() {
        *x = *x * inv;
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn linear_small() {
        // [1 2] · [[1 0 1],[0 1 1]] + [0.5 0 0]
        let y = linear(&[1.0f64, 2.0], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0], &[0.5, 0.0, 0.0], 1, 2, 3);
        assert_eq!(y, vec![1.5, 2.0, 3.0]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_normalizes() {
        let mut v = vec![1.0f64, 2.0, 3.0, -1000.0];
        let lse = softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((lse - direct).abs() < 1e-12);
    }
}
