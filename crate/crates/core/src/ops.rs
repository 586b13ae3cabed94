//! Numerical kernels, each paired with an explicit reverse function.

use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor2D};

pub fn matmul<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.cols() != b.rows() {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.rows(), b.cols());
    let mut out = vec![T::zero(); n * m];
    let bd = b.data();
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bpj;
            }
        }
    }
    Tensor2D::new(n, m, out)
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.cols(), b.cols());
    let mut out = vec![T::zero(); n * m];
    for r in 0..a.rows() {
        let brow = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == T::zero() {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &brj) in orow.iter_mut().zip(brow) {
                *o = *o + ari * brj;
            }
        }
    }
    Tensor2D::new(n, m, out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_nt<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            out.push(dot(arow, b.row(j)));
        }
    }
    Tensor2D::new(n, m, out)
}

/// Reverse of [`matmul`]: returns `(dA, dB) = (dC * B^T, A^T * dC)`.
pub fn matmul_backward<T: Real>(
    a: &Tensor2D<T>,
    b: &Tensor2D<T>,
    d_out: &Tensor2D<T>,
) -> Result<(Tensor2D<T>, Tensor2D<T>)> {
    if d_out.shape() != (a.rows(), b.cols()) {
        return Err(Error::Dimension {
            op: "matmul_backward",
            left: (a.rows(), b.cols()),
            right: d_out.shape(),
        });
    }
    Ok((matmul_nt(d_out, b)?, matmul_tn(a, d_out)?))
}

/// Adds a `1 x cols` bias to every row.
pub fn add_row<T: Real>(x: &Tensor2D<T>, bias: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if bias.rows() != 1 || bias.cols() != x.cols() {
        return Err(Error::Dimension {
            op: "add_row",
            left: x.shape(),
            right: bias.shape(),
        });
    }
    let mut out = x.clone();
    let b = bias.data();
    for r in 0..out.rows() {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
            *o = *o + bv;
        }
    }
    Ok(out)
}

/// Column sums as a `1 x cols` tensor (the reverse of [`add_row`] for the bias).
pub fn sum_rows<T: Real>(x: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = vec![T::zero(); x.cols()];
    for row in x.iter_rows() {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor2D::row_vector(&out)
}

const GELU_CUBIC: f64 = 0.044715;

#[inline]
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c: T = lit(std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
    let half: T = lit(0.5);
    let inner = c * (x + lit::<T>(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c: T = lit(std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
    let half: T = lit(0.5);
    let inner = c * (x + lit::<T>(GELU_CUBIC) * x * x * x);
    let t = inner.tanh();
    let d_inner = c * (T::one() + lit::<T>(3.0 * GELU_CUBIC) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner
}

/// Elementwise GELU, tanh approximation.
pub fn gelu<T: Real>(x: &Tensor2D<T>) -> Tensor2D<T> {
    x.map(gelu_scalar)
}

/// `dx = dy * gelu'(x)`, where `x` is the forward input.
pub fn gelu_backward<T: Real>(x: &Tensor2D<T>, d_out: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if x.shape() != d_out.shape() {
        return Err(Error::Dimension {
            op: "gelu_backward",
            left: x.shape(),
            right: d_out.shape(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&xi, &di)| di * gelu_grad_scalar(xi))
        .collect();
    Tensor2D::new(x.rows(), x.cols(), data)
}

/// Number of output frames of a valid (unpadded) convolution.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Parameter(format!(
            "conv1d kernel={kernel} stride={stride} must both be >= 1"
        )));
    }
    if len < kernel {
        return Err(Error::SequenceTooShort { len, kernel });
    }
    Ok((len - kernel) / stride + 1)
}

/// Stacks every window of `k` consecutive frames into one row (`T' x k*d`).
fn im2col<T: Real>(seq: &Tensor2D<T>, k: usize, s: usize) -> Result<Tensor2D<T>> {
    let out_len = conv_output_len(seq.rows(), k, s)?;
    let width = k * seq.cols();
    let mut data = Vec::with_capacity(out_len * width);
    for t in 0..out_len {
        let start = t * s * seq.cols();
        data.extend_from_slice(&seq.data()[start..start + width]);
    }
    Tensor2D::new(out_len, width, data)
}

/// Temporal convolution: output frame `t` is
/// `concat(seq[t*s .. t*s+k]) * kernel + bias`, kernel shaped `(k*d_in) x d_out`.
pub fn conv1d<T: Real>(
    seq: &Tensor2D<T>,
    kernel: &Tensor2D<T>,
    bias: &Tensor2D<T>,
    k: usize,
    s: usize,
) -> Result<Tensor2D<T>> {
    if kernel.rows() != k * seq.cols() {
        return Err(Error::Dimension {
            op: "conv1d",
            left: seq.shape(),
            right: kernel.shape(),
        });
    }
    let cols = im2col(seq, k, s)?;
    add_row(&matmul(&cols, kernel)?, bias)
}

pub struct Conv1dGrads<T> {
    pub d_seq: Tensor2D<T>,
    pub d_kernel: Tensor2D<T>,
    pub d_bias: Tensor2D<T>,
}

pub fn conv1d_backward<T: Real>(
    seq: &Tensor2D<T>,
    kernel: &Tensor2D<T>,
    k: usize,
    s: usize,
    d_out: &Tensor2D<T>,
) -> Result<Conv1dGrads<T>> {
    let cols = im2col(seq, k, s)?;
    if d_out.shape() != (cols.rows(), kernel.cols()) {
        return Err(Error::Dimension {
            op: "conv1d_backward",
            left: (cols.rows(), kernel.cols()),
            right: d_out.shape(),
        });
    }
    let (d_cols, d_kernel) = matmul_backward(&cols, kernel, d_out)?;
    let mut d_seq = Tensor2D::zeros(seq.rows(), seq.cols());
    let d = seq.cols();
    for t in 0..d_cols.rows() {
        let start = t * s * d;
        let dst = &mut d_seq.data_mut()[start..start + k * d];
        for (o, &g) in dst.iter_mut().zip(d_cols.row(t)) {
            *o = *o + g;
        }
    }
    Ok(Conv1dGrads {
        d_seq,
        d_kernel,
        d_bias: sum_rows(d_out),
    })
}

/// Columnwise mean over frames, `N x d -> 1 x d`.
pub fn mean_pool<T: Real>(seq: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if seq.rows() == 0 {
        return Err(Error::EmptySequence("mean_pool"));
    }
    let inv = T::one() / lit::<T>(seq.rows() as f64);
    Ok(sum_rows(seq).scale(inv))
}

/// Spreads `d_out` (`1 x d`) uniformly over `n` frames.
pub fn mean_pool_backward<T: Real>(n: usize, d_out: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if n == 0 {
        return Err(Error::EmptySequence("mean_pool_backward"));
    }
    let inv = T::one() / lit::<T>(n as f64);
    let row: Vec<T> = d_out.data().iter().map(|&g| g * inv).collect();
    Ok(Tensor2D::from_fn(n, d_out.cols(), |_, c| row[c]))
}

#[inline]
pub fn dot<T: Real>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

pub fn l2_norm<T: Real>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

pub fn cosine_sim<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            op: "cosine_sim",
            left: (1, u.len()),
            right: (1, v.len()),
        });
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if !(nu > T::zero() && nv > T::zero()) {
        return Err(Error::DegenerateVector("cosine_sim"));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Gradient of `d * cos(u, v)` with respect to `u` and `v`.
pub fn cosine_sim_backward<T: Real>(u: &[T], v: &[T], d: T) -> Result<(Vec<T>, Vec<T>)> {
    let s = cosine_sim(u, v)?;
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    let inv_uv = T::one() / (nu * nv);
    let (inv_uu, inv_vv) = (T::one() / (nu * nu), T::one() / (nv * nv));
    let du = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| d * (vi * inv_uv - s * ui * inv_uu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| d * (ui * inv_uv - s * vi * inv_vv))
        .collect();
    Ok((du, dv))
}

/// Max-shifted `log(sum(exp(values)))`.
pub fn log_sum_exp<T: Real>(values: &[T]) -> Result<T> {
    let max = values
        .iter()
        .copied()
        .reduce(T::max)
        .ok_or(Error::EmptyInput("log_sum_exp"))?;
    if max == T::neg_infinity() {
        return Ok(max);
    }
    if values.len() == 1 {
        return Ok(values[0]);
    }
    let sum: T = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Softmax weights; the gradient of [`log_sum_exp`].
pub fn softmax<T: Real>(values: &[T]) -> Result<Vec<T>> {
    let lse = log_sum_exp(values)?;
    Ok(values.iter().map(|&v| (v - lse).exp()).collect())
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<T: Real>(x: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let lse = log_sum_exp(x.row(r))?;
        out.row_mut(r).iter_mut().for_each(|v| *v = *v - lse);
    }
    Ok(out)
}

/// Reverse of [`log_softmax_rows`] given its output.
pub fn log_softmax_rows_backward<T: Real>(
    out: &Tensor2D<T>,
    d_out: &Tensor2D<T>,
) -> Result<Tensor2D<T>> {
    if out.shape() != d_out.shape() {
        return Err(Error::Dimension {
            op: "log_softmax_backward",
            left: out.shape(),
            right: d_out.shape(),
        });
    }
    let mut dx = d_out.clone();
    for r in 0..out.rows() {
        let total: T = d_out.row(r).iter().copied().sum();
        for (g, &o) in dx.row_mut(r).iter_mut().zip(out.row(r)) {
            *g = *g - o.exp() * total;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numerical_gradient, GradTolerance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2D<f64> {
        Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor2D<f64>, b: &Tensor2D<f64>) -> Tensor2D<f64> {
        Tensor2D::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|p| a.get(i, p) * b.get(p, j)).sum()
        })
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let m = Tensor2D::<f32>::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
            .unwrap();
        assert_eq!(matmul(&Tensor2D::identity(3), &m).unwrap(), m);
        let a = Tensor2D::<f32>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor2D::<f32>::from_rows(&[[0.0], [1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor2D::<f32>::zeros(2, 3);
        let b = Tensor2D::<f32>::zeros(2, 2);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)") && err.contains("(2, 2)"), "{err}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(4, 5, &mut rng);
        let b = random(5, 3, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let (da, db) = matmul_backward(&a, &b, &Tensor2D::from_fn(4, 3, |_, _| 1.0)).unwrap();
        assert_eq!(da.shape(), (4, 5));
        assert_eq!(db.shape(), (5, 3));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // 0.5*3*(1+tanh(sqrt(2/pi)*(3+0.044715*27))) evaluated in high precision
        assert!((gelu_scalar(3.0f64) - 2.996_362_4).abs() < 1e-6);
        let x = 0.5f64;
        let fd = numerical_gradient(|v| gelu_scalar(v[0]), &[x], 1e-5)[0];
        let an = gelu_grad_scalar(x);
        assert!(((an - fd) / an).abs() < 1e-5, "{an} vs {fd}");
    }

    #[test]
    fn conv_length_formula() {
        assert_eq!(conv_output_len(10, 5, 4).unwrap(), 2);
        assert_eq!(conv_output_len(21, 5, 4).unwrap(), 5);
        assert!(matches!(
            conv_output_len(4, 5, 4),
            Err(Error::SequenceTooShort { len: 4, kernel: 5 })
        ));
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(7, 4, &mut rng);
        let y = conv1d(&x, &Tensor2D::identity(4), &Tensor2D::zeros(1, 4), 1, 1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn conv_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(6, 2, &mut rng);
        let kernel = random(6, 3, &mut rng);
        let bias = random(1, 3, &mut rng);
        let y = conv1d(&x, &kernel, &bias, 3, 2).unwrap();
        assert_eq!(y.shape(), (2, 3));
        for t in 0..2 {
            for o in 0..3 {
                let mut acc = bias.get(0, o);
                for j in 0..3 {
                    for c in 0..2 {
                        acc += x.get(t * 2 + j, c) * kernel.get(j * 2 + c, o);
                    }
                }
                assert!((y.get(t, o) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(9, 3, &mut rng);
        let kernel = random(9, 2, &mut rng);
        let bias = random(1, 2, &mut rng);
        let weights = random(3, 2, &mut rng);
        // loss = sum(w .* conv(x))
        let loss = |x: &Tensor2D<f64>, k: &Tensor2D<f64>, b: &Tensor2D<f64>| {
            let y = conv1d(x, k, b, 3, 3).unwrap();
            y.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum::<f64>()
        };
        let g = conv1d_backward(&x, &kernel, 3, 3, &weights).unwrap();
        let tol = GradTolerance::default();
        let fx = numerical_gradient(
            |v| loss(&Tensor2D::new(9, 3, v.to_vec()).unwrap(), &kernel, &bias),
            x.data(),
            tol.h,
        );
        tol.assert_close(g.d_seq.data(), &fx);
        let fk = numerical_gradient(
            |v| loss(&x, &Tensor2D::new(9, 2, v.to_vec()).unwrap(), &bias),
            kernel.data(),
            tol.h,
        );
        tol.assert_close(g.d_kernel.data(), &fk);
        let fb = numerical_gradient(
            |v| loss(&x, &kernel, &Tensor2D::new(1, 2, v.to_vec()).unwrap()),
            bias.data(),
            tol.h,
        );
        tol.assert_close(g.d_bias.data(), &fb);
    }

    #[test]
    fn mean_pool_cases() {
        let x = Tensor2D::<f32>::from_rows(&[[1.0, 3.0], [3.0, 5.0]]).unwrap();
        assert_eq!(mean_pool(&x).unwrap().data(), &[2.0, 4.0]);
        let one = Tensor2D::<f32>::from_rows(&[[0.25, -7.0]]).unwrap();
        assert_eq!(mean_pool(&one).unwrap(), one);
        assert!(matches!(
            mean_pool(&Tensor2D::<f32>::zeros(0, 3)),
            Err(Error::EmptySequence(_))
        ));
    }

    #[test]
    fn mean_pool_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(5, 3, &mut rng);
        let w = random(1, 3, &mut rng);
        let f = |v: &[f64]| {
            let p = mean_pool(&Tensor2D::new(5, 3, v.to_vec()).unwrap()).unwrap();
            dot(p.data(), w.data())
        };
        let fd = numerical_gradient(f, x.data(), 1e-3);
        let an = mean_pool_backward(5, &w).unwrap();
        for (a, n) in an.data().iter().zip(&fd) {
            assert!((a - n).abs() < 1e-5);
        }
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[3.0f64, -1.0], &[3.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap() - 0.707_106_78).abs() < 1e-8);
        assert!(matches!(
            cosine_sim(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (du, dv) = cosine_sim_backward(&u, &v, 1.0).unwrap();
        let tol = GradTolerance::default();
        tol.assert_close(&du, &numerical_gradient(|x| cosine_sim(x, &v).unwrap(), &u, tol.h));
        tol.assert_close(&dv, &numerical_gradient(|x| cosine_sim(&u, x).unwrap(), &v, tol.h));
    }

    #[test]
    fn log_sum_exp_cases() {
        assert_eq!(log_sum_exp(&[1.5f64]).unwrap(), 1.5);
        assert!((log_sum_exp(&[0.0f64, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0f64, 1000.0]).unwrap();
        assert!((big - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!(matches!(
            log_sum_exp::<f64>(&[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn log_softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(3, 4, &mut rng);
        let w = random(3, 4, &mut rng);
        let f = |v: &[f64]| {
            let y = log_softmax_rows(&Tensor2D::new(3, 4, v.to_vec()).unwrap()).unwrap();
            dot(y.data(), w.data())
        };
        let out = log_softmax_rows(&x).unwrap();
        let an = log_softmax_rows_backward(&out, &w).unwrap();
        let tol = GradTolerance::default();
        tol.assert_close(an.data(), &numerical_gradient(f, x.data(), tol.h));
    }

    proptest::proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            u in proptest::collection::vec(-10.0f64..10.0, 4),
            v in proptest::collection::vec(-10.0f64..10.0, 4),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            proptest::prop_assume!(l2_norm(&u) > 1e-3 && l2_norm(&v) > 1e-3);
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
            let base = cosine_sim(&u, &v).unwrap();
            proptest::prop_assert!((cosine_sim(&su, &sv).unwrap() - base).abs() < 1e-6);
            proptest::prop_assert!(base.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn mean_pool_backward_conserves_mass(
            n in 1usize..20,
            g in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let d_out = Tensor2D::row_vector(&g);
            let d_in = mean_pool_backward(n, &d_out).unwrap();
            proptest::prop_assert!((d_in.sum() - d_out.sum()).abs() < 1e-9);
        }
    }
}
