use crate::error::{Error, Result};
use crate::ops::{mean_pool, mean_pool_backward};
use crate::tensor::{Real, Tensor2D};

/// Pooled-feature alignment loss and its input gradients.
#[derive(Clone, Debug)]
pub struct MseAlign<T> {
    pub loss: T,
    pub d_speech: Tensor2D<T>,
    pub d_text: Tensor2D<T>,
}

/// `|| mean(z_s) - mean(z_t) ||^2` over frames.
pub fn mse_align<T: Real>(z_s: &Tensor2D<T>, z_t: &Tensor2D<T>) -> Result<MseAlign<T>> {
    if z_s.cols() != z_t.cols() {
        return Err(Error::Dimension {
            op: "mse_align",
            left: z_s.shape(),
            right: z_t.shape(),
        });
    }
    let mu_s = mean_pool(z_s)?;
    let mu_t = mean_pool(z_t)?;
    let diff: Vec<T> = mu_s
        .data()
        .iter()
        .zip(mu_t.data())
        .map(|(&a, &b)| a - b)
        .collect();
    let loss = diff.iter().map(|&d| d * d).sum();
    let two = T::one() + T::one();
    let d_mu = Tensor2D::row_vector(&diff.iter().map(|&d| two * d).collect::<Vec<_>>());
    let d_speech = mean_pool_backward(z_s.rows(), &d_mu)?;
    let d_text = mean_pool_backward(z_t.rows(), &d_mu.scale(-T::one()))?;
    Ok(MseAlign {
        loss,
        d_speech,
        d_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numerical_gradient, GradTolerance};
    use crate::layers::init_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_means_give_zero() {
        let a = Tensor2D::<f64>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor2D::<f64>::from_rows(&[[2.0, 3.0]]).unwrap();
        assert_eq!(mse_align(&a, &b).unwrap().loss, 0.0);
    }

    #[test]
    fn orthogonal_unit_means() {
        let a = Tensor2D::<f64>::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Tensor2D::<f64>::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(mse_align(&a, &b).unwrap().loss, 2.0);
    }

    #[test]
    fn width_mismatch() {
        let a = Tensor2D::<f64>::zeros(2, 3);
        let b = Tensor2D::<f64>::zeros(2, 2);
        assert!(matches!(mse_align(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matches_direct_recomputation_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let zs32: Tensor2D<f32> = init_normal(7, 5, 1.0, &mut rng);
        let zt32: Tensor2D<f32> = init_normal(3, 5, 1.0, &mut rng);
        let (zs, zt) = (zs32.cast::<f64>(), zt32.cast::<f64>());
        let mut oracle = 0.0;
        for c in 0..5 {
            let ms: f64 = (0..7).map(|r| zs.get(r, c)).sum::<f64>() / 7.0;
            let mt: f64 = (0..3).map(|r| zt.get(r, c)).sum::<f64>() / 3.0;
            oracle += (ms - mt) * (ms - mt);
        }
        let out = mse_align(&zs, &zt).unwrap();
        assert!((out.loss - oracle).abs() < 1e-12);
        let single = mse_align(&zs32, &zt32).unwrap();
        assert!((single.loss as f64 - oracle).abs() < 1e-5);

        let tol = GradTolerance::default();
        let fs = numerical_gradient(
            |v| mse_align(&Tensor2D::new(7, 5, v.to_vec()).unwrap(), &zt).unwrap().loss,
            zs.data(),
            tol.h,
        );
        tol.assert_close(out.d_speech.data(), &fs);
        let ft = numerical_gradient(
            |v| mse_align(&zs, &Tensor2D::new(3, 5, v.to_vec()).unwrap()).unwrap().loss,
            zt.data(),
            tol.h,
        );
        tol.assert_close(out.d_text.data(), &ft);
    }
}
