//! Finite-difference validation of analytic gradients.
//!
//! The checker walks every parameter through [`Parameterized`], nudges it by
//! `+/-epsilon`, and compares the central difference of the loss against the
//! gradient buffers filled by one analytic backward pass. Checks should run
//! at `f64`: central differences at `f32` lose too many digits to resolve a
//! `1e-4` tolerance.

use crate::error::Result;
use crate::matrix::DenseMatrix;
use crate::nn::{LayerStack, Parameterized};

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// Zero when both sides vanish, so constant functions check out at 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn perturb<M: Parameterized<f64>>(model: &mut M, tensor: usize, elem: usize, delta: f64) {
    let mut t = 0;
    model.visit_params(&mut |params, _| {
        if t == tensor {
            params[elem] += delta;
        }
        t += 1;
    });
}

/// Maximum relative error over all parameters of `model`.
///
/// `loss(model, with_grad)` must return the scalar loss; when `with_grad` is
/// true it must also accumulate gradients into the model's (zeroed) gradient
/// buffers. The closure must be a pure function of the parameters: any
/// randomness has to be drawn up front and captured.
pub fn gradient_check<M, F>(model: &mut M, mut loss: F, epsilon: f64) -> Result<f64>
where
    M: Parameterized<f64>,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    model.zero_grads();
    loss(model, true)?;
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    model.visit_params(&mut |_, grads| analytic.push(grads.to_vec()));

    let mut max_err = 0.0f64;
    for (tensor, grads) in analytic.iter().enumerate() {
        for (elem, &a) in grads.iter().enumerate() {
            perturb(model, tensor, elem, epsilon);
            let plus = loss(model, false)?;
            perturb(model, tensor, elem, -2.0 * epsilon);
            let minus = loss(model, false)?;
            perturb(model, tensor, elem, epsilon);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(a, numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Convenience check for a bare layer stack under the loss `0.5 * |y|^2`
/// evaluated in training mode on a fixed input batch.
pub fn check_stack_gradients(
    stack: &mut LayerStack<f64>,
    input: &DenseMatrix<f64>,
    epsilon: f64,
) -> Result<f64> {
    gradient_check(
        stack,
        |stack, with_grad| {
            // Run on a clone so forward_train cannot drift the running batch
            // statistics of the stack under test between loss evaluations.
            let mut work = stack.clone();
            let (out, caches) = work.forward_train(input)?;
            let mut loss = 0.0;
            for &v in out.data() {
                loss += 0.5 * v * v;
            }
            if with_grad {
                work.backward(&caches, &out)?;
                let mut collected: Vec<Vec<f64>> = Vec::new();
                work.visit_params(&mut |_, g| collected.push(g.to_vec()));
                let mut i = 0;
                stack.visit_params(&mut |_, g| {
                    g.copy_from_slice(&collected[i]);
                    i += 1;
                });
            }
            Ok(loss)
        },
        epsilon,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::DenseMatrix;
    use crate::nn::{AffineLayer, BatchNormLayer, Layer, LayerStack};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relative_error_of_constant_function_is_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn relative_error_is_scale_free() {
        let small = relative_error(1e-3, 1.001e-3);
        let large = relative_error(1e3, 1.001e3);
        assert!((small - large).abs() < 1e-9);
    }

    #[test]
    fn detects_a_deliberately_broken_gradient() {
        // Loss f(w) = w^2 with an analytic "gradient" of 3w instead of 2w.
        struct OneParam {
            w: Vec<f64>,
            g: Vec<f64>,
        }
        impl Parameterized<f64> for OneParam {
            fn visit_params(&mut self, visit: &mut dyn FnMut(&mut [f64], &mut [f64])) {
                visit(&mut self.w, &mut self.g);
            }
        }
        let mut m = OneParam {
            w: vec![0.7],
            g: vec![0.0],
        };
        let err = gradient_check(
            &mut m,
            |m, with_grad| {
                let w = m.w[0];
                if with_grad {
                    m.g[0] += 3.0 * w;
                }
                Ok(w * w)
            },
            1e-5,
        )
        .unwrap();
        assert!(err > 0.3, "error {err} should expose the broken gradient");
    }

    #[test]
    fn affine_stack_gradients_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut stack = LayerStack::<f64> {
            layers: vec![
                Layer::Affine(AffineLayer::init(3, 5, &mut rng)),
                Layer::Relu,
                Layer::Affine(AffineLayer::init(5, 2, &mut rng)),
            ],
        };
        let x =
            DenseMatrix::from_vec(4, 3, (0..12).map(|i| (i as f64) * 0.3 - 1.7).collect()).unwrap();
        let err = check_stack_gradients(&mut stack, &x, 1e-5).unwrap();
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn batchnorm_stack_gradients_pass() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bn = BatchNormLayer::new(6, 1e-5, 0.1);
        // Move scale and shift off their symmetric initialization so no
        // parameter sits at an accidental zero of the gradient.
        for (g, b) in bn.gamma.iter_mut().zip(bn.beta.iter_mut()) {
            *g = rng.random_range(0.5..1.5);
            *b = rng.random_range(-0.5..0.5);
        }
        let mut stack = LayerStack::<f64> {
            layers: vec![
                Layer::Affine(AffineLayer::init_no_bias(4, 6, &mut rng)),
                Layer::BatchNorm(bn),
                Layer::Relu,
                Layer::Affine(AffineLayer::init(6, 3, &mut rng)),
            ],
        };
        let x = DenseMatrix::from_vec(
            5,
            4,
            (0..20)
                .map(|i| ((i * 37) % 11) as f64 * 0.21 - 1.0)
                .collect(),
        )
        .unwrap();
        let err = check_stack_gradients(&mut stack, &x, 1e-5).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }
}
