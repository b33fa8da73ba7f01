//! Feedforward building blocks with explicit forward and backward passes.
//!
//! Layers own their parameters and gradient buffers. Backward passes
//! accumulate into the gradient buffers so several loss terms can be
//! pushed through the same parameters before an optimizer step.
//!
//! Batch normalization follows the usual convention: training mode
//! normalizes with population (biased) batch variance and keeps an
//! exponential running estimate (unbiased variance, momentum `m` meaning
//! `running = (1 - m) * running + m * batch`); evaluation mode is a
//! deterministic per-feature affine map using the running estimates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, Scalar};

/// Mutable access to every `(parameter, gradient)` slice pair, in a fixed
/// deterministic order. Optimizers and the gradient checker both walk
/// parameters through this trait.
pub trait Parameterized<T: Scalar> {
    fn visit_params(&mut self, visit: &mut dyn FnMut(&mut [T], &mut [T]));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, grad| {
            for g in grad.iter_mut() {
                *g = T::zero();
            }
        });
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |params, _| n += params.len());
        n
    }
}

/// Fully connected layer computing `y = x W + b` with `W` of shape
/// `input_dim x output_dim`. The bias is optional: a layer feeding batch
/// normalization must not have one, since the normalization subtracts the
/// batch mean and the bias would be a dead parameter with an identically
/// zero gradient.
#[derive(Clone, Debug)]
pub struct AffineLayer<T = f32> {
    pub weight: DenseMatrix<T>,
    pub bias: Option<Vec<T>>,
    pub weight_grad: DenseMatrix<T>,
    pub bias_grad: Option<Vec<T>>,
}

impl<T: Scalar> AffineLayer<T> {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        AffineLayer {
            weight: DenseMatrix::zeros(input_dim, output_dim),
            bias: Some(vec![T::zero(); output_dim]),
            weight_grad: DenseMatrix::zeros(input_dim, output_dim),
            bias_grad: Some(vec![T::zero(); output_dim]),
        }
    }

    pub fn zeros_no_bias(input_dim: usize, output_dim: usize) -> Self {
        let mut layer = Self::zeros(input_dim, output_dim);
        layer.bias = None;
        layer.bias_grad = None;
        layer
    }

    /// Uniform fan-in initialization: `W ~ U(-1/sqrt(d_in), 1/sqrt(d_in))`,
    /// zero bias. Draws are made in `f64` so every scalar type sees the same
    /// random stream.
    pub fn init<R: Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(input_dim, output_dim);
        let bound = 1.0 / (input_dim as f64).sqrt();
        for w in layer.weight.data_mut() {
            *w = T::from_f64(rng.random_range(-bound..bound));
        }
        layer
    }

    /// Same initialization without a bias, for layers feeding batch
    /// normalization. Consumes the same number of random draws as [`init`],
    /// so swapping bias on or off does not shift the stream.
    ///
    /// [`init`]: AffineLayer::init
    pub fn init_no_bias<R: Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let mut layer = Self::init(input_dim, output_dim, rng);
        layer.bias = None;
        layer.bias_grad = None;
        layer
    }

    pub fn identity(dim: usize) -> Self {
        let mut layer = Self::zeros(dim, dim);
        for i in 0..dim {
            layer.weight.set(i, i, T::one());
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, input: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(
                "AffineLayer::forward",
                format!("{} input columns", self.input_dim()),
                format!("{}", input.cols()),
            ));
        }
        let mut out = input.matmul(&self.weight)?;
        if let Some(bias) = &self.bias {
            for r in 0..out.rows() {
                for (o, &b) in out.row_mut(r).iter_mut().zip(bias) {
                    *o += b;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates `dW = x^T g`, `db = sum_rows g` and returns `dx = g W^T`.
    pub fn backward(
        &mut self,
        input: &DenseMatrix<T>,
        out_grad: &DenseMatrix<T>,
    ) -> Result<DenseMatrix<T>> {
        if out_grad.shape() != (input.rows(), self.output_dim()) {
            return Err(Error::shape(
                "AffineLayer::backward",
                format!("{}x{}", input.rows(), self.output_dim()),
                format!("{}x{}", out_grad.rows(), out_grad.cols()),
            ));
        }
        let mut in_grad = DenseMatrix::zeros(input.rows(), self.input_dim());
        for b in 0..input.rows() {
            let x = input.row(b);
            let g = out_grad.row(b);
            if let Some(bias_grad) = &mut self.bias_grad {
                for (bg, &gv) in bias_grad.iter_mut().zip(g) {
                    *bg += gv;
                }
            }
            let ig = in_grad.row_mut(b);
            for (i, &xv) in x.iter().enumerate() {
                let w_row = self.weight.row(i);
                let wg_row = self.weight_grad.row_mut(i);
                let mut acc = T::zero();
                for ((&gv, &wv), wg) in g.iter().zip(w_row).zip(wg_row) {
                    acc += gv * wv;
                    *wg += xv * gv;
                }
                ig[i] = acc;
            }
        }
        Ok(in_grad)
    }
}

/// Per-feature batch normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct BatchNormLayer<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
    pub gamma_grad: Vec<T>,
    pub beta_grad: Vec<T>,
}

/// Values saved by the training-mode forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f32> {
    x_hat: DenseMatrix<T>,
    inv_std: Vec<T>,
}

pub const BATCH_NORM_EPSILON: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(dim: usize, epsilon: f64, momentum: f64) -> Self {
        BatchNormLayer {
            gamma: vec![T::one(); dim],
            beta: vec![T::zero(); dim],
            running_mean: vec![T::zero(); dim],
            running_var: vec![T::one(); dim],
            epsilon: T::from_f64(epsilon),
            momentum: T::from_f64(momentum),
            gamma_grad: vec![T::zero(); dim],
            beta_grad: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, input: &DenseMatrix<T>) -> Result<()> {
        if input.cols() != self.dim() {
            return Err(Error::shape(
                "BatchNormLayer",
                format!("{} features", self.dim()),
                format!("{}", input.cols()),
            ));
        }
        Ok(())
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(
        &mut self,
        input: &DenseMatrix<T>,
    ) -> Result<(DenseMatrix<T>, BatchNormCache<T>)> {
        self.check_input(input)?;
        let n = input.rows();
        if n < 2 {
            return Err(Error::InvalidBatch { rows: n });
        }
        let dim = self.dim();
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut mean = vec![T::zero(); dim];
        for r in 0..n {
            for (m, &x) in mean.iter_mut().zip(input.row(r)) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_n;
        }
        let mut var = vec![T::zero(); dim];
        for r in 0..n {
            for ((v, &x), &m) in var.iter_mut().zip(input.row(r)).zip(&mean) {
                let d = x - m;
                *v += d * d;
            }
        }
        for v in var.iter_mut() {
            *v *= inv_n;
        }

        // Running variance stores the unbiased estimate, n/(n-1) times the
        // population variance used for normalization.
        let unbias = T::from_f64(n as f64 / (n as f64 - 1.0));
        let one_minus = T::one() - self.momentum;
        for j in 0..dim {
            self.running_mean[j] = one_minus * self.running_mean[j] + self.momentum * mean[j];
            self.running_var[j] = one_minus * self.running_var[j] + self.momentum * var[j] * unbias;
        }

        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + self.epsilon).sqrt())
            .collect();
        let mut x_hat = DenseMatrix::zeros(n, dim);
        let mut out = DenseMatrix::zeros(n, dim);
        for r in 0..n {
            let xr = input.row(r);
            let hr = x_hat.row_mut(r);
            let or = out.row_mut(r);
            for j in 0..dim {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                or[j] = self.gamma[j] * h + self.beta[j];
            }
        }
        Ok((out, BatchNormCache { x_hat, inv_std }))
    }

    /// Deterministic per-feature affine map using the running estimates.
    pub fn forward_eval(&self, input: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.check_input(input)?;
        let dim = self.dim();
        let inv_std: Vec<T> = self
            .running_var
            .iter()
            .map(|&v| T::one() / (v + self.epsilon).sqrt())
            .collect();
        let mut out = DenseMatrix::zeros(input.rows(), dim);
        for r in 0..input.rows() {
            let xr = input.row(r);
            let or = out.row_mut(r);
            for j in 0..dim {
                or[j] = self.gamma[j] * (xr[j] - self.running_mean[j]) * inv_std[j] + self.beta[j];
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient:
    /// `dx = gamma * inv_std / n * (n * g - sum(g) - x_hat * sum(g * x_hat))`.
    pub fn backward(
        &mut self,
        cache: &BatchNormCache<T>,
        out_grad: &DenseMatrix<T>,
    ) -> Result<DenseMatrix<T>> {
        let (n, dim) = cache.x_hat.shape();
        if out_grad.shape() != (n, dim) {
            return Err(Error::shape(
                "BatchNormLayer::backward",
                format!("{n}x{dim}"),
                format!("{}x{}", out_grad.rows(), out_grad.cols()),
            ));
        }
        let mut sum_g = vec![T::zero(); dim];
        let mut sum_gh = vec![T::zero(); dim];
        for r in 0..n {
            let g = out_grad.row(r);
            let h = cache.x_hat.row(r);
            for j in 0..dim {
                sum_g[j] += g[j];
                sum_gh[j] += g[j] * h[j];
            }
        }
        for j in 0..dim {
            self.beta_grad[j] += sum_g[j];
            self.gamma_grad[j] += sum_gh[j];
        }
        let n_t = T::from_f64(n as f64);
        let mut in_grad = DenseMatrix::zeros(n, dim);
        for r in 0..n {
            let g = out_grad.row(r);
            let h = cache.x_hat.row(r);
            let ig = in_grad.row_mut(r);
            for j in 0..dim {
                let scale = self.gamma[j] * cache.inv_std[j] / n_t;
                ig[j] = scale * (n_t * g[j] - sum_g[j] - h[j] * sum_gh[j]);
            }
        }
        Ok(in_grad)
    }
}

pub fn relu<T: Scalar>(input: &DenseMatrix<T>) -> DenseMatrix<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `dx = g` where the input was positive, zero elsewhere (zero at zero).
pub fn relu_backward<T: Scalar>(
    input: &DenseMatrix<T>,
    out_grad: &DenseMatrix<T>,
) -> DenseMatrix<T> {
    let mut g = out_grad.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// Numerically stable softmax over one slice, in place.
pub fn softmax_in_place<T: Scalar>(values: &mut [T]) {
    let mut max = values[0];
    for &v in values.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in values.iter_mut() {
        *v *= inv;
    }
}

/// Softmax applied independently to every row.
pub fn softmax_rows<T: Scalar>(logits: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Backward through `s = softmax(z)` for one slice:
/// `dz_j = s_j * (ds_j - sum_k ds_k s_k)`. Accumulates into `in_grad`.
pub fn softmax_backward_in_place<T: Scalar>(softmax: &[T], out_grad: &[T], in_grad: &mut [T]) {
    let mut inner = T::zero();
    for (&s, &g) in softmax.iter().zip(out_grad) {
        inner += s * g;
    }
    for ((ig, &s), &g) in in_grad.iter_mut().zip(softmax).zip(out_grad) {
        *ig += s * (g - inner);
    }
}

/// One stage of a feedforward stack.
#[derive(Clone, Debug)]
pub enum Layer<T = f32> {
    Affine(AffineLayer<T>),
    BatchNorm(BatchNormLayer<T>),
    Relu,
}

/// Per-layer values saved by a training-mode forward pass.
pub enum LayerCache<T = f32> {
    Affine { input: DenseMatrix<T> },
    BatchNorm(BatchNormCache<T>),
    Relu { input: DenseMatrix<T> },
}

/// A sequence of layers applied in order.
#[derive(Clone, Debug)]
pub struct LayerStack<T = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> LayerStack<T> {
    /// Standard block structure: for every hidden width an affine layer
    /// followed by batch normalization and ReLU, then a final affine
    /// projection to `output_dim`.
    pub fn mlp<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        bn_epsilon: f64,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() * 3 + 1);
        let mut d = input_dim;
        for &h in hidden {
            layers.push(Layer::Affine(AffineLayer::init_no_bias(d, h, rng)));
            layers.push(Layer::BatchNorm(BatchNormLayer::new(
                h,
                bn_epsilon,
                bn_momentum,
            )));
            layers.push(Layer::Relu);
            d = h;
        }
        layers.push(Layer::Affine(AffineLayer::init(d, output_dim, rng)));
        LayerStack { layers }
    }

    pub fn forward_eval(&self, input: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Affine(l) => l.forward(&x)?,
                Layer::BatchNorm(l) => l.forward_eval(&x)?,
                Layer::Relu => relu(&x),
            };
        }
        Ok(x)
    }

    pub fn forward_train(
        &mut self,
        input: &DenseMatrix<T>,
    ) -> Result<(DenseMatrix<T>, Vec<LayerCache<T>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = match layer {
                Layer::Affine(l) => {
                    let out = l.forward(&x)?;
                    caches.push(LayerCache::Affine { input: x });
                    out
                }
                Layer::BatchNorm(l) => {
                    let (out, cache) = l.forward_train(&x)?;
                    caches.push(LayerCache::BatchNorm(cache));
                    out
                }
                Layer::Relu => {
                    let out = relu(&x);
                    caches.push(LayerCache::Relu { input: x });
                    out
                }
            };
        }
        Ok((x, caches))
    }

    /// Backward through the whole stack, consuming the caches of the
    /// matching `forward_train` call. Returns the gradient at the input.
    pub fn backward(
        &mut self,
        caches: &[LayerCache<T>],
        out_grad: &DenseMatrix<T>,
    ) -> Result<DenseMatrix<T>> {
        debug_assert_eq!(caches.len(), self.layers.len());
        let mut g = out_grad.clone();
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            g = match (layer, cache) {
                (Layer::Affine(l), LayerCache::Affine { input }) => l.backward(input, &g)?,
                (Layer::BatchNorm(l), LayerCache::BatchNorm(cache)) => l.backward(cache, &g)?,
                (Layer::Relu, LayerCache::Relu { input }) => relu_backward(input, &g),
                _ => {
                    return Err(Error::shape(
                        "LayerStack::backward",
                        "cache kind matching layer kind".to_string(),
                        "mismatched cache".to_string(),
                    ))
                }
            };
        }
        Ok(g)
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Affine(a) => Some(a.output_dim()),
            _ => None,
        })
    }
}

impl<T: Scalar> Parameterized<T> for AffineLayer<T> {
    fn visit_params(&mut self, visit: &mut dyn FnMut(&mut [T], &mut [T])) {
        visit(self.weight.data_mut(), self.weight_grad.data_mut());
        if let (Some(bias), Some(bias_grad)) = (&mut self.bias, &mut self.bias_grad) {
            visit(bias, bias_grad);
        }
    }
}

impl<T: Scalar> Parameterized<T> for BatchNormLayer<T> {
    fn visit_params(&mut self, visit: &mut dyn FnMut(&mut [T], &mut [T])) {
        visit(&mut self.gamma, &mut self.gamma_grad);
        visit(&mut self.beta, &mut self.beta_grad);
    }
}

impl<T: Scalar> Parameterized<T> for LayerStack<T> {
    fn visit_params(&mut self, visit: &mut dyn FnMut(&mut [T], &mut [T])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Affine(l) => l.visit_params(visit),
                Layer::BatchNorm(l) => l.visit_params(visit),
                Layer::Relu => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn affine_forward_matches_hand_computation() {
        let mut layer = AffineLayer::<f64>::zeros(2, 2);
        layer.weight = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        layer.bias = Some(vec![0.5, -0.5]);
        let x = DenseMatrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_abs_diff_eq!(y.get(0, 0), 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(y.get(0, 1), 5.5, epsilon = 1e-12);
    }

    #[test]
    fn batchnorm_train_normalizes_each_feature() {
        // Feature [1, 3]: mean 2, population variance 1, so with a tiny
        // epsilon the outputs are -1 and 1 up to the epsilon correction.
        let mut bn = BatchNormLayer::<f64>::new(1, 1e-5, 0.1);
        let x = DenseMatrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        assert_abs_diff_eq!(y.get(0, 0), -0.999995, epsilon = 1e-6);
        assert_abs_diff_eq!(y.get(1, 0), 0.999995, epsilon = 1e-6);
        // Unbiased variance of [1, 3] is 2; one update from (0, 1) priors.
        assert_abs_diff_eq!(bn.running_mean[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(bn.running_var[0], 0.9 + 0.1 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn batchnorm_train_rejects_single_row() {
        let mut bn = BatchNormLayer::<f32>::new(3, 1e-5, 0.1);
        let x = DenseMatrix::zeros(1, 3);
        assert!(matches!(
            bn.forward_train(&x),
            Err(Error::InvalidBatch { rows: 1 })
        ));
    }

    #[test]
    fn batchnorm_eval_is_deterministic_affine() {
        let mut bn = BatchNormLayer::<f64>::new(2, 1e-5, 0.1);
        bn.running_mean = vec![1.0, -1.0];
        bn.running_var = vec![4.0, 0.25];
        bn.gamma = vec![2.0, 1.0];
        bn.beta = vec![0.0, 3.0];
        let x = DenseMatrix::from_vec(1, 2, vec![3.0, 0.0]).unwrap();
        let y1 = bn.forward_eval(&x).unwrap();
        let y2 = bn.forward_eval(&x).unwrap();
        assert_eq!(y1.data(), y2.data());
        assert_abs_diff_eq!(
            y1.get(0, 0),
            2.0 * 2.0 / (4.0f64 + 1e-5).sqrt(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            y1.get(0, 1),
            1.0 / (0.25f64 + 1e-5).sqrt() + 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn relu_clamps_negatives_and_backward_masks() {
        let x = DenseMatrix::from_vec(1, 3, vec![-1.0f64, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = DenseMatrix::from_vec(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let gx = relu_backward(&x, &g);
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_rows_are_normalized_and_ordered() {
        let logits = DenseMatrix::from_vec(1, 3, vec![1.0f64, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&logits);
        let sum: f64 = s.data().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        assert!(s.get(0, 0) < s.get(0, 1) && s.get(0, 1) < s.get(0, 2));
        // Exact values for [1, 2, 3].
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        assert_abs_diff_eq!(s.get(0, 2), (3.0f64).exp() / z, epsilon = 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = DenseMatrix::from_vec(1, 4, vec![0.1f64, -2.0, 5.0, 0.0]).unwrap();
        let b = a.map(|v| v + 123.456);
        let sa = softmax_rows(&a);
        let sb = softmax_rows(&b);
        for (x, y) in sa.data().iter().zip(sb.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn stack_shapes_follow_block_structure() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let stack = LayerStack::<f32>::mlp(8, &[16, 16], 4, 1e-5, 0.1, &mut rng);
        // Two hidden blocks of (affine, bn, relu) plus the output affine.
        assert_eq!(stack.layers.len(), 7);
        assert_eq!(stack.output_dim(), Some(4));
        let x = DenseMatrix::zeros(3, 8);
        let y = stack.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), (3, 4));
    }
}
