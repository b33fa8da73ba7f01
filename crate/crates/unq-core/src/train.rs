//! End-to-end training of the quantizer.
//!
//! The objective combines three terms:
//!
//! * reconstruction: mean squared distance between inputs and their decoded
//!   stochastic encodings,
//! * a triplet hinge on compressed-domain scores, pulling true neighbors
//!   ahead of mid-ranked non-neighbors,
//! * a load-balancing penalty: the squared coefficient of variation of each
//!   codebook's average assignment probabilities, averaged over codebooks.
//!
//! Discrete assignments are relaxed with Gumbel noise and a straight-through
//! estimator: the forward pass aggregates exact one-hot selections while the
//! backward pass differentiates through the relaxed softmax. All gradients
//! are written by hand; the gradient checker validates them at `f64`.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{dot, squared_distance, DenseMatrix, Scalar};
use crate::model::{sample_gumbel, UnqModel};
use crate::nn::{softmax_backward_in_place, Parameterized};
use crate::search::{exact_knn_leave_one_out, CodeTable, GroundTruth};

/// Ablation switches. At most one of `no_triplet` and `triplet_only` may be
/// set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AblationFlags {
    /// Drop the triplet term (weight 0).
    pub no_triplet: bool,
    /// Train on the triplet term alone with weight 1; the reconstruction
    /// term is dropped.
    pub triplet_only: bool,
    /// Drop the load-balancing penalty.
    pub no_regularizer: bool,
    /// Aggregate the relaxed softmax instead of hard one-hots. Makes the
    /// whole objective differentiable, which is what the gradient checker
    /// needs.
    pub soft_gumbel: bool,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Weight of the triplet term.
    pub alpha: f64,
    /// Load-balancing weight at the first epoch.
    pub beta_start: f64,
    /// Load-balancing weight at the last epoch.
    pub beta_end: f64,
    /// Triplet margin.
    pub delta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub optimizer: QhAdamConfig,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.01,
            beta_start: 1.0,
            beta_end: 0.05,
            delta: 0.1,
            batch_size: 1024,
            epochs: 30,
            peak_lr: 1e-3,
            optimizer: QhAdamConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.delta < 0.0 {
            return Err(Error::InvalidConfig(
                "alpha and delta must be non-negative".into(),
            ));
        }
        if self.beta_start < 0.0 || self.beta_end < 0.0 {
            return Err(Error::InvalidConfig("beta must stay non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch size must be at least 2 for batch statistics".into(),
            ));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::InvalidConfig(
                "peak learning rate must be positive".into(),
            ));
        }
        if self.ablation.no_triplet && self.ablation.triplet_only {
            return Err(Error::InvalidConfig(
                "no_triplet and triplet_only are mutually exclusive".into(),
            ));
        }
        Ok(())
    }

    /// Effective triplet weight after ablation switches.
    pub fn effective_alpha(&self) -> f64 {
        if self.ablation.no_triplet {
            0.0
        } else if self.ablation.triplet_only {
            1.0
        } else {
            self.alpha
        }
    }

    /// Linear anneal of the balancing weight over epochs.
    pub fn beta_at(&self, progress: f64) -> f64 {
        if self.ablation.no_regularizer {
            0.0
        } else {
            self.beta_start + (self.beta_end - self.beta_start) * progress.clamp(0.0, 1.0)
        }
    }
}

/// QHAdam hyperparameters. `nu1 = nu2 = 1` reduces to Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QhAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub eps: f64,
}

impl Default for QhAdamConfig {
    fn default() -> Self {
        QhAdamConfig {
            beta1: 0.95,
            beta2: 0.998,
            nu1: 0.7,
            nu2: 1.0,
            eps: 1e-8,
        }
    }
}

/// One QHAdam update on a single parameter tensor. `step` is 1-based.
///
/// `m` and `v` are the usual exponential moving averages of the gradient and
/// its square, with bias correction; the update direction mixes the raw
/// gradient into both before the usual ratio:
///
/// ```text
/// theta -= lr * ((1 - nu1) * g + nu1 * m_hat)
///             / (sqrt((1 - nu2) * g^2 + nu2 * v_hat) + eps)
/// ```
pub fn qhadam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    exp_avg: &mut [T],
    exp_avg_sq: &mut [T],
    step: u64,
    lr: f64,
    config: &QhAdamConfig,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), exp_avg.len());
    debug_assert_eq!(params.len(), exp_avg_sq.len());
    let beta1 = T::from_f64(config.beta1);
    let beta2 = T::from_f64(config.beta2);
    let nu1 = T::from_f64(config.nu1);
    let nu2 = T::from_f64(config.nu2);
    let eps = T::from_f64(config.eps);
    let lr = T::from_f64(lr);
    let bc1 = T::from_f64(1.0 - config.beta1.powi(step as i32));
    let bc2 = T::from_f64(1.0 - config.beta2.powi(step as i32));
    let one = T::one();
    for i in 0..params.len() {
        let g = grads[i];
        exp_avg[i] = beta1 * exp_avg[i] + (one - beta1) * g;
        exp_avg_sq[i] = beta2 * exp_avg_sq[i] + (one - beta2) * g * g;
        let m_hat = exp_avg[i] / bc1;
        let v_hat = exp_avg_sq[i] / bc2;
        let numer = (one - nu1) * g + nu1 * m_hat;
        let denom = ((one - nu2) * g * g + nu2 * v_hat).sqrt() + eps;
        params[i] -= lr * numer / denom;
    }
}

/// Moment buffers for every parameter tensor of a model, allocated lazily on
/// the first step.
#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub config: QhAdamConfig,
    step: u64,
    exp_avg: Vec<Vec<T>>,
    exp_avg_sq: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: QhAdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            exp_avg: Vec::new(),
            exp_avg_sq: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter tensor using its accumulated
    /// gradients.
    pub fn step<M: Parameterized<T>>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        if self.exp_avg.is_empty() {
            model.visit_params(&mut |params, _| {
                self.exp_avg.push(vec![T::zero(); params.len()]);
                self.exp_avg_sq.push(vec![T::zero(); params.len()]);
            });
        }
        let step = self.step;
        let config = self.config;
        let exp_avg = &mut self.exp_avg;
        let exp_avg_sq = &mut self.exp_avg_sq;
        let mut tensor = 0;
        model.visit_params(&mut |params, grads| {
            qhadam_step(
                params,
                grads,
                &mut exp_avg[tensor],
                &mut exp_avg_sq[tensor],
                step,
                lr,
                &config,
            );
            tensor += 1;
        });
    }
}

/// One-cycle schedule: linear ramp from `peak_lr / 25` up to `peak_lr` over
/// the first 30% of steps, then linear decay to `peak_lr / 250`.
pub fn one_cycle_lr(step: usize, total_steps: usize, peak_lr: f64) -> f64 {
    let min_lr = peak_lr / 25.0;
    if total_steps == 0 {
        return min_lr;
    }
    let total = total_steps as f64;
    let warm = 0.3 * total;
    let s = (step as f64).min(total);
    if s < warm {
        min_lr + (peak_lr - min_lr) * (s / warm)
    } else {
        let t = (s - warm) / (total - warm);
        peak_lr + (min_lr / 10.0 - peak_lr) * t
    }
}

/// Mean squared distance between rows of `x` and their reconstructions.
pub fn reconstruction_loss<T: Scalar>(x: &DenseMatrix<T>, recon: &DenseMatrix<T>) -> Result<T> {
    if x.shape() != recon.shape() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("{}x{}", x.rows(), x.cols()),
            format!("{}x{}", recon.rows(), recon.cols()),
        ));
    }
    if x.rows() == 0 {
        return Ok(T::zero());
    }
    let mut acc = T::zero();
    for b in 0..x.rows() {
        acc += squared_distance(x.row(b), recon.row(b));
    }
    Ok(acc / T::from_f64(x.rows() as f64))
}

/// Squared coefficient of variation of one value vector: population variance
/// over squared mean. Zero for a uniform vector.
pub fn cv_squared<T: Scalar>(values: &[T]) -> T {
    if values.len() < 2 {
        return T::zero();
    }
    let n = T::from_f64(values.len() as f64);
    let mut mean = T::zero();
    for &v in values {
        mean += v;
    }
    mean /= n;
    let mut var = T::zero();
    for &v in values {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    var / (mean * mean)
}

/// Per-codebook CV^2 of the batch-averaged assignment probabilities.
pub fn batch_codeword_cv2<T: Scalar>(
    probs: &DenseMatrix<T>,
    num_codebooks: usize,
) -> Result<Vec<T>> {
    if num_codebooks == 0 || !probs.cols().is_multiple_of(num_codebooks) {
        return Err(Error::shape(
            "batch_codeword_cv2",
            format!("columns divisible by {num_codebooks}"),
            format!("{}", probs.cols()),
        ));
    }
    let k_count = probs.cols() / num_codebooks;
    let inv_b = 1.0 / probs.rows() as f64;
    let mut out = Vec::with_capacity(num_codebooks);
    for m in 0..num_codebooks {
        let mut avg = vec![T::zero(); k_count];
        for b in 0..probs.rows() {
            let span = &probs.row(b)[m * k_count..(m + 1) * k_count];
            for (a, &p) in avg.iter_mut().zip(span) {
                *a += p;
            }
        }
        for a in avg.iter_mut() {
            *a *= T::from_f64(inv_b);
        }
        out.push(cv_squared(&avg));
    }
    Ok(out)
}

/// Compressed-domain score of one row against given codes: the negated sum
/// of the row's logits at those codes.
fn score_of_codes<T: Scalar>(logit_row: &[T], codes: &[u8], k_count: usize) -> T {
    let mut s = T::zero();
    for (m, &c) in codes.iter().enumerate() {
        s -= logit_row[m * k_count + c as usize];
    }
    s
}

/// Mean triplet hinge `max(0, delta + d2(anchor, pos) - d2(anchor, neg))`
/// with anchors run through the encoder in evaluation mode. Positions and
/// negatives are given by their stored codes.
pub fn triplet_loss<T: Scalar>(
    model: &UnqModel<T>,
    anchors: &DenseMatrix<T>,
    positives: &CodeTable,
    negatives: &CodeTable,
    delta: f64,
) -> Result<T> {
    let b = anchors.rows();
    if positives.len() != b || negatives.len() != b {
        return Err(Error::shape(
            "triplet_loss",
            format!("{b} positive and negative code rows"),
            format!("{} and {}", positives.len(), negatives.len()),
        ));
    }
    if b == 0 {
        return Ok(T::zero());
    }
    let heads = model.encode_heads(anchors)?;
    let logits = model.codeword_logits(&heads)?;
    let k_count = model.codebook_size();
    let delta = T::from_f64(delta);
    let mut acc = T::zero();
    for i in 0..b {
        let row = logits.row(i);
        let d2p = score_of_codes(row, positives.row(i), k_count);
        let d2n = score_of_codes(row, negatives.row(i), k_count);
        let h = delta + d2p - d2n;
        if h > T::zero() {
            acc += h;
        }
    }
    Ok(acc / T::from_f64(b as f64))
}

/// Loss values of one training step, reported in `f64` for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub triplet: f64,
    pub balance: f64,
    pub total: f64,
}

fn ensure_finite(value: f64, term: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term })
    }
}

/// Forward (and optionally backward) pass of the full objective on one
/// batch.
///
/// `triplets` holds the stored codes of each row's positive and negative,
/// flattened `B x M`. `noise` is the Gumbel perturbation, `B x (M * K)`;
/// passing it explicitly keeps the loss a pure function of the parameters,
/// which the gradient checker requires. With `with_grad` the gradients of
/// all three terms are accumulated into the model's buffers.
pub fn total_loss<T: Scalar>(
    model: &mut UnqModel<T>,
    batch: &DenseMatrix<T>,
    triplets: Option<(&[u8], &[u8])>,
    config: &TrainConfig,
    epoch_progress: f64,
    noise: &DenseMatrix<T>,
    with_grad: bool,
) -> Result<LossBreakdown> {
    let b = batch.rows();
    if b == 0 {
        return Err(Error::InvalidBatch { rows: 0 });
    }
    let m_count = model.num_codebooks();
    let k_count = model.codebook_size();
    let d_code = model.code_dim();
    let alpha = config.effective_alpha();
    let beta = config.beta_at(epoch_progress);
    if let Some((pos, neg)) = triplets {
        if pos.len() != b * m_count || neg.len() != b * m_count {
            return Err(Error::shape(
                "total_loss",
                format!("{} triplet codes", b * m_count),
                format!("{} and {}", pos.len(), neg.len()),
            ));
        }
        if let Some(&bad) = pos.iter().chain(neg).find(|&&c| c as usize >= k_count) {
            return Err(Error::InvalidCode {
                code: bad as usize,
                size: k_count,
            });
        }
    }

    // Forward: encoder -> logits -> stochastic assignments -> decoder.
    let (heads, enc_caches) = model.encoder.forward_train(batch)?;
    let logits = model.codeword_logits(&heads)?;
    let assignment = model.gumbel_assign(&logits, noise)?;
    let probs = assignment.log_probs.map(|lp| lp.exp());
    let soft_mode = config.ablation.soft_gumbel;

    let skip_recon = config.ablation.triplet_only;
    let (recon, dec_caches) = if skip_recon {
        (DenseMatrix::zeros(0, 0), Vec::new())
    } else {
        let aggregated = if soft_mode {
            model.aggregate_onehots(&assignment.soft)?
        } else {
            let mut agg = DenseMatrix::zeros(b, d_code);
            for row in 0..b {
                let acc = agg.row_mut(row);
                for m in 0..m_count {
                    let k = assignment.indices[row * m_count + m] as usize;
                    for (a, &w) in acc.iter_mut().zip(model.codebooks.word(m, k)) {
                        *a += w;
                    }
                }
            }
            agg
        };
        model.decoder.forward_train(&aggregated)?
    };

    let l1 = if skip_recon {
        0.0
    } else {
        ensure_finite(
            reconstruction_loss(batch, &recon)?.to_f64(),
            "reconstruction",
        )?
    };

    // Triplet hinge on compressed-domain scores; `active` marks rows inside
    // the margin, which are the only rows with a gradient.
    let mut l2 = 0.0;
    let mut active = vec![false; b];
    if let Some((pos, neg)) = triplets {
        let delta = config.delta;
        for row in 0..b {
            let lrow = logits.row(row);
            let d2p =
                score_of_codes(lrow, &pos[row * m_count..(row + 1) * m_count], k_count).to_f64();
            let d2n =
                score_of_codes(lrow, &neg[row * m_count..(row + 1) * m_count], k_count).to_f64();
            let h = delta + d2p - d2n;
            if h > 0.0 {
                l2 += h;
                active[row] = true;
            }
        }
        l2 = ensure_finite(l2 / b as f64, "triplet")?;
    }

    let cv_per_codebook = batch_codeword_cv2(&probs, m_count)?;
    let cv_mean = ensure_finite(
        cv_per_codebook.iter().map(|&v| v.to_f64()).sum::<f64>() / m_count as f64,
        "balance",
    )?;

    let total = ensure_finite(l1 + alpha * l2 + beta * cv_mean, "total")?;

    if with_grad {
        let mut dlogits = DenseMatrix::<T>::zeros(b, m_count * k_count);

        if !skip_recon {
            // Reconstruction: d/drecon of mean |x - recon|^2, back through
            // the decoder to the aggregated code vector.
            let scale = T::from_f64(2.0 / b as f64);
            let mut drecon = DenseMatrix::zeros(b, batch.cols());
            for row in 0..b {
                let x = batch.row(row);
                let r = recon.row(row);
                let g = drecon.row_mut(row);
                for j in 0..x.len() {
                    g[j] = scale * (r[j] - x[j]);
                }
            }
            let dagg = model.decoder.backward(&dec_caches, &drecon)?;

            // Aggregation: codeword gradients use the forward coefficients
            // (one-hot or relaxed); the straight-through estimator passes
            // d(aggregated) to every relaxed coefficient as if the softmax
            // had been used directly.
            let mut dsoft = DenseMatrix::<T>::zeros(b, m_count * k_count);
            for row in 0..b {
                let dv = dagg.row(row);
                let ds_row = dsoft.row_mut(row);
                for m in 0..m_count {
                    for k in 0..k_count {
                        ds_row[m * k_count + k] = dot(model.codebooks.word(m, k), dv);
                    }
                }
            }
            for row in 0..b {
                let dv = dagg.row(row);
                if soft_mode {
                    let s_row = assignment.soft.row(row);
                    for m in 0..m_count {
                        for k in 0..k_count {
                            let coeff = s_row[m * k_count + k];
                            let wg = model.codebooks.word_grad_mut(m, k);
                            for (g, &v) in wg.iter_mut().zip(dv) {
                                *g += coeff * v;
                            }
                        }
                    }
                } else {
                    for m in 0..m_count {
                        let k = assignment.indices[row * m_count + m] as usize;
                        let wg = model.codebooks.word_grad_mut(m, k);
                        for (g, &v) in wg.iter_mut().zip(dv) {
                            *g += v;
                        }
                    }
                }
            }
            // Through the relaxed softmax into the logits. The softmax here
            // is taken over noised logits; noise is additive, so the input
            // gradient lands on the logits unchanged.
            for row in 0..b {
                for m in 0..m_count {
                    let span = m * k_count..(m + 1) * k_count;
                    softmax_backward_in_place(
                        &assignment.soft.row(row)[span.clone()],
                        &dsoft.row(row)[span.clone()],
                        &mut dlogits.row_mut(row)[span],
                    );
                }
            }
        }

        if let Some((pos, neg)) = triplets {
            // d(total)/d(logit) for active rows: -alpha/B at the positive
            // codes, +alpha/B at the negative codes.
            let g = T::from_f64(alpha / b as f64);
            for row in 0..b {
                if !active[row] {
                    continue;
                }
                let dl = dlogits.row_mut(row);
                for m in 0..m_count {
                    dl[m * k_count + pos[row * m_count + m] as usize] -= g;
                    dl[m * k_count + neg[row * m_count + m] as usize] += g;
                }
            }
        }

        if beta > 0.0 {
            // CV^2 of the batch-averaged probabilities. For codebook m with
            // averages a_k (mean mu, population variance V):
            //   dCV^2/da_k = 2/(K mu^2) * ((a_k - mu) - V/mu)
            // and da_k/dp_bk = 1/B; the per-codebook term carries 1/M. The
            // resulting dL/dp goes through the softmax at p.
            let k_f = k_count as f64;
            for m in 0..m_count {
                let mut avg = vec![0.0f64; k_count];
                for row in 0..b {
                    let span = &probs.row(row)[m * k_count..(m + 1) * k_count];
                    for (a, &p) in avg.iter_mut().zip(span) {
                        *a += p.to_f64();
                    }
                }
                for a in avg.iter_mut() {
                    *a /= b as f64;
                }
                let mu = avg.iter().sum::<f64>() / k_f;
                let var = avg.iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>() / k_f;
                let outer = beta / (m_count as f64 * b as f64);
                let dprob: Vec<T> = avg
                    .iter()
                    .map(|&a| T::from_f64(outer * 2.0 / (k_f * mu * mu) * ((a - mu) - var / mu)))
                    .collect();
                for row in 0..b {
                    let span = m * k_count..(m + 1) * k_count;
                    softmax_backward_in_place(
                        &probs.row(row)[span.clone()],
                        &dprob,
                        &mut dlogits.row_mut(row)[span],
                    );
                }
            }
        }

        // Logits to heads, codewords and temperatures:
        //   logit = <head, word> / tau, so
        //   dhead += g * word / tau, dword += g * head / tau,
        //   dlog_tau += g * (-logit).
        let mut dheads = DenseMatrix::zeros(b, m_count * d_code);
        let inv_tau: Vec<T> = (0..m_count)
            .map(|m| model.temperatures.inv_tau(m))
            .collect();
        for row in 0..b {
            let lrow = logits.row(row);
            let grow = dlogits.row(row);
            let head_row = heads.row(row);
            let dhead_row = dheads.row_mut(row);
            for m in 0..m_count {
                let head = &head_row[m * d_code..(m + 1) * d_code];
                let dhead = &mut dhead_row[m * d_code..(m + 1) * d_code];
                let it = inv_tau[m];
                let mut dlt = T::zero();
                for k in 0..k_count {
                    let g = grow[m * k_count + k];
                    if g == T::zero() {
                        continue;
                    }
                    let gs = g * it;
                    dlt -= g * lrow[m * k_count + k];
                    let start = (m * k_count + k) * d_code;
                    let wg = &mut model.codebooks.word_grads[start..start + d_code];
                    for i in 0..d_code {
                        wg[i] += gs * head[i];
                    }
                    let word = &model.codebooks.words[start..start + d_code];
                    for i in 0..d_code {
                        dhead[i] += gs * word[i];
                    }
                }
                model.temperatures.log_tau_grad[m] += dlt;
            }
        }
        model.encoder.backward(&enc_caches, &dheads)?;
    }

    Ok(LossBreakdown {
        reconstruction: l1,
        triplet: l2,
        balance: cv_mean,
        total,
    })
}

/// Per-anchor triplet choices for one epoch. Index `i` holds the positive
/// and negative ids drawn for anchor `i`.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub positives: Vec<u32>,
    pub negatives: Vec<u32>,
}

/// Draws one positive (uniform among the 3 nearest true neighbors) and one
/// negative (uniform among ranks 100..=200, clamped to the ground-truth
/// depth) per anchor. Negatives equal to the anchor or to one of its top-3
/// neighbor candidates are rejected and redrawn.
pub fn sample_triplets<T: Scalar>(
    train_set: &DenseMatrix<T>,
    gt: &GroundTruth,
    rng: &mut ChaCha8Rng,
) -> Result<TripletBatch> {
    use rand::Rng;
    let n = train_set.rows();
    if gt.num_queries() != n {
        return Err(Error::shape(
            "sample_triplets",
            format!("{n} ground-truth rows"),
            format!("{}", gt.num_queries()),
        ));
    }
    let depth = gt.k();
    if depth < 4 {
        return Err(Error::InvalidConfig(format!(
            "triplet sampling needs ground truth of depth >= 4, got {depth}"
        )));
    }
    let pos_span = depth.min(3);
    // 1-based neighbor ranks 100..=200 are 0-based positions 99..=199.
    let neg_lo = 99.min(depth - 1);
    let neg_hi = 199.min(depth - 1);
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for anchor in 0..n {
        let row = gt.row(anchor);
        positives.push(row[rng.random_range(0..pos_span)]);
        let excluded = |id: u32| id == anchor as u32 || row[..pos_span].contains(&id);
        let mut neg = None;
        for _ in 0..64 {
            let candidate = row[rng.random_range(neg_lo..=neg_hi)];
            if !excluded(candidate) {
                neg = Some(candidate);
                break;
            }
        }
        let neg = neg.or_else(|| {
            // Deterministic fallback: first admissible id at or past the
            // window start.
            row[neg_lo..]
                .iter()
                .chain(row[pos_span..neg_lo].iter())
                .copied()
                .find(|&id| !excluded(id))
        });
        match neg {
            Some(id) => negatives.push(id),
            None => {
                return Err(Error::InvalidConfig(
                    "could not sample a negative distinct from the anchor and its neighbors".into(),
                ))
            }
        }
    }
    Ok(TripletBatch {
        positives,
        negatives,
    })
}

/// Loss and schedule values of one epoch, averaged over batches.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub reconstruction: f64,
    pub triplet: f64,
    pub balance: f64,
    pub total: f64,
    pub lr: f64,
    pub beta: f64,
}

impl EpochStats {
    /// Tab-separated log line: epoch, L1, L2, CV^2, total, lr, beta.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.8}\t{:.4}",
            self.epoch,
            self.reconstruction,
            self.triplet,
            self.balance,
            self.total,
            self.lr,
            self.beta
        )
    }
}

/// Trains `model` in place. See [`fit_with`] for the reporting variant.
pub fn fit(
    model: &mut UnqModel<f32>,
    train_set: &DenseMatrix<f32>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochStats>> {
    fit_with(model, train_set, config, rng, |_| {})
}

/// Trains `model` in place, invoking `on_epoch` after every epoch.
///
/// Each epoch: draw fresh triplets from the exact leave-one-out ground
/// truth, re-encode the training set so triplet scores use current codes,
/// shuffle, and run QHAdam with the one-cycle schedule over all batches.
/// Trailing batches of a single row are dropped (batch statistics need two).
pub fn fit_with(
    model: &mut UnqModel<f32>,
    train_set: &DenseMatrix<f32>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    let n = train_set.rows();
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if n < 2 {
        return Err(Error::InvalidBatch { rows: n });
    }
    if train_set.cols() != model.input_dim() {
        return Err(Error::shape(
            "fit",
            format!("{} input columns", model.input_dim()),
            format!("{}", train_set.cols()),
        ));
    }

    let m_count = model.num_codebooks();
    let use_triplets = config.effective_alpha() > 0.0;
    let gt = if use_triplets {
        let depth = 200.min(n - 1);
        Some(exact_knn_leave_one_out(train_set, depth)?)
    } else {
        None
    };

    let batch_size = config.batch_size.min(n);
    let full = n / batch_size;
    let rem = n % batch_size;
    let steps_per_epoch = full + usize::from(rem >= 2);
    let total_steps = config.epochs * steps_per_epoch;

    let mut optimizer = OptimizerState::<f32>::new(config.optimizer);
    let mut stats = Vec::with_capacity(config.epochs);
    let mut order: Vec<u32> = (0..n as u32).collect();
    let noise_cols = m_count * model.codebook_size();

    for epoch in 0..config.epochs {
        let progress = if config.epochs > 1 {
            epoch as f64 / (config.epochs - 1) as f64
        } else {
            0.0
        };
        let beta = config.beta_at(progress);

        // Fresh triplets and fresh codes every epoch.
        let epoch_codes = if use_triplets {
            let gt = gt.as_ref().expect("ground truth present");
            let triplets = sample_triplets(train_set, gt, rng)?;
            let codes = model.hard_encode(train_set)?;
            let mut pos = Vec::with_capacity(n * m_count);
            let mut neg = Vec::with_capacity(n * m_count);
            for anchor in 0..n {
                pos.extend_from_slice(codes.row(triplets.positives[anchor] as usize));
                neg.extend_from_slice(codes.row(triplets.negatives[anchor] as usize));
            }
            Some((pos, neg))
        } else {
            None
        };

        order.shuffle(rng);
        let mut sums = LossBreakdown::default();
        let mut seen = 0usize;
        let mut last_lr =
            one_cycle_lr(optimizer.step_count() as usize, total_steps, config.peak_lr);
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train_set.gather_rows(chunk)?;
            let mut pos_batch = Vec::new();
            let mut neg_batch = Vec::new();
            let triplet_slices = if let Some((pos, neg)) = epoch_codes.as_ref() {
                pos_batch.reserve(chunk.len() * m_count);
                neg_batch.reserve(chunk.len() * m_count);
                for &anchor in chunk {
                    let a = anchor as usize;
                    pos_batch.extend_from_slice(&pos[a * m_count..(a + 1) * m_count]);
                    neg_batch.extend_from_slice(&neg[a * m_count..(a + 1) * m_count]);
                }
                Some((pos_batch.as_slice(), neg_batch.as_slice()))
            } else {
                None
            };
            let noise = sample_gumbel(chunk.len(), noise_cols, rng);
            last_lr = one_cycle_lr(optimizer.step_count() as usize, total_steps, config.peak_lr);
            model.zero_grads();
            let breakdown = total_loss(
                model,
                &batch,
                triplet_slices,
                config,
                progress,
                &noise,
                true,
            )?;
            optimizer.step(model, last_lr);
            sums.reconstruction += breakdown.reconstruction * chunk.len() as f64;
            sums.triplet += breakdown.triplet * chunk.len() as f64;
            sums.balance += breakdown.balance * chunk.len() as f64;
            sums.total += breakdown.total * chunk.len() as f64;
            seen += chunk.len();
        }
        let denom = seen.max(1) as f64;
        let epoch_stats = EpochStats {
            epoch,
            reconstruction: sums.reconstruction / denom,
            triplet: sums.triplet / denom,
            balance: sums.balance / denom,
            total: sums.total / denom,
            lr: last_lr,
            beta,
        };
        log::info!("{}", epoch_stats.log_line());
        on_epoch(&epoch_stats);
        stats.push(epoch_stats);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn tiny_model(seed: u64) -> UnqModel<f64> {
        let mut config = ModelConfig::new(6);
        config.num_codebooks = 2;
        config.codebook_size = 4;
        config.code_dim = 3;
        config.hidden = vec![8];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        UnqModel::new(config, &mut rng).unwrap()
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn one_cycle_hits_documented_endpoints() {
        let peak = 1e-3;
        assert_abs_diff_eq!(one_cycle_lr(0, 1000, peak), peak / 25.0, epsilon = 1e-15);
        assert_abs_diff_eq!(one_cycle_lr(300, 1000, peak), peak, epsilon = 1e-15);
        assert_abs_diff_eq!(
            one_cycle_lr(1000, 1000, peak),
            peak / 250.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn one_cycle_peaks_exactly_once_and_stays_positive() {
        let peak = 0.01;
        let total = 1000;
        let mut max = 0.0f64;
        for s in 0..=total {
            let lr = one_cycle_lr(s, total, peak);
            assert!(lr > 0.0);
            assert!(lr <= peak + 1e-15);
            max = max.max(lr);
        }
        assert_abs_diff_eq!(max, peak, epsilon = 1e-15);
    }

    #[test]
    fn qhadam_zero_gradient_zero_moments_is_identity() {
        let config = QhAdamConfig::default();
        let mut params = vec![1.5f64, -2.0, 0.25];
        let grads = vec![0.0; 3];
        let mut m = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        let before = params.clone();
        qhadam_step(&mut params, &grads, &mut m, &mut v, 1, 0.1, &config);
        assert_eq!(params, before);
    }

    #[test]
    fn qhadam_with_unit_nus_matches_adam_oracle() {
        let config = QhAdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            nu1: 1.0,
            nu2: 1.0,
            eps: 1e-8,
        };
        let lr = 0.05;
        let mut params = vec![0.3f64, -1.2];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];

        // Independent Adam implementation, straight from its update rule.
        let mut ref_params = params.clone();
        let mut ref_m = [0.0f64; 2];
        let mut ref_v = [0.0f64; 2];

        let grad_seq = [[0.2f64, -0.4], [-0.1, 0.3], [0.05, 0.05]];
        for (t, grads) in grad_seq.iter().enumerate() {
            let step = (t + 1) as u64;
            qhadam_step(&mut params, grads, &mut m, &mut v, step, lr, &config);
            for i in 0..2 {
                ref_m[i] = 0.9 * ref_m[i] + 0.1 * grads[i];
                ref_v[i] = 0.999 * ref_v[i] + 0.001 * grads[i] * grads[i];
                let mh = ref_m[i] / (1.0 - 0.9f64.powi(step as i32));
                let vh = ref_v[i] / (1.0 - 0.999f64.powi(step as i32));
                ref_params[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (p, r) in params.iter().zip(&ref_params) {
            assert_abs_diff_eq!(p, r, epsilon = 1e-12);
        }
    }

    #[test]
    fn cv_squared_of_uniform_vector_is_zero() {
        let v = vec![0.125f64; 8];
        assert!(cv_squared(&v).abs() < 1e-15);
    }

    #[test]
    fn cv_squared_matches_hand_example() {
        // Mean 0.5, population variance 0.0625, CV^2 = 0.0625 / 0.25 = 0.25.
        assert_abs_diff_eq!(cv_squared(&[0.75f64, 0.25]), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn cv_squared_is_scale_invariant() {
        let v = [0.1f64, 0.4, 0.2, 0.3];
        let scaled: Vec<f64> = v.iter().map(|x| x * 7.3).collect();
        assert_abs_diff_eq!(cv_squared(&v), cv_squared(&scaled), epsilon = 1e-12);
    }

    #[test]
    fn collapsed_codebook_has_large_cv2() {
        // All probability mass on codeword 0 of a 4-word codebook: K - 1.
        let mut probs = DenseMatrix::<f64>::zeros(5, 4);
        for b in 0..5 {
            probs.set(b, 0, 1.0);
        }
        let cv = batch_codeword_cv2(&probs, 1).unwrap();
        assert_abs_diff_eq!(cv[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn reconstruction_loss_matches_manual_mean() {
        let x = DenseMatrix::from_vec(2, 2, vec![1.0f64, 0.0, 0.0, 2.0]).unwrap();
        let r = DenseMatrix::from_vec(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        // (1 + 4) / 2
        assert_abs_diff_eq!(reconstruction_loss(&x, &r).unwrap(), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn triplet_loss_equal_codes_costs_the_margin() {
        // Identical positive and negative codes make the score difference
        // exactly zero, so every hinge sits at the margin.
        let model = tiny_model(1);
        let x = batch(3, 6, 2);
        let same = model.hard_encode(&x).unwrap();
        let loss = triplet_loss(&model, &x, &same, &same, 0.1).unwrap();
        assert_abs_diff_eq!(loss, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn sample_triplets_respects_window_and_exclusions() {
        let pts = batch(300, 4, 3).cast::<f32>();
        let gt = exact_knn_leave_one_out(&pts, 200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = sample_triplets(&pts, &gt, &mut rng).unwrap();
        assert_eq!(t.positives.len(), 300);
        for anchor in 0..300 {
            let row = gt.row(anchor);
            assert!(row[..3].contains(&t.positives[anchor]));
            let neg = t.negatives[anchor];
            assert_ne!(neg, anchor as u32);
            assert!(!row[..3].contains(&neg));
            assert!(row[99..200].contains(&neg));
        }
    }

    #[test]
    fn sample_triplets_clamps_shallow_ground_truth() {
        let pts = batch(30, 4, 5).cast::<f32>();
        let gt = exact_knn_leave_one_out(&pts, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = sample_triplets(&pts, &gt, &mut rng).unwrap();
        for anchor in 0..30 {
            // Window clamps to the last rank available.
            assert_eq!(t.negatives[anchor], gt.row(anchor)[19]);
        }
    }

    #[test]
    fn sample_triplets_is_deterministic_per_seed() {
        let pts = batch(150, 4, 7).cast::<f32>();
        let gt = exact_knn_leave_one_out(&pts, 149).unwrap();
        let a = sample_triplets(&pts, &gt, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = sample_triplets(&pts, &gt, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a.positives, b.positives);
        assert_eq!(a.negatives, b.negatives);
    }

    fn gradcheck_config() -> TrainConfig {
        TrainConfig {
            alpha: 0.5,
            beta_start: 0.7,
            beta_end: 0.7,
            delta: 0.25,
            ablation: AblationFlags {
                soft_gumbel: true,
                ..AblationFlags::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let mut model = tiny_model(42);
        let x = batch(4, 6, 43);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let noise = sample_gumbel::<f64, _>(4, 2 * 4, &mut rng);
        let pos: Vec<u8> = (0..8).map(|_| rng.random_range(0..4u8)).collect();
        let neg: Vec<u8> = (0..8).map(|_| rng.random_range(0..4u8)).collect();
        let config = gradcheck_config();

        let err = gradient_check(
            &mut model,
            |model, with_grad| {
                let mut work = model.clone();
                let out = total_loss(
                    &mut work,
                    &x,
                    Some((&pos, &neg)),
                    &config,
                    0.0,
                    &noise,
                    with_grad,
                )?;
                if with_grad {
                    let mut collected: Vec<Vec<f64>> = Vec::new();
                    work.visit_params(&mut |_, g| collected.push(g.to_vec()));
                    let mut i = 0;
                    model.visit_params(&mut |_, g| {
                        g.copy_from_slice(&collected[i]);
                        i += 1;
                    });
                }
                Ok(out.total)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn fit_zero_epochs_leaves_parameters_untouched() {
        let mut config = ModelConfig::new(4);
        config.num_codebooks = 2;
        config.codebook_size = 4;
        config.code_dim = 3;
        config.hidden = vec![6];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model: UnqModel<f32> = UnqModel::new(config, &mut rng).unwrap();
        let mut before: Vec<Vec<f32>> = Vec::new();
        model.visit_params(&mut |p, _| before.push(p.to_vec()));

        let train = batch(50, 4, 11).cast::<f32>();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let stats = fit(&mut model, &train, &tc, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert!(stats.is_empty());
        let mut after: Vec<Vec<f32>> = Vec::new();
        model.visit_params(&mut |p, _| after.push(p.to_vec()));
        assert_eq!(before, after);
    }

    fn small_fit_setup(seed: u64) -> (UnqModel<f32>, DenseMatrix<f32>, TrainConfig) {
        let mut config = ModelConfig::new(4);
        config.num_codebooks = 2;
        config.codebook_size = 8;
        config.code_dim = 4;
        config.hidden = vec![12];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = UnqModel::new(config, &mut rng).unwrap();
        let train = batch(120, 4, seed + 1).cast::<f32>();
        let tc = TrainConfig {
            batch_size: 32,
            epochs: 6,
            ..TrainConfig::default()
        };
        (model, train, tc)
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let (mut m1, train, tc) = small_fit_setup(20);
        let (mut m2, _, _) = small_fit_setup(20);
        let s1 = fit(&mut m1, &train, &tc, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let s2 = fit(&mut m2, &train, &tc, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        assert_eq!(s1.len(), s2.len());
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.total, b.total);
        }
        let mut p1: Vec<Vec<f32>> = Vec::new();
        let mut p2: Vec<Vec<f32>> = Vec::new();
        m1.visit_params(&mut |p, _| p1.push(p.to_vec()));
        m2.visit_params(&mut |p, _| p2.push(p.to_vec()));
        assert_eq!(p1, p2);
    }

    #[test]
    fn fit_reduces_reconstruction_loss() {
        let (mut model, train, mut tc) = small_fit_setup(30);
        tc.epochs = 10;
        tc.ablation.no_triplet = true;
        let stats = fit(&mut model, &train, &tc, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
        let first = stats.first().unwrap().reconstruction;
        let last = stats.last().unwrap().reconstruction;
        assert!(
            last < first,
            "reconstruction should improve: first {first}, last {last}"
        );
    }

    #[test]
    fn fit_aborts_on_non_finite_parameters() {
        let (mut model, train, tc) = small_fit_setup(40);
        model.codebooks.words[0] = f32::NAN;
        let err = fit(&mut model, &train, &tc, &mut ChaCha8Rng::seed_from_u64(41)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "got {err:?}");
    }

    #[test]
    fn beta_schedule_is_linear_and_decreasing() {
        let tc = TrainConfig::default();
        assert_abs_diff_eq!(tc.beta_at(0.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tc.beta_at(1.0), 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(tc.beta_at(0.5), 0.525, epsilon = 1e-12);
        let mut prev = f64::INFINITY;
        for i in 0..=10 {
            let b = tc.beta_at(i as f64 / 10.0);
            assert!(b <= prev);
            prev = b;
        }
    }

    #[test]
    fn config_rejects_conflicting_ablations() {
        let tc = TrainConfig {
            ablation: AblationFlags {
                no_triplet: true,
                triplet_only: true,
                ..AblationFlags::default()
            },
            ..TrainConfig::default()
        };
        assert!(tc.validate().is_err());
    }

    #[test]
    fn log_line_is_tab_separated_with_seven_fields() {
        let stats = EpochStats {
            epoch: 3,
            reconstruction: 1.0,
            triplet: 2.0,
            balance: 3.0,
            total: 4.0,
            lr: 5e-4,
            beta: 0.5,
        };
        let line = stats.log_line();
        assert_eq!(line.split('\t').count(), 7);
        assert!(line.starts_with("3\t"));
    }
}
