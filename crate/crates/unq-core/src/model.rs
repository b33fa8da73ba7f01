//! The neural multi-codebook quantizer.
//!
//! An encoder network maps a vector `x` to `M` heads, one per codebook. Head
//! `m` scores every codeword of codebook `m` by a scaled inner product
//! `<head_m, c_mk> / tau_m`; a softmax over those scores gives the assignment
//! distribution. Hard encoding picks the argmax per codebook, producing `M`
//! one-byte codes. Decoding sums the selected codewords (all codebooks share
//! one `code_dim`-dimensional space) and runs the sum through a decoder
//! network back to the input space.
//!
//! Checkpoints use the `UNQ1` container: magic, `u32` little-endian header
//! (input dim, codebook count, codebook size, code dim, hidden widths), then
//! one `f32` little-endian blob holding the batch-norm settings and every
//! parameter in layer order (weights row-major, batch-norm as gamma, beta,
//! running mean, running variance), the codewords, and the log-temperatures.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix, Scalar};
use crate::nn::{softmax_in_place, AffineLayer, BatchNormLayer, Layer, LayerStack, Parameterized};
use crate::search::CodeTable;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UNQ1";

/// Hyperparameters fixed at model construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Number of codebooks `M`; also the number of bytes per encoded vector.
    pub num_codebooks: usize,
    /// Codewords per codebook `K`; at most 256 so codes fit in a byte.
    pub codebook_size: usize,
    /// Dimension of the shared codeword space.
    pub code_dim: usize,
    /// Hidden widths of both the encoder and the decoder.
    pub hidden: Vec<usize>,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            num_codebooks: 8,
            codebook_size: 256,
            code_dim: 256,
            hidden: vec![1024, 1024],
            bn_epsilon: crate::nn::BATCH_NORM_EPSILON,
            bn_momentum: crate::nn::BATCH_NORM_MOMENTUM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.code_dim == 0 {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        if self.num_codebooks == 0 {
            return Err(Error::InvalidConfig("need at least one codebook".into()));
        }
        if !(2..=256).contains(&self.codebook_size) {
            return Err(Error::InvalidConfig(format!(
                "codebook size must be in 2..=256 to fit one byte per code, got {}",
                self.codebook_size
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(
                "hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `M` codebooks of `K` codewords each, all in the shared code space.
/// Word `(m, k)` lives at `words[(m * K + k) * code_dim ..][..code_dim]`.
#[derive(Clone, Debug)]
pub struct Codebooks<T = f32> {
    num_codebooks: usize,
    codebook_size: usize,
    code_dim: usize,
    pub words: Vec<T>,
    pub word_grads: Vec<T>,
}

impl<T: Scalar> Codebooks<T> {
    pub fn zeros(num_codebooks: usize, codebook_size: usize, code_dim: usize) -> Self {
        let len = num_codebooks * codebook_size * code_dim;
        Codebooks {
            num_codebooks,
            codebook_size,
            code_dim,
            words: vec![T::zero(); len],
            word_grads: vec![T::zero(); len],
        }
    }

    /// Gaussian initialization with standard deviation `1/sqrt(code_dim)`,
    /// so codewords start at roughly unit norm.
    pub fn init<R: Rng>(
        num_codebooks: usize,
        codebook_size: usize,
        code_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut cb = Self::zeros(num_codebooks, codebook_size, code_dim);
        let std = 1.0 / (code_dim as f64).sqrt();
        for w in cb.words.iter_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *w = T::from_f64(z * std);
        }
        cb
    }

    #[inline]
    pub fn word(&self, m: usize, k: usize) -> &[T] {
        let start = (m * self.codebook_size + k) * self.code_dim;
        &self.words[start..start + self.code_dim]
    }

    #[inline]
    pub fn word_grad_mut(&mut self, m: usize, k: usize) -> &mut [T] {
        let start = (m * self.codebook_size + k) * self.code_dim;
        &mut self.word_grads[start..start + self.code_dim]
    }

    pub fn num_codebooks(&self) -> usize {
        self.num_codebooks
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }
}

/// Per-codebook softmax temperatures, learned through their logarithm so
/// they stay positive.
#[derive(Clone, Debug)]
pub struct Temperatures<T = f32> {
    pub log_tau: Vec<T>,
    pub log_tau_grad: Vec<T>,
}

impl<T: Scalar> Temperatures<T> {
    pub fn new(num_codebooks: usize) -> Self {
        Temperatures {
            log_tau: vec![T::zero(); num_codebooks],
            log_tau_grad: vec![T::zero(); num_codebooks],
        }
    }

    #[inline]
    pub fn tau(&self, m: usize) -> T {
        self.log_tau[m].exp()
    }

    #[inline]
    pub fn inv_tau(&self, m: usize) -> T {
        (-self.log_tau[m]).exp()
    }
}

/// Output of [`UnqModel::gumbel_encode`]: stochastic hard assignments plus
/// the relaxed distribution that carries the straight-through gradient.
#[derive(Clone, Debug)]
pub struct GumbelEncoding<T = f32> {
    /// Chosen code per `(row, codebook)`, row-major `B x M`.
    pub indices: Vec<u8>,
    /// Exact one-hot rows, `B x (M * K)`.
    pub onehots: DenseMatrix<T>,
    /// Relaxed assignments `softmax(log p + z)`, same shape as `onehots`.
    pub soft: DenseMatrix<T>,
    /// Log assignment probabilities before noise, same shape.
    pub log_probs: DenseMatrix<T>,
}

/// Standard Gumbel noise `z = -ln(-ln u)`, `u ~ U(0, 1)` clamped away from
/// zero. Drawn in `f64` so every scalar type sees the same stream.
pub fn sample_gumbel<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix<T> {
    let mut noise = DenseMatrix::zeros(rows, cols);
    for v in noise.data_mut() {
        let u: f64 = rng.random::<f64>().max(1e-12);
        *v = T::from_f64(-(-u.ln()).ln());
    }
    noise
}

#[derive(Clone, Debug)]
pub struct UnqModel<T = f32> {
    pub config: ModelConfig,
    pub encoder: LayerStack<T>,
    pub decoder: LayerStack<T>,
    pub codebooks: Codebooks<T>,
    pub temperatures: Temperatures<T>,
}

impl<T: Scalar> UnqModel<T> {
    /// Fresh model with fan-in uniform affine weights, unit-variance-style
    /// Gaussian codewords and unit temperatures. Draw order: encoder layers,
    /// decoder layers, codebooks.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let heads_dim = config.num_codebooks * config.code_dim;
        let encoder = LayerStack::mlp(
            config.input_dim,
            &config.hidden,
            heads_dim,
            config.bn_epsilon,
            config.bn_momentum,
            rng,
        );
        let decoder = LayerStack::mlp(
            config.code_dim,
            &config.hidden,
            config.input_dim,
            config.bn_epsilon,
            config.bn_momentum,
            rng,
        );
        let codebooks = Codebooks::init(
            config.num_codebooks,
            config.codebook_size,
            config.code_dim,
            rng,
        );
        let temperatures = Temperatures::new(config.num_codebooks);
        Ok(UnqModel {
            config,
            encoder,
            decoder,
            codebooks,
            temperatures,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn num_codebooks(&self) -> usize {
        self.config.num_codebooks
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn code_dim(&self) -> usize {
        self.config.code_dim
    }

    /// Encoded size: one byte per codebook.
    pub fn bytes_per_vector(&self) -> usize {
        self.config.num_codebooks
    }

    fn check_input(&self, x: &DenseMatrix<T>, context: &'static str) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::shape(
                context,
                format!("{} input columns", self.config.input_dim),
                format!("{}", x.cols()),
            ));
        }
        Ok(())
    }

    /// Encoder output in evaluation mode: `B x (M * code_dim)`, head `m` of
    /// row `b` at columns `m * code_dim ..`.
    pub fn encode_heads(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.check_input(x, "UnqModel::encode_heads")?;
        self.encoder.forward_eval(x)
    }

    /// Scaled codeword scores `<head_m, c_mk> / tau_m` as `B x (M * K)`.
    pub fn codeword_logits(&self, heads: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let m_count = self.config.num_codebooks;
        let k_count = self.config.codebook_size;
        let d = self.config.code_dim;
        if heads.cols() != m_count * d {
            return Err(Error::shape(
                "UnqModel::codeword_logits",
                format!("{} head columns", m_count * d),
                format!("{}", heads.cols()),
            ));
        }
        let inv_tau: Vec<T> = (0..m_count).map(|m| self.temperatures.inv_tau(m)).collect();
        let mut logits = DenseMatrix::zeros(heads.rows(), m_count * k_count);
        for b in 0..heads.rows() {
            let head_row = heads.row(b);
            let logit_row = logits.row_mut(b);
            for m in 0..m_count {
                let head = &head_row[m * d..(m + 1) * d];
                for k in 0..k_count {
                    logit_row[m * k_count + k] = dot(head, self.codebooks.word(m, k)) * inv_tau[m];
                }
            }
        }
        Ok(logits)
    }

    /// Softmax over each codebook's `K` logits, independently per row.
    pub fn assignment_probs(&self, logits: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let m_count = self.config.num_codebooks;
        let k_count = self.config.codebook_size;
        if logits.cols() != m_count * k_count {
            return Err(Error::shape(
                "UnqModel::assignment_probs",
                format!("{} logit columns", m_count * k_count),
                format!("{}", logits.cols()),
            ));
        }
        let mut probs = logits.clone();
        for b in 0..probs.rows() {
            let row = probs.row_mut(b);
            for m in 0..m_count {
                softmax_in_place(&mut row[m * k_count..(m + 1) * k_count]);
            }
        }
        Ok(probs)
    }

    /// Deterministic codes: per codebook the argmax-scoring codeword, ties
    /// going to the lowest index. Temperatures are positive so the argmax
    /// over logits equals the argmax over raw inner products.
    pub fn hard_encode(&self, x: &DenseMatrix<T>) -> Result<CodeTable> {
        self.check_input(x, "UnqModel::hard_encode")?;
        let m_count = self.config.num_codebooks;
        let k_count = self.config.codebook_size;
        let rows: Vec<u32> = (0..x.rows() as u32).collect();
        let chunks: Vec<Vec<u8>> = rows
            .par_chunks(256)
            .map(|chunk| -> Result<Vec<u8>> {
                let batch = x.gather_rows(chunk)?;
                let heads = self.encoder.forward_eval(&batch)?;
                let logits = self.codeword_logits(&heads)?;
                let mut codes = Vec::with_capacity(chunk.len() * m_count);
                for b in 0..logits.rows() {
                    let row = logits.row(b);
                    for m in 0..m_count {
                        codes.push(argmax(&row[m * k_count..(m + 1) * k_count]) as u8);
                    }
                }
                Ok(codes)
            })
            .collect::<Result<_>>()?;
        let mut codes = Vec::with_capacity(x.rows() * m_count);
        for c in chunks {
            codes.extend_from_slice(&c);
        }
        CodeTable::new(x.rows(), m_count, k_count, codes)
    }

    /// Stochastic assignments via the Gumbel-max trick on precomputed noise.
    /// Runs the encoder in training mode, so batches need at least two rows.
    pub fn gumbel_encode_with_noise(
        &mut self,
        x: &DenseMatrix<T>,
        noise: &DenseMatrix<T>,
    ) -> Result<GumbelEncoding<T>> {
        self.check_input(x, "UnqModel::gumbel_encode")?;
        let (heads, _) = self.encoder.forward_train(x)?;
        let logits = self.codeword_logits(&heads)?;
        self.gumbel_assign(&logits, noise)
    }

    /// As [`gumbel_encode_with_noise`](Self::gumbel_encode_with_noise) with
    /// noise drawn from `rng`.
    pub fn gumbel_encode<R: Rng>(
        &mut self,
        x: &DenseMatrix<T>,
        rng: &mut R,
    ) -> Result<GumbelEncoding<T>> {
        let cols = self.config.num_codebooks * self.config.codebook_size;
        let noise = sample_gumbel(x.rows(), cols, rng);
        self.gumbel_encode_with_noise(x, &noise)
    }

    /// Shared tail of the Gumbel path: given logits and noise, produce hard
    /// indices, one-hots and the relaxed softmax. Softmax is shift invariant
    /// per codebook, so perturbing logits instead of log-probabilities gives
    /// exactly the same samples, relaxation, and gradient.
    pub(crate) fn gumbel_assign(
        &self,
        logits: &DenseMatrix<T>,
        noise: &DenseMatrix<T>,
    ) -> Result<GumbelEncoding<T>> {
        let m_count = self.config.num_codebooks;
        let k_count = self.config.codebook_size;
        if noise.shape() != logits.shape() {
            return Err(Error::shape(
                "UnqModel::gumbel_assign",
                format!("{}x{}", logits.rows(), logits.cols()),
                format!("{}x{}", noise.rows(), noise.cols()),
            ));
        }
        let rows = logits.rows();
        let mut soft = DenseMatrix::zeros(rows, m_count * k_count);
        let mut onehots = DenseMatrix::zeros(rows, m_count * k_count);
        let mut log_probs = DenseMatrix::zeros(rows, m_count * k_count);
        let mut indices = Vec::with_capacity(rows * m_count);
        for b in 0..rows {
            let logit_row = logits.row(b);
            let noise_row = noise.row(b);
            for m in 0..m_count {
                let span = m * k_count..(m + 1) * k_count;
                let logit = &logit_row[span.clone()];
                // log p = logits - logsumexp(logits), stabilized by the max.
                let max = logit.iter().cloned().fold(logit[0], T::max);
                let mut lse = T::zero();
                for &v in logit {
                    lse += (v - max).exp();
                }
                let lse = lse.ln() + max;
                let lp_row = &mut log_probs.row_mut(b)[span.clone()];
                for (lp, &v) in lp_row.iter_mut().zip(logit) {
                    *lp = v - lse;
                }

                let soft_row = &mut soft.row_mut(b)[span.clone()];
                for ((s, &v), &z) in soft_row.iter_mut().zip(logit).zip(&noise_row[span.clone()]) {
                    *s = v + z;
                }
                let k_star = argmax(soft_row);
                softmax_in_place(soft_row);
                onehots.row_mut(b)[m * k_count + k_star] = T::one();
                indices.push(k_star as u8);
            }
        }
        Ok(GumbelEncoding {
            indices,
            onehots,
            soft,
            log_probs,
        })
    }

    /// Sum of the selected codewords for each code row: `B x code_dim`.
    pub fn aggregate_codes(&self, codes: &CodeTable) -> Result<DenseMatrix<T>> {
        if codes.num_codebooks() != self.config.num_codebooks {
            return Err(Error::shape(
                "UnqModel::aggregate_codes",
                format!("{} codebooks", self.config.num_codebooks),
                format!("{}", codes.num_codebooks()),
            ));
        }
        let d = self.config.code_dim;
        let mut out = DenseMatrix::zeros(codes.len(), d);
        for b in 0..codes.len() {
            let row = codes.row(b);
            let acc = out.row_mut(b);
            for (m, &code) in row.iter().enumerate() {
                let code = code as usize;
                if code >= self.config.codebook_size {
                    return Err(Error::InvalidCode {
                        code,
                        size: self.config.codebook_size,
                    });
                }
                for (a, &w) in acc.iter_mut().zip(self.codebooks.word(m, code)) {
                    *a += w;
                }
            }
        }
        Ok(out)
    }

    /// Weighted codeword sum for relaxed assignments `B x (M * K)`.
    pub fn aggregate_onehots(&self, assignments: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let m_count = self.config.num_codebooks;
        let k_count = self.config.codebook_size;
        if assignments.cols() != m_count * k_count {
            return Err(Error::shape(
                "UnqModel::aggregate_onehots",
                format!("{} assignment columns", m_count * k_count),
                format!("{}", assignments.cols()),
            ));
        }
        let d = self.config.code_dim;
        let mut out = DenseMatrix::zeros(assignments.rows(), d);
        for b in 0..assignments.rows() {
            let a_row = assignments.row(b);
            let acc = out.row_mut(b);
            for m in 0..m_count {
                for k in 0..k_count {
                    let a = a_row[m * k_count + k];
                    if a == T::zero() {
                        continue;
                    }
                    for (o, &w) in acc.iter_mut().zip(self.codebooks.word(m, k)) {
                        *o += a * w;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Reconstruction of stored codes: aggregate then decode, evaluation
    /// mode. Errors if any code addresses a missing codeword.
    pub fn decode_codes(&self, codes: &CodeTable) -> Result<DenseMatrix<T>> {
        let agg = self.aggregate_codes(codes)?;
        self.decoder.forward_eval(&agg)
    }

    /// Reconstruction of one-hot (or relaxed) assignment rows.
    pub fn decode_onehots(&self, assignments: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let agg = self.aggregate_onehots(assignments)?;
        self.decoder.forward_eval(&agg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Blob::new(BufWriter::new(file), path);
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u32(self.config.input_dim as u32)?;
        w.u32(self.config.num_codebooks as u32)?;
        w.u32(self.config.codebook_size as u32)?;
        w.u32(self.config.code_dim as u32)?;
        w.u32(self.config.hidden.len() as u32)?;
        for &h in &self.config.hidden {
            w.u32(h as u32)?;
        }
        w.f32(self.config.bn_epsilon as f32)?;
        w.f32(self.config.bn_momentum as f32)?;
        write_stack(&mut w, &self.encoder)?;
        write_stack(&mut w, &self.decoder)?;
        for &v in &self.codebooks.words {
            w.f32(v.to_f64() as f32)?;
        }
        for &v in &self.temperatures.log_tau {
            w.f32(v.to_f64() as f32)?;
        }
        w.finish()
    }
}

impl UnqModel<f32> {
    pub fn load(path: impl AsRef<Path>) -> Result<UnqModel<f32>> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BlobReader::new(BufReader::new(file), path);
        let mut magic = [0u8; 4];
        r.bytes(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, 0, "bad magic, not a UNQ1 checkpoint"));
        }
        let input_dim = r.u32()? as usize;
        let num_codebooks = r.u32()? as usize;
        let codebook_size = r.u32()? as usize;
        let code_dim = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        if n_hidden > 64 {
            return Err(Error::format(
                path,
                r.offset(),
                "implausible hidden layer count",
            ));
        }
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden.push(r.u32()? as usize);
        }
        let bn_epsilon = r.f32()? as f64;
        let bn_momentum = r.f32()? as f64;
        let config = ModelConfig {
            input_dim,
            num_codebooks,
            codebook_size,
            code_dim,
            hidden,
            bn_epsilon,
            bn_momentum,
        };
        config
            .validate()
            .map_err(|e| Error::format(path, r.offset(), e.to_string()))?;

        let heads_dim = num_codebooks * code_dim;
        let mut encoder = zeroed_stack(
            input_dim,
            &config.hidden,
            heads_dim,
            bn_epsilon,
            bn_momentum,
        );
        let mut decoder =
            zeroed_stack(code_dim, &config.hidden, input_dim, bn_epsilon, bn_momentum);
        read_stack(&mut r, &mut encoder)?;
        read_stack(&mut r, &mut decoder)?;
        let mut codebooks = Codebooks::zeros(num_codebooks, codebook_size, code_dim);
        for v in codebooks.words.iter_mut() {
            *v = r.f32()?;
        }
        let mut temperatures = Temperatures::new(num_codebooks);
        for v in temperatures.log_tau.iter_mut() {
            *v = r.f32()?;
        }
        r.expect_eof()?;
        Ok(UnqModel {
            config,
            encoder,
            decoder,
            codebooks,
            temperatures,
        })
    }
}

impl<T: Scalar> Parameterized<T> for UnqModel<T> {
    fn visit_params(&mut self, visit: &mut dyn FnMut(&mut [T], &mut [T])) {
        self.encoder.visit_params(visit);
        self.decoder.visit_params(visit);
        visit(&mut self.codebooks.words, &mut self.codebooks.word_grads);
        visit(
            &mut self.temperatures.log_tau,
            &mut self.temperatures.log_tau_grad,
        );
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn zeroed_stack<T: Scalar>(
    input_dim: usize,
    hidden: &[usize],
    output_dim: usize,
    eps: f64,
    momentum: f64,
) -> LayerStack<T> {
    let mut layers = Vec::with_capacity(hidden.len() * 3 + 1);
    let mut d = input_dim;
    for &h in hidden {
        layers.push(Layer::Affine(AffineLayer::zeros_no_bias(d, h)));
        layers.push(Layer::BatchNorm(BatchNormLayer::new(h, eps, momentum)));
        layers.push(Layer::Relu);
        d = h;
    }
    layers.push(Layer::Affine(AffineLayer::zeros(d, output_dim)));
    LayerStack { layers }
}

fn write_stack<T: Scalar, W: Write>(w: &mut Blob<W>, stack: &LayerStack<T>) -> Result<()> {
    for layer in &stack.layers {
        match layer {
            Layer::Affine(l) => {
                for &v in l.weight.data() {
                    w.f32(v.to_f64() as f32)?;
                }
                if let Some(bias) = &l.bias {
                    for &v in bias {
                        w.f32(v.to_f64() as f32)?;
                    }
                }
            }
            Layer::BatchNorm(l) => {
                for field in [&l.gamma, &l.beta, &l.running_mean, &l.running_var] {
                    for &v in field.iter() {
                        w.f32(v.to_f64() as f32)?;
                    }
                }
            }
            Layer::Relu => {}
        }
    }
    Ok(())
}

fn read_stack<R: Read>(r: &mut BlobReader<R>, stack: &mut LayerStack<f32>) -> Result<()> {
    for layer in &mut stack.layers {
        match layer {
            Layer::Affine(l) => {
                for v in l.weight.data_mut() {
                    *v = r.f32()?;
                }
                if let Some(bias) = &mut l.bias {
                    for v in bias.iter_mut() {
                        *v = r.f32()?;
                    }
                }
            }
            Layer::BatchNorm(l) => {
                for field in [
                    &mut l.gamma,
                    &mut l.beta,
                    &mut l.running_mean,
                    &mut l.running_var,
                ] {
                    for v in field.iter_mut() {
                        *v = r.f32()?;
                    }
                }
            }
            Layer::Relu => {}
        }
    }
    Ok(())
}

pub(crate) struct Blob<W: Write> {
    inner: W,
    path: std::path::PathBuf,
}

impl<W: Write> Blob<W> {
    pub(crate) fn new(inner: W, path: &Path) -> Self {
        Blob {
            inner,
            path: path.to_path_buf(),
        }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner
            .write_all(b)
            .map_err(|e| Error::io(&self.path, e))
    }

    pub(crate) fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) struct BlobReader<R: Read> {
    inner: R,
    path: std::path::PathBuf,
    offset: u64,
}

impl<R: Read> BlobReader<R> {
    pub(crate) fn new(inner: R, path: &Path) -> Self {
        BlobReader {
            inner,
            path: path.to_path_buf(),
            offset: 0,
        }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::format(&self.path, self.offset, format!("truncated file ({e})")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(
                &self.path,
                self.offset,
                "trailing bytes after expected end",
            )),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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
    fn config_validation_rejects_oversized_codebooks() {
        let mut config = ModelConfig::new(4);
        config.codebook_size = 257;
        assert!(config.validate().is_err());
        config.codebook_size = 256;
        assert!(config.validate().is_ok());
    }

    #[test]
    fn codeword_logits_match_naive_dot_products() {
        let model = tiny_model(3);
        let x = batch(5, 6, 11);
        let heads = model.encode_heads(&x).unwrap();
        let logits = model.codeword_logits(&heads).unwrap();
        for b in 0..5 {
            for m in 0..2 {
                for k in 0..4 {
                    let head = &heads.row(b)[m * 3..(m + 1) * 3];
                    let word = model.codebooks.word(m, k);
                    let expected: f64 = head.iter().zip(word).map(|(h, w)| h * w).sum::<f64>()
                        / model.temperatures.tau(m);
                    assert_abs_diff_eq!(logits.get(b, m * 4 + k), expected, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn assignment_probs_normalize_per_codebook() {
        let model = tiny_model(4);
        let x = batch(3, 6, 12);
        let heads = model.encode_heads(&x).unwrap();
        let logits = model.codeword_logits(&heads).unwrap();
        let probs = model.assignment_probs(&logits).unwrap();
        for b in 0..3 {
            for m in 0..2 {
                let sum: f64 = probs.row(b)[m * 4..(m + 1) * 4].iter().sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hard_encode_is_argmax_of_logits() {
        let model = tiny_model(5);
        let x = batch(7, 6, 13);
        let heads = model.encode_heads(&x).unwrap();
        let logits = model.codeword_logits(&heads).unwrap();
        let codes = model.hard_encode(&x).unwrap();
        for b in 0..7 {
            for m in 0..2 {
                let span = &logits.row(b)[m * 4..(m + 1) * 4];
                assert_eq!(codes.row(b)[m] as usize, argmax(span));
            }
        }
    }

    #[test]
    fn hard_encode_is_deterministic() {
        let model = tiny_model(6);
        let x = batch(64, 6, 14);
        let a = model.hard_encode(&x).unwrap();
        let b = model.hard_encode(&x).unwrap();
        assert_eq!(a.codes(), b.codes());
    }

    #[test]
    fn gumbel_zero_noise_reduces_to_argmax_of_log_probs() {
        let mut model = tiny_model(7);
        let x = batch(6, 6, 15);
        let noise = DenseMatrix::zeros(6, 2 * 4);
        let enc = model.gumbel_encode_with_noise(&x, &noise).unwrap();
        for b in 0..6 {
            for m in 0..2 {
                let span = &enc.log_probs.row(b)[m * 4..(m + 1) * 4];
                assert_eq!(enc.indices[b * 2 + m] as usize, argmax(span));
            }
        }
    }

    #[test]
    fn gumbel_onehots_are_exact_and_match_indices() {
        let mut model = tiny_model(8);
        let x = batch(5, 6, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let enc = model.gumbel_encode(&x, &mut rng).unwrap();
        for b in 0..5 {
            for m in 0..2 {
                let span = &enc.onehots.row(b)[m * 4..(m + 1) * 4];
                let ones: Vec<usize> = span
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, _)| i)
                    .collect();
                assert_eq!(ones.len(), 1);
                assert_eq!(span[ones[0]], 1.0);
                assert_eq!(ones[0], enc.indices[b * 2 + m] as usize);
            }
        }
    }

    #[test]
    fn gumbel_same_seed_same_codes() {
        let x = batch(5, 6, 17);
        let mut m1 = tiny_model(9);
        let mut m2 = tiny_model(9);
        let mut r1 = ChaCha8Rng::seed_from_u64(1234);
        let mut r2 = ChaCha8Rng::seed_from_u64(1234);
        let e1 = m1.gumbel_encode(&x, &mut r1).unwrap();
        let e2 = m2.gumbel_encode(&x, &mut r2).unwrap();
        assert_eq!(e1.indices, e2.indices);
    }

    #[test]
    fn decode_codes_equals_decode_of_matching_onehots() {
        let model = tiny_model(10);
        let x = batch(4, 6, 18);
        let codes = model.hard_encode(&x).unwrap();
        let mut onehots = DenseMatrix::zeros(4, 2 * 4);
        for b in 0..4 {
            for (m, &code) in codes.row(b).iter().enumerate() {
                onehots.row_mut(b)[m * 4 + code as usize] = 1.0;
            }
        }
        let via_codes = model.decode_codes(&codes).unwrap();
        let via_onehots = model.decode_onehots(&onehots).unwrap();
        for (a, b) in via_codes.data().iter().zip(via_onehots.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(via_codes.shape(), (4, 6));
    }

    #[test]
    fn decode_rejects_out_of_range_codes() {
        let model = tiny_model(11);
        let table = CodeTable::new(1, 2, 256, vec![250, 1]).unwrap();
        assert!(matches!(
            model.decode_codes(&table),
            Err(Error::InvalidCode { code: 250, size: 4 })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.unq");
        let p2 = dir.path().join("b.unq");
        let mut config = ModelConfig::new(6);
        config.num_codebooks = 2;
        config.codebook_size = 4;
        config.code_dim = 3;
        config.hidden = vec![8, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model: UnqModel<f32> = UnqModel::new(config, &mut rng).unwrap();
        model.save(&p1).unwrap();
        let loaded = UnqModel::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert!(!b1.is_empty());
        assert_eq!(b1, b2);
        // Loaded model behaves identically.
        let x = batch(3, 6, 22).cast::<f32>();
        assert_eq!(
            model.hard_encode(&x).unwrap().codes(),
            loaded.hard_encode(&x).unwrap().codes()
        );
    }

    #[test]
    fn load_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.unq");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(UnqModel::load(&p), Err(Error::Format { .. })));
    }
}
