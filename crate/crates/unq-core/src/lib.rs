//! Neural multi-codebook quantization for compressed-domain nearest-neighbor
//! search.
//!
//! The library trains an encoder that maps vectors to short discrete codes
//! (one byte per codebook), a set of learned codebooks, and a decoder that
//! reconstructs vectors from codes. Search runs in two stages: a lookup-table
//! scan over the compressed codes produces a candidate pool, then decoding
//! the candidates and measuring exact distances reranks it. A product
//! quantization baseline with asymmetric distance computation is included
//! for comparison, along with dataset I/O and evaluation utilities.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod pq;
pub mod search;
pub mod train;

pub use error::{Error, Result};
pub use io::{
    read_bvecs, read_codes, read_fvecs, read_ivecs, synth_dataset, write_bvecs, write_codes,
    write_fvecs, write_ivecs, DatasetBundle, IntMatrix,
};
pub use matrix::{squared_distance, DenseMatrix, Scalar};
pub use model::{sample_gumbel, GumbelEncoding, ModelConfig, UnqModel};
pub use nn::Parameterized;
pub use pq::{
    pq_adc_lut, pq_encode, pq_encode_all, pq_reconstruct, pq_search, pq_train,
    pq_train_with_iterations, PqCodebooks,
};
pub use search::{
    build_lut, exact_knn, exact_knn_leave_one_out, recall_at_k, rerank, scan, search, CodeTable,
    GroundTruth, LookupTable, SearchHit, SearchOptions, SearchResult,
};
pub use train::{
    batch_codeword_cv2, fit, fit_with, total_loss, AblationFlags, EpochStats, LossBreakdown,
    OptimizerState, QhAdamConfig, TrainConfig,
};
