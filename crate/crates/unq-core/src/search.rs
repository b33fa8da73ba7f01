//! Compressed-domain nearest-neighbor search.
//!
//! Stage one never touches original vectors: for a query we tabulate the
//! score of every codeword once, then the scan cost per stored item is `M`
//! table lookups. The scan score is the negated sum of the query head and
//! codeword inner products, which orders items exactly like the learned-space
//! distance (the query-only term is constant per query and is dropped).
//! Stage two decodes the best `L` candidates through the decoder and reranks
//! them by exact squared distance to the query in the input space.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{dot, squared_distance, DenseMatrix};
use crate::model::UnqModel;

/// Encoded dataset: `M` one-byte codes per item.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeTable {
    len: usize,
    num_codebooks: usize,
    codebook_size: usize,
    codes: Vec<u8>,
}

impl CodeTable {
    pub fn new(
        len: usize,
        num_codebooks: usize,
        codebook_size: usize,
        codes: Vec<u8>,
    ) -> Result<Self> {
        if codebook_size == 0 || codebook_size > 256 {
            return Err(Error::InvalidConfig(format!(
                "codebook size must be in 1..=256, got {codebook_size}"
            )));
        }
        if codes.len() != len * num_codebooks {
            return Err(Error::shape(
                "CodeTable::new",
                format!("{} codes", len * num_codebooks),
                format!("{}", codes.len()),
            ));
        }
        if let Some(&bad) = codes.iter().find(|&&c| (c as usize) >= codebook_size) {
            return Err(Error::InvalidCode {
                code: bad as usize,
                size: codebook_size,
            });
        }
        Ok(CodeTable {
            len,
            num_codebooks,
            codebook_size,
            codes,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn num_codebooks(&self) -> usize {
        self.num_codebooks
    }

    #[inline]
    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u8] {
        &self.codes[i * self.num_codebooks..(i + 1) * self.num_codebooks]
    }

    #[inline]
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// Assignment counts per `(codebook, codeword)`, flattened `M x K`.
    pub fn usage_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_codebooks * self.codebook_size];
        for i in 0..self.len {
            for (m, &c) in self.row(i).iter().enumerate() {
                counts[m * self.codebook_size + c as usize] += 1;
            }
        }
        counts
    }

    /// Fraction of codewords with at least one assignment, per codebook.
    pub fn usage_fraction_per_codebook(&self) -> Vec<f64> {
        let counts = self.usage_counts();
        (0..self.num_codebooks)
            .map(|m| {
                let used = counts[m * self.codebook_size..(m + 1) * self.codebook_size]
                    .iter()
                    .filter(|&&c| c > 0)
                    .count();
                used as f64 / self.codebook_size as f64
            })
            .collect()
    }
}

/// Per-query codeword scores: entry `(m, k)` is the score contribution of
/// codeword `k` of codebook `m`.
#[derive(Clone, Debug)]
pub struct LookupTable {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub values: Vec<f32>,
}

impl LookupTable {
    #[inline]
    pub fn entry(&self, m: usize, k: usize) -> f32 {
        self.values[m * self.codebook_size + k]
    }
}

/// One ranked answer. `scan_score` is the stage-one score; `rerank_score`
/// is the exact reconstruction distance when stage two ran.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchHit {
    pub id: u32,
    pub scan_score: f32,
    pub rerank_score: Option<f32>,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
    /// True when fewer candidates than requested answers were available.
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SearchOptions {
    /// Stage-one candidate list length `L`.
    pub candidates: usize,
    /// Number of final answers per query.
    pub top_k: usize,
    /// Skip stage two and return scan order directly.
    pub no_rerank: bool,
    /// Divide lookup entries by the learned temperatures. Scores stay
    /// rank-equivalent per query either way; kept as an option so the scan
    /// can be compared against raw inner products.
    pub use_temperature: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            candidates: 500,
            top_k: 100,
            no_rerank: false,
            use_temperature: true,
        }
    }
}

/// Tabulates the query's score for every codeword of every codebook.
pub fn build_lut(
    model: &UnqModel<f32>,
    query: &[f32],
    use_temperature: bool,
) -> Result<LookupTable> {
    if query.len() != model.input_dim() {
        return Err(Error::shape(
            "build_lut",
            format!("{} query dimensions", model.input_dim()),
            format!("{}", query.len()),
        ));
    }
    let m_count = model.num_codebooks();
    let k_count = model.codebook_size();
    let d = model.code_dim();
    let q = DenseMatrix::from_vec(1, query.len(), query.to_vec())?;
    let heads = model.encode_heads(&q)?;
    let head_row = heads.row(0);
    let mut values = vec![0.0f32; m_count * k_count];
    for m in 0..m_count {
        let head = &head_row[m * d..(m + 1) * d];
        let scale = if use_temperature {
            model.temperatures.inv_tau(m)
        } else {
            1.0
        };
        for k in 0..k_count {
            values[m * k_count + k] = dot(head, model.codebooks.word(m, k)) * scale;
        }
    }
    Ok(LookupTable {
        num_codebooks: m_count,
        codebook_size: k_count,
        values,
    })
}

/// Candidate entry ordered by `(score, id)`; the heap keeps the L smallest.
#[derive(PartialEq)]
struct HeapEntry {
    score: f32,
    id: u32,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.score
            .total_cmp(&other.score)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Keeps the `l` smallest `(id, score)` pairs from a stream, returned
/// ascending by `(score, id)`.
pub(crate) fn smallest_l(scores: impl Iterator<Item = (u32, f32)>, l: usize) -> Vec<(u32, f32)> {
    if l == 0 {
        return Vec::new();
    }
    let mut heap = std::collections::BinaryHeap::with_capacity(l + 1);
    for (id, score) in scores {
        let entry = HeapEntry { score, id };
        if heap.len() < l {
            heap.push(entry);
        } else if entry < *heap.peek().expect("non-empty heap") {
            heap.pop();
            heap.push(entry);
        }
    }
    let mut out: Vec<(u32, f32)> = heap.into_iter().map(|e| (e.id, e.score)).collect();
    out.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

/// Stage one: score every stored item with `M` lookups and return the `l`
/// best `(id, score)` pairs, ascending, ties broken by lower id. Asking for
/// more candidates than items returns all of them.
pub fn scan(lut: &LookupTable, table: &CodeTable, l: usize) -> Result<Vec<(u32, f32)>> {
    if table.num_codebooks() != lut.num_codebooks || table.codebook_size() > lut.codebook_size {
        return Err(Error::shape(
            "scan",
            format!(
                "codes for {}x{} lookup table",
                lut.num_codebooks, lut.codebook_size
            ),
            format!("{}x{}", table.num_codebooks(), table.codebook_size()),
        ));
    }
    let k_count = lut.codebook_size;
    let scores = (0..table.len()).map(|i| {
        let mut score = 0.0f32;
        for (m, &c) in table.row(i).iter().enumerate() {
            score -= lut.values[m * k_count + c as usize];
        }
        (i as u32, score)
    });
    Ok(smallest_l(scores, l.min(table.len())))
}

/// Stage two: decode the candidates and order them by exact squared distance
/// to the query. Returns `(id, distance)` ascending and whether the
/// candidate list was shorter than `k`.
pub fn rerank(
    model: &UnqModel<f32>,
    query: &[f32],
    candidate_ids: &[u32],
    table: &CodeTable,
    k: usize,
) -> Result<(Vec<(u32, f32)>, bool)> {
    if query.len() != model.input_dim() {
        return Err(Error::shape(
            "rerank",
            format!("{} query dimensions", model.input_dim()),
            format!("{}", query.len()),
        ));
    }
    let m_count = table.num_codebooks();
    let mut codes = Vec::with_capacity(candidate_ids.len() * m_count);
    for &id in candidate_ids {
        if id as usize >= table.len() {
            return Err(Error::shape(
                "rerank",
                format!("candidate id < {}", table.len()),
                format!("{id}"),
            ));
        }
        codes.extend_from_slice(table.row(id as usize));
    }
    let batch = CodeTable::new(candidate_ids.len(), m_count, table.codebook_size(), codes)?;
    let recon = model.decode_codes(&batch)?;
    let mut scored: Vec<(u32, f32)> = candidate_ids
        .iter()
        .enumerate()
        .map(|(row, &id)| (id, squared_distance(query, recon.row(row))))
        .collect();
    scored.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let truncated = scored.len() < k;
    scored.truncate(k);
    Ok((scored, truncated))
}

/// Full two-stage query: lookup-table scan for `candidates` ids, then
/// decoder reranking down to `top_k` (or scan order with `no_rerank`).
pub fn search(
    model: &UnqModel<f32>,
    query: &[f32],
    table: &CodeTable,
    opts: &SearchOptions,
) -> Result<SearchResult> {
    if opts.top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be positive".into()));
    }
    let lut = build_lut(model, query, opts.use_temperature)?;
    if opts.no_rerank {
        let hits = scan(&lut, table, opts.top_k)?;
        let truncated = hits.len() < opts.top_k;
        return Ok(SearchResult {
            hits: hits
                .into_iter()
                .map(|(id, score)| SearchHit {
                    id,
                    scan_score: score,
                    rerank_score: None,
                })
                .collect(),
            truncated,
        });
    }
    let candidates = scan(&lut, table, opts.candidates.max(opts.top_k))?;
    let ids: Vec<u32> = candidates.iter().map(|&(id, _)| id).collect();
    let (reranked, truncated) = rerank(model, query, &ids, table, opts.top_k)?;
    let scan_score: std::collections::HashMap<u32, f32> = candidates.into_iter().collect();
    Ok(SearchResult {
        hits: reranked
            .into_iter()
            .map(|(id, d1)| SearchHit {
                id,
                scan_score: scan_score[&id],
                rerank_score: Some(d1),
            })
            .collect(),
        truncated,
    })
}

/// Exact nearest neighbors by squared distance, ids ascending on ties.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    num_queries: usize,
    k: usize,
    ids: Vec<u32>,
    distances: Option<Vec<f32>>,
}

impl GroundTruth {
    pub fn from_ids(num_queries: usize, k: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != num_queries * k {
            return Err(Error::shape(
                "GroundTruth::from_ids",
                format!("{} ids", num_queries * k),
                format!("{}", ids.len()),
            ));
        }
        Ok(GroundTruth {
            num_queries,
            k,
            ids,
            distances: None,
        })
    }

    #[inline]
    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, q: usize) -> &[u32] {
        &self.ids[q * self.k..(q + 1) * self.k]
    }

    pub fn distances_row(&self, q: usize) -> Option<&[f32]> {
        self.distances
            .as_ref()
            .map(|d| &d[q * self.k..(q + 1) * self.k])
    }
}

fn knn_one(base: &DenseMatrix<f32>, query: &[f32], k: usize, skip: Option<u32>) -> Vec<(u32, f32)> {
    let scores = (0..base.rows() as u32)
        .filter(|&i| skip != Some(i))
        .map(|i| (i, squared_distance(query, base.row(i as usize))));
    smallest_l(scores, k)
}

/// Exhaustive k-nearest-neighbor ground truth, parallel over queries.
pub fn exact_knn(
    base: &DenseMatrix<f32>,
    queries: &DenseMatrix<f32>,
    k: usize,
) -> Result<GroundTruth> {
    if base.cols() != queries.cols() {
        return Err(Error::shape(
            "exact_knn",
            format!("{} base columns", base.cols()),
            format!("{} query columns", queries.cols()),
        ));
    }
    if k == 0 || k > base.rows() {
        return Err(Error::InvalidConfig(format!(
            "k must be in 1..={}, got {k}",
            base.rows()
        )));
    }
    let per_query: Vec<Vec<(u32, f32)>> = (0..queries.rows())
        .into_par_iter()
        .map(|q| knn_one(base, queries.row(q), k, None))
        .collect();
    Ok(flatten_gt(per_query, k))
}

/// Ground truth of each point within its own set, the point itself excluded.
/// Used to build training triplets.
pub fn exact_knn_leave_one_out(points: &DenseMatrix<f32>, k: usize) -> Result<GroundTruth> {
    if points.rows() < 2 || k == 0 || k > points.rows() - 1 {
        return Err(Error::InvalidConfig(format!(
            "k must be in 1..={} for leave-one-out, got {k}",
            points.rows().saturating_sub(1)
        )));
    }
    let per_query: Vec<Vec<(u32, f32)>> = (0..points.rows())
        .into_par_iter()
        .map(|q| knn_one(points, points.row(q), k, Some(q as u32)))
        .collect();
    Ok(flatten_gt(per_query, k))
}

fn flatten_gt(per_query: Vec<Vec<(u32, f32)>>, k: usize) -> GroundTruth {
    let num_queries = per_query.len();
    let mut ids = Vec::with_capacity(num_queries * k);
    let mut distances = Vec::with_capacity(num_queries * k);
    for row in per_query {
        for (id, d) in row {
            ids.push(id);
            distances.push(d);
        }
    }
    GroundTruth {
        num_queries,
        k,
        ids,
        distances: Some(distances),
    }
}

/// Fraction of queries whose true nearest neighbor (rank 0 of the ground
/// truth) appears among the first `k` returned ids.
pub fn recall_at_k(results: &[Vec<u32>], gt: &GroundTruth, k: usize) -> Result<f64> {
    if results.len() != gt.num_queries() {
        return Err(Error::shape(
            "recall_at_k",
            format!("{} result lists", gt.num_queries()),
            format!("{}", results.len()),
        ));
    }
    if gt.k() == 0 || k == 0 {
        return Err(Error::InvalidConfig("recall needs k >= 1".into()));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (q, res) in results.iter().enumerate() {
        let target = gt.row(q)[0];
        let depth = k.min(res.len());
        if res[..depth].contains(&target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}
