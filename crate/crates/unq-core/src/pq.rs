//! Product quantization baseline.
//!
//! The input space splits into `M` contiguous subspaces of equal width, each
//! with its own k-means codebook. Encoding stores the nearest centroid index
//! per subspace. Search uses asymmetric distance computation: a per-query
//! table of squared distances from each query subvector to every centroid.
//! Summing a code's `M` table entries gives exactly the squared distance
//! between the full query and the item's reconstruction, because the
//! subspaces partition the coordinates.
//!
//! Codebooks persist in the `PQC1` container: magic, `u32` little-endian
//! dims (input dim, subspace count, codebook size), then the centroids as
//! one `f32` little-endian blob in `(subspace, centroid, coordinate)` order.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, DenseMatrix};
use crate::model::{Blob, BlobReader};
use crate::search::{smallest_l, CodeTable, LookupTable};

pub const PQ_MAGIC: &[u8; 4] = b"PQC1";

/// Lloyd iterations used by [`pq_train`].
pub const DEFAULT_LLOYD_ITERATIONS: usize = 25;

/// Trained product quantizer: `M` codebooks of `K` centroids, each of width
/// `input_dim / M`.
#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebooks {
    input_dim: usize,
    num_subspaces: usize,
    codebook_size: usize,
    centroids: Vec<f32>,
}

impl PqCodebooks {
    pub fn new(
        input_dim: usize,
        num_subspaces: usize,
        codebook_size: usize,
        centroids: Vec<f32>,
    ) -> Result<Self> {
        if num_subspaces == 0 || input_dim == 0 || !input_dim.is_multiple_of(num_subspaces) {
            return Err(Error::InvalidConfig(format!(
                "input dim {input_dim} must be divisible by the subspace count {num_subspaces}"
            )));
        }
        if !(1..=256).contains(&codebook_size) {
            return Err(Error::InvalidConfig(format!(
                "codebook size must be in 1..=256, got {codebook_size}"
            )));
        }
        if centroids.len() != num_subspaces * codebook_size * (input_dim / num_subspaces) {
            return Err(Error::shape(
                "PqCodebooks::new",
                format!(
                    "{} centroid values",
                    num_subspaces * codebook_size * (input_dim / num_subspaces)
                ),
                format!("{}", centroids.len()),
            ));
        }
        Ok(PqCodebooks {
            input_dim,
            num_subspaces,
            codebook_size,
            centroids,
        })
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    #[inline]
    pub fn num_subspaces(&self) -> usize {
        self.num_subspaces
    }

    #[inline]
    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    #[inline]
    pub fn subspace_dim(&self) -> usize {
        self.input_dim / self.num_subspaces
    }

    /// One byte per subspace.
    pub fn bytes_per_vector(&self) -> usize {
        self.num_subspaces
    }

    #[inline]
    pub fn centroid(&self, m: usize, k: usize) -> &[f32] {
        let d = self.subspace_dim();
        let start = (m * self.codebook_size + k) * d;
        &self.centroids[start..start + d]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Blob::new(BufWriter::new(file), path);
        w.bytes(PQ_MAGIC)?;
        w.u32(self.input_dim as u32)?;
        w.u32(self.num_subspaces as u32)?;
        w.u32(self.codebook_size as u32)?;
        for &v in &self.centroids {
            w.f32(v)?;
        }
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BlobReader::new(BufReader::new(file), path);
        let mut magic = [0u8; 4];
        r.bytes(&mut magic)?;
        if &magic != PQ_MAGIC {
            return Err(Error::format(path, 0, "bad magic, not a PQC1 codebook"));
        }
        let input_dim = r.u32()? as usize;
        let num_subspaces = r.u32()? as usize;
        let codebook_size = r.u32()? as usize;
        let header_end = r.offset();
        if num_subspaces == 0
            || input_dim == 0
            || !input_dim.is_multiple_of(num_subspaces)
            || codebook_size == 0
        {
            return Err(Error::format(
                path,
                header_end,
                "inconsistent dimensions in header",
            ));
        }
        let len = num_subspaces * codebook_size * (input_dim / num_subspaces);
        let mut centroids = vec![0.0f32; len];
        for v in centroids.iter_mut() {
            *v = r.f32()?;
        }
        r.expect_eof()?;
        PqCodebooks::new(input_dim, num_subspaces, codebook_size, centroids)
    }
}

/// Result of one k-means run. `distortion_history` holds the mean squared
/// assignment distance after every assignment pass; Lloyd iterations never
/// increase it.
#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub centroids: DenseMatrix<f32>,
    pub assignments: Vec<u32>,
    pub distortion_history: Vec<f64>,
}

fn nearest_centroid(point: &[f32], centroids: &DenseMatrix<f32>) -> (u32, f32) {
    let mut best = 0u32;
    let mut best_d = f32::INFINITY;
    for c in 0..centroids.rows() {
        let d = squared_distance(point, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c as u32;
        }
    }
    (best, best_d)
}

/// k-means++ seeding: the first centroid is a uniform data point, each later
/// one is drawn with probability proportional to the squared distance to the
/// nearest centroid chosen so far.
fn seed_centroids(data: &DenseMatrix<f32>, k: usize, rng: &mut ChaCha8Rng) -> DenseMatrix<f32> {
    let n = data.rows();
    let mut centroids = DenseMatrix::zeros(k, data.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(data.row(i), centroids.row(0)) as f64)
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let chosen = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                r -= d;
                if r <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with chosen centroids; any point works.
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(data.row(chosen));
        for (i, d) in dist.iter_mut().enumerate() {
            let nd = squared_distance(data.row(i), centroids.row(c)) as f64;
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Runs at most `max_iterations` centroid updates, stopping early once the
/// assignments are stable. Clusters that lose all members are reseeded to
/// the point currently farthest from its assigned centroid.
pub fn kmeans(
    data: &DenseMatrix<f32>,
    k: usize,
    max_iterations: usize,
    seed: u64,
) -> Result<KmeansResult> {
    let n = data.rows();
    if k == 0 || n < k {
        return Err(Error::InvalidConfig(format!(
            "k-means needs 1 <= k <= {n}, got {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(data, k, &mut rng);
    let mut assignments: Vec<u32> = vec![u32::MAX; n];
    let mut history = Vec::new();

    for iteration in 0..=max_iterations {
        let assigned: Vec<(u32, f32)> = (0..n)
            .into_par_iter()
            .map(|i| nearest_centroid(data.row(i), &centroids))
            .collect();
        let new_assignments: Vec<u32> = assigned.iter().map(|&(c, _)| c).collect();
        let distances: Vec<f32> = assigned.iter().map(|&(_, d)| d).collect();
        history.push(distances.iter().map(|&d| d as f64).sum::<f64>() / n as f64);
        let stable = new_assignments == assignments;
        assignments = new_assignments;
        if stable || iteration == max_iterations {
            break;
        }

        // Means of each cluster.
        let mut sums = DenseMatrix::<f64>::zeros(k, data.cols());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c as usize] += 1;
            for (s, &x) in sums.row_mut(c as usize).iter_mut().zip(data.row(i)) {
                *s += x as f64;
            }
        }
        // Reseed empty clusters to the points farthest from their current
        // centroids, one distinct point per empty cluster.
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        let mut farthest: Vec<u32> = Vec::new();
        if !empties.is_empty() {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_unstable_by(|&a, &b| {
                distances[b as usize]
                    .total_cmp(&distances[a as usize])
                    .then(a.cmp(&b))
            });
            farthest = order;
        }
        let mut next_far = 0usize;
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = 1.0 / count as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = (s * inv) as f32;
                }
            } else {
                let point = farthest[next_far] as usize;
                next_far += 1;
                centroids.row_mut(c).copy_from_slice(data.row(point));
            }
        }
    }

    Ok(KmeansResult {
        centroids,
        assignments,
        distortion_history: history,
    })
}

/// Trains one k-means codebook per subspace with
/// [`DEFAULT_LLOYD_ITERATIONS`] updates.
pub fn pq_train(
    train_set: &DenseMatrix<f32>,
    num_subspaces: usize,
    codebook_size: usize,
    seed: u64,
) -> Result<PqCodebooks> {
    pq_train_with_iterations(
        train_set,
        num_subspaces,
        codebook_size,
        DEFAULT_LLOYD_ITERATIONS,
        seed,
    )
}

/// Subspace `m` trains on columns `m * d .. (m + 1) * d` with seed
/// `seed + m`, so subspaces are independent and the whole run is
/// deterministic.
pub fn pq_train_with_iterations(
    train_set: &DenseMatrix<f32>,
    num_subspaces: usize,
    codebook_size: usize,
    iterations: usize,
    seed: u64,
) -> Result<PqCodebooks> {
    let dim = train_set.cols();
    if num_subspaces == 0 || dim == 0 || !dim.is_multiple_of(num_subspaces) {
        return Err(Error::InvalidConfig(format!(
            "input dim {dim} must be divisible by the subspace count {num_subspaces}"
        )));
    }
    if train_set.rows() < codebook_size {
        return Err(Error::InvalidConfig(format!(
            "need at least {codebook_size} training vectors, got {}",
            train_set.rows()
        )));
    }
    let sub_dim = dim / num_subspaces;
    let subs: Vec<DenseMatrix<f32>> = (0..num_subspaces)
        .map(|m| {
            let mut sub = DenseMatrix::zeros(train_set.rows(), sub_dim);
            for r in 0..train_set.rows() {
                sub.row_mut(r)
                    .copy_from_slice(&train_set.row(r)[m * sub_dim..(m + 1) * sub_dim]);
            }
            sub
        })
        .collect();
    let results: Vec<KmeansResult> = subs
        .par_iter()
        .enumerate()
        .map(|(m, sub)| kmeans(sub, codebook_size, iterations, seed + m as u64))
        .collect::<Result<_>>()?;
    let mut centroids = Vec::with_capacity(num_subspaces * codebook_size * sub_dim);
    for r in &results {
        centroids.extend_from_slice(r.centroids.data());
    }
    PqCodebooks::new(dim, num_subspaces, codebook_size, centroids)
}

/// Nearest centroid per subspace, ties to the lower index.
pub fn pq_encode(cb: &PqCodebooks, vector: &[f32]) -> Result<Vec<u8>> {
    if vector.len() != cb.input_dim {
        return Err(Error::shape(
            "pq_encode",
            format!("{} dimensions", cb.input_dim),
            format!("{}", vector.len()),
        ));
    }
    let d = cb.subspace_dim();
    let mut codes = Vec::with_capacity(cb.num_subspaces);
    for m in 0..cb.num_subspaces {
        let sub = &vector[m * d..(m + 1) * d];
        let mut best = 0usize;
        let mut best_d = f32::INFINITY;
        for k in 0..cb.codebook_size {
            let dist = squared_distance(sub, cb.centroid(m, k));
            if dist < best_d {
                best_d = dist;
                best = k;
            }
        }
        codes.push(best as u8);
    }
    Ok(codes)
}

/// Encodes every row, parallel over items.
pub fn pq_encode_all(cb: &PqCodebooks, data: &DenseMatrix<f32>) -> Result<CodeTable> {
    let rows: Vec<Vec<u8>> = (0..data.rows())
        .into_par_iter()
        .map(|i| pq_encode(cb, data.row(i)))
        .collect::<Result<_>>()?;
    let mut codes = Vec::with_capacity(data.rows() * cb.num_subspaces);
    for r in rows {
        codes.extend_from_slice(&r);
    }
    CodeTable::new(data.rows(), cb.num_subspaces, cb.codebook_size, codes)
}

/// Concatenated centroids selected by `codes`.
pub fn pq_reconstruct(cb: &PqCodebooks, codes: &[u8]) -> Result<Vec<f32>> {
    if codes.len() != cb.num_subspaces {
        return Err(Error::shape(
            "pq_reconstruct",
            format!("{} codes", cb.num_subspaces),
            format!("{}", codes.len()),
        ));
    }
    let mut out = Vec::with_capacity(cb.input_dim);
    for (m, &c) in codes.iter().enumerate() {
        if c as usize >= cb.codebook_size {
            return Err(Error::InvalidCode {
                code: c as usize,
                size: cb.codebook_size,
            });
        }
        out.extend_from_slice(cb.centroid(m, c as usize));
    }
    Ok(out)
}

/// Asymmetric distance table: entry `(m, k)` is the squared distance between
/// the query's `m`-th subvector and centroid `k` of subspace `m`.
pub fn pq_adc_lut(cb: &PqCodebooks, query: &[f32]) -> Result<LookupTable> {
    if query.len() != cb.input_dim {
        return Err(Error::shape(
            "pq_adc_lut",
            format!("{} dimensions", cb.input_dim),
            format!("{}", query.len()),
        ));
    }
    let d = cb.subspace_dim();
    let mut values = vec![0.0f32; cb.num_subspaces * cb.codebook_size];
    for m in 0..cb.num_subspaces {
        let sub = &query[m * d..(m + 1) * d];
        for k in 0..cb.codebook_size {
            values[m * cb.codebook_size + k] = squared_distance(sub, cb.centroid(m, k));
        }
    }
    Ok(LookupTable {
        num_codebooks: cb.num_subspaces,
        codebook_size: cb.codebook_size,
        values,
    })
}

/// Exhaustive ADC search: the `k` items whose reconstructions are closest to
/// the query, ascending, ties to the lower id.
pub fn pq_search(
    cb: &PqCodebooks,
    query: &[f32],
    table: &CodeTable,
    k: usize,
) -> Result<Vec<(u32, f32)>> {
    if table.num_codebooks() != cb.num_subspaces || table.codebook_size() > cb.codebook_size {
        return Err(Error::shape(
            "pq_search",
            format!(
                "codes for {} subspaces of {} centroids",
                cb.num_subspaces, cb.codebook_size
            ),
            format!("{}x{}", table.num_codebooks(), table.codebook_size()),
        ));
    }
    let lut = pq_adc_lut(cb, query)?;
    let k_count = lut.codebook_size;
    let scores = (0..table.len()).map(|i| {
        let mut s = 0.0f32;
        for (m, &c) in table.row(i).iter().enumerate() {
            s += lut.values[m * k_count + c as usize];
        }
        (i as u32, s)
    });
    Ok(smallest_l(scores, k.min(table.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn kmeans_distortion_never_increases() {
        let data = random_matrix(300, 6, 1);
        let result = kmeans(&data, 8, 20, 2).unwrap();
        assert!(result.distortion_history.len() >= 2);
        for pair in result.distortion_history.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "distortion went up: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn kmeans_k_equal_one_returns_the_mean() {
        let data = random_matrix(50, 3, 3);
        let result = kmeans(&data, 1, 10, 4).unwrap();
        for j in 0..3 {
            let mean: f32 = (0..50).map(|i| data.get(i, j)).sum::<f32>() / 50.0;
            assert!((result.centroids.get(0, j) - mean).abs() < 1e-4);
        }
    }

    #[test]
    fn kmeans_recovers_well_separated_clusters() {
        // Three tight blobs at distance 100 from each other.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers = [[0.0f32, 0.0], [100.0, 0.0], [0.0, 100.0]];
        let mut rows = Vec::new();
        for c in &centers {
            for _ in 0..40 {
                rows.push(vec![
                    c[0] + rng.random_range(-0.5..0.5),
                    c[1] + rng.random_range(-0.5..0.5),
                ]);
            }
        }
        let data = DenseMatrix::from_rows(&rows).unwrap();
        let result = kmeans(&data, 3, 25, 6).unwrap();
        // Every centroid sits inside one blob.
        for c in 0..3 {
            let row = result.centroids.row(c);
            let near = centers
                .iter()
                .any(|ctr| (row[0] - ctr[0]).abs() < 2.0 && (row[1] - ctr[1]).abs() < 2.0);
            assert!(near, "centroid {row:?} far from every blob");
        }
        // Tight clusters mean tiny distortion.
        assert!(*result.distortion_history.last().unwrap() < 1.0);
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let data = random_matrix(120, 4, 7);
        let a = kmeans(&data, 10, 15, 8).unwrap();
        let b = kmeans(&data, 10, 15, 8).unwrap();
        assert_eq!(a.centroids.data(), b.centroids.data());
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn kmeans_survives_duplicate_points() {
        // All rows identical: seeding falls back to uniform picks and both
        // centroids collapse onto the lone point.
        let data = DenseMatrix::from_vec(5, 2, vec![3.0; 10]).unwrap();
        let result = kmeans(&data, 2, 10, 9).unwrap();
        for c in 0..2 {
            assert_eq!(result.centroids.row(c), &[3.0, 3.0]);
        }
    }

    #[test]
    fn pq_train_rejects_indivisible_dims() {
        let data = random_matrix(100, 10, 10);
        assert!(pq_train(&data, 3, 4, 0).is_err());
        assert!(pq_train(&data, 5, 4, 0).is_ok());
    }

    #[test]
    fn pq_encode_picks_nearest_centroid_per_subspace() {
        let data = random_matrix(200, 8, 11);
        let cb = pq_train_with_iterations(&data, 4, 8, 10, 12).unwrap();
        let v = data.row(17);
        let codes = pq_encode(&cb, v).unwrap();
        for m in 0..4 {
            let sub = &v[m * 2..(m + 1) * 2];
            let chosen = squared_distance(sub, cb.centroid(m, codes[m] as usize));
            for k in 0..8 {
                assert!(chosen <= squared_distance(sub, cb.centroid(m, k)));
            }
        }
    }

    #[test]
    fn adc_equals_distance_to_reconstruction() {
        let data = random_matrix(300, 12, 13);
        let cb = pq_train_with_iterations(&data, 4, 16, 15, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let q: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let item: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let codes = pq_encode(&cb, &item).unwrap();
            let lut = pq_adc_lut(&cb, &q).unwrap();
            let adc: f32 = codes
                .iter()
                .enumerate()
                .map(|(m, &c)| lut.entry(m, c as usize))
                .sum();
            let recon = pq_reconstruct(&cb, &codes).unwrap();
            let exact = squared_distance(&q, &recon);
            let denom = exact.abs().max(1.0);
            assert!(
                (adc - exact).abs() / denom < 1e-4,
                "ADC {adc} vs exact {exact}"
            );
        }
    }

    #[test]
    fn pq_search_matches_reconstruction_oracle() {
        let data = random_matrix(150, 8, 16);
        let cb = pq_train_with_iterations(&data, 4, 8, 10, 17).unwrap();
        let table = pq_encode_all(&cb, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();

        let got = pq_search(&cb, &q, &table, 10).unwrap();

        let mut oracle: Vec<(u32, f32)> = (0..150u32)
            .map(|i| {
                let recon = pq_reconstruct(&cb, table.row(i as usize)).unwrap();
                (i, squared_distance(&q, &recon))
            })
            .collect();
        oracle.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for (g, o) in got.iter().zip(&oracle) {
            assert_eq!(g.0, o.0);
            assert!((g.1 - o.1).abs() < 1e-4);
        }
    }

    #[test]
    fn pq_codebooks_round_trip_byte_identical() {
        let data = random_matrix(100, 6, 19);
        let cb = pq_train_with_iterations(&data, 3, 4, 5, 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.pq");
        let p2 = dir.path().join("b.pq");
        cb.save(&p1).unwrap();
        let loaded = PqCodebooks::load(&p1).unwrap();
        assert_eq!(cb, loaded);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn pq_load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pq");
        std::fs::write(&p, b"WHAT").unwrap();
        assert!(matches!(PqCodebooks::load(&p), Err(Error::Format { .. })));
    }
}
