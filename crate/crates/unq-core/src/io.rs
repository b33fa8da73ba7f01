//! Dataset file formats and synthetic data.
//!
//! Vector files use the classic `.fvecs` / `.bvecs` / `.ivecs` framing: each
//! record is a little-endian `i32` dimension followed by that many `f32`,
//! `u8`, or `i32` values. All records in one file must share a dimension.
//! Read errors report the byte offset of the field that failed.
//!
//! Encoded datasets use the `UNQC` container: magic, `u32` little-endian
//! item count, codebook count and codebook size, then one byte per
//! `(item, codebook)` in item-major order. An empty table is just the
//! 16-byte header.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::search::CodeTable;

pub const CODES_MAGIC: &[u8; 4] = b"UNQC";

/// Row-major integer matrix, the in-memory form of `.ivecs` files.
#[derive(Clone, Debug, PartialEq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl IntMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "IntMatrix::from_vec",
                format!("{} elements", rows * cols),
                format!("{}", data.len()),
            ));
        }
        Ok(IntMatrix { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[i32] {
        &self.data
    }
}

/// Shared framing parser. `elem_size` is the payload element width and
/// `parse` consumes exactly one element.
fn read_records<T>(
    path: &Path,
    elem_size: usize,
    parse: impl Fn(&[u8]) -> T,
) -> Result<(usize, usize, Vec<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0usize;
    let mut dim: Option<usize> = None;
    let mut rows = 0usize;
    let mut data = Vec::new();
    while offset < bytes.len() {
        if bytes.len() - offset < 4 {
            return Err(Error::format(
                path,
                offset as u64,
                "truncated dimension field",
            ));
        }
        let d = i32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"));
        if d <= 0 {
            return Err(Error::format(
                path,
                offset as u64,
                format!("non-positive dimension {d}"),
            ));
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::format(
                    path,
                    offset as u64,
                    format!("inconsistent dimension {d}, expected {expected}"),
                ));
            }
            _ => {}
        }
        offset += 4;
        let payload = d * elem_size;
        if bytes.len() - offset < payload {
            return Err(Error::format(
                path,
                offset as u64,
                "truncated record payload",
            ));
        }
        for e in 0..d {
            data.push(parse(
                &bytes[offset + e * elem_size..offset + (e + 1) * elem_size],
            ));
        }
        offset += payload;
        rows += 1;
    }
    Ok((rows, dim.unwrap_or(0), data))
}

pub fn read_fvecs(path: impl AsRef<Path>) -> Result<DenseMatrix<f32>> {
    let path = path.as_ref();
    let (rows, cols, data) = read_records(path, 4, |b| {
        f32::from_le_bytes(b.try_into().expect("4 bytes"))
    })?;
    DenseMatrix::from_vec(rows, cols, data)
}

pub fn write_fvecs(path: impl AsRef<Path>, matrix: &DenseMatrix<f32>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in 0..matrix.rows() {
        write_all(path, &mut w, &(matrix.cols() as i32).to_le_bytes())?;
        for &v in matrix.row(r) {
            write_all(path, &mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Byte vectors widen to `f32` on read.
pub fn read_bvecs(path: impl AsRef<Path>) -> Result<DenseMatrix<f32>> {
    let path = path.as_ref();
    let (rows, cols, data) = read_records(path, 1, |b| b[0] as f32)?;
    DenseMatrix::from_vec(rows, cols, data)
}

/// Writes byte vectors; every value must be an integer in `0..=255`.
pub fn write_bvecs(path: impl AsRef<Path>, matrix: &DenseMatrix<f32>) -> Result<()> {
    let path = path.as_ref();
    if let Some(&bad) = matrix
        .data()
        .iter()
        .find(|&&v| v.fract() != 0.0 || !(0.0..=255.0).contains(&v))
    {
        return Err(Error::InvalidConfig(format!(
            "bvecs requires integral values in 0..=255, found {bad}"
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in 0..matrix.rows() {
        write_all(path, &mut w, &(matrix.cols() as i32).to_le_bytes())?;
        let row: Vec<u8> = matrix.row(r).iter().map(|&v| v as u8).collect();
        write_all(path, &mut w, &row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ivecs(path: impl AsRef<Path>) -> Result<IntMatrix> {
    let path = path.as_ref();
    let (rows, cols, data) = read_records(path, 4, |b| {
        i32::from_le_bytes(b.try_into().expect("4 bytes"))
    })?;
    IntMatrix::from_vec(rows, cols, data)
}

pub fn write_ivecs(path: impl AsRef<Path>, matrix: &IntMatrix) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in 0..matrix.rows() {
        write_all(path, &mut w, &(matrix.cols() as i32).to_le_bytes())?;
        for &v in matrix.row(r) {
            write_all(path, &mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_all(path: &Path, w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_codes(path: impl AsRef<Path>, table: &CodeTable) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_all(path, &mut w, CODES_MAGIC)?;
    write_all(path, &mut w, &(table.len() as u32).to_le_bytes())?;
    write_all(path, &mut w, &(table.num_codebooks() as u32).to_le_bytes())?;
    write_all(path, &mut w, &(table.codebook_size() as u32).to_le_bytes())?;
    write_all(path, &mut w, table.codes())?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_codes(path: impl AsRef<Path>) -> Result<CodeTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != CODES_MAGIC {
        return Err(Error::format(path, 0, "bad magic, not a UNQC code file"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let m = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let k = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expected = 16 + n * m;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!(
                "expected {expected} bytes for {n} items x {m} codebooks, file has {}",
                bytes.len()
            ),
        ));
    }
    CodeTable::new(n, m, k, bytes[16..].to_vec()).map_err(|e| match e {
        Error::InvalidCode { code, size } => Error::format(
            path,
            16,
            format!("code {code} out of range for codebook size {size}"),
        ),
        other => other,
    })
}

/// Train, base and query splits of one synthetic dataset.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub train: DenseMatrix<f32>,
    pub base: DenseMatrix<f32>,
    pub queries: DenseMatrix<f32>,
}

const LATTICE_SPACING: f64 = 1.0;
const LATTICE_SLOTS: u32 = 10;

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    // Disjoint deterministic streams derived from one seed.
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn sample_split(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    means: &DenseMatrix<f64>,
    std: f64,
) -> DenseMatrix<f32> {
    let mut out = DenseMatrix::zeros(n, dim);
    for r in 0..n {
        let c = rng.random_range(0..means.rows());
        let mean = means.row(c);
        let row = out.row_mut(r);
        for j in 0..dim {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            row[j] = (mean[j] + std * z) as f32;
        }
    }
    out
}

/// Gaussian mixture with `n_components` components. Component means sit on
/// a centered integer lattice with unit spacing; the shared standard
/// deviation is a tenth of the spacing, so components are well separated.
/// Values stay within single digits, which keeps losses and gradient
/// magnitudes in a range the default learning rates handle. Train, base and
/// query splits come from disjoint random streams of the same seed and
/// therefore share the mixture but not the samples.
pub fn synth_dataset(
    n_train: usize,
    n_base: usize,
    n_query: usize,
    dim: usize,
    n_components: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    if dim == 0 || n_components == 0 {
        return Err(Error::InvalidConfig(
            "synthetic data needs a positive dimension and component count".into(),
        ));
    }
    let mut mean_rng = stream(seed, 0);
    let mut means = DenseMatrix::<f64>::zeros(n_components, dim);
    let center = (LATTICE_SLOTS - 1) as f64 / 2.0;
    for v in means.data_mut() {
        *v = LATTICE_SPACING * (mean_rng.random_range(0..LATTICE_SLOTS) as f64 - center);
    }
    let std = 0.1 * LATTICE_SPACING;
    Ok(DatasetBundle {
        train: sample_split(&mut stream(seed, 1), n_train, dim, &means, std),
        base: sample_split(&mut stream(seed, 2), n_base, dim, &means, std),
        queries: sample_split(&mut stream(seed, 3), n_query, dim, &means, std),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn fvecs_round_trip_preserves_bytes_and_values() {
        let dir = tmp();
        let p1 = dir.path().join("a.fvecs");
        let p2 = dir.path().join("b.fvecs");
        let m = DenseMatrix::from_vec(3, 2, vec![1.5, -2.25, 0.0, f32::MIN_POSITIVE, 1e30, -1e-30])
            .unwrap();
        write_fvecs(&p1, &m).unwrap();
        let r = read_fvecs(&p1).unwrap();
        assert_eq!(r, m);
        write_fvecs(&p2, &r).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bvecs_round_trip_and_range_validation() {
        let dir = tmp();
        let p = dir.path().join("a.bvecs");
        let m = DenseMatrix::from_vec(2, 3, vec![0.0, 255.0, 17.0, 1.0, 2.0, 3.0]).unwrap();
        write_bvecs(&p, &m).unwrap();
        assert_eq!(read_bvecs(&p).unwrap(), m);

        let bad = DenseMatrix::from_vec(1, 1, vec![256.0]).unwrap();
        assert!(write_bvecs(dir.path().join("bad.bvecs"), &bad).is_err());
        let frac = DenseMatrix::from_vec(1, 1, vec![3.5]).unwrap();
        assert!(write_bvecs(dir.path().join("frac.bvecs"), &frac).is_err());
    }

    #[test]
    fn ivecs_round_trip() {
        let dir = tmp();
        let p = dir.path().join("a.ivecs");
        let m = IntMatrix::from_vec(2, 2, vec![-5, 0, i32::MAX, 7]).unwrap();
        write_ivecs(&p, &m).unwrap();
        assert_eq!(read_ivecs(&p).unwrap(), m);
    }

    #[test]
    fn truncated_payload_reports_field_offset() {
        let dir = tmp();
        let p = dir.path().join("t.fvecs");
        // dim = 3 but only two floats follow.
        let mut bytes = 3i32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        match read_fvecs(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_dimension_reports_second_record() {
        let dir = tmp();
        let p = dir.path().join("d.fvecs");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        bytes.extend_from_slice(&3i32.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        match read_fvecs(&p) {
            Err(Error::Format {
                offset, message, ..
            }) => {
                assert_eq!(offset, 12);
                assert!(message.contains("inconsistent dimension"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_positive_dimension_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("z.fvecs");
        std::fs::write(&p, (-1i32).to_le_bytes()).unwrap();
        assert!(matches!(read_fvecs(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_file_reads_as_zero_rows() {
        let dir = tmp();
        let p = dir.path().join("e.fvecs");
        std::fs::write(&p, b"").unwrap();
        let m = read_fvecs(&p).unwrap();
        assert_eq!(m.rows(), 0);
    }

    #[test]
    fn codes_round_trip_and_empty_table_is_header_only() {
        let dir = tmp();
        let p = dir.path().join("c.unqc");
        let table = CodeTable::new(3, 2, 16, vec![0, 15, 7, 8, 1, 2]).unwrap();
        write_codes(&p, &table).unwrap();
        assert_eq!(read_codes(&p).unwrap(), table);

        let empty = CodeTable::new(0, 4, 256, vec![]).unwrap();
        let pe = dir.path().join("empty.unqc");
        write_codes(&pe, &empty).unwrap();
        assert_eq!(std::fs::metadata(&pe).unwrap().len(), 16);
        let back = read_codes(&pe).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.num_codebooks(), 4);
    }

    #[test]
    fn codes_with_out_of_range_values_fail_to_read() {
        let dir = tmp();
        let p = dir.path().join("bad.unqc");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CODES_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 9]); // 9 >= k = 4
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_codes(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn synth_is_deterministic_and_splits_differ() {
        let a = synth_dataset(20, 30, 10, 8, 4, 99).unwrap();
        let b = synth_dataset(20, 30, 10, 8, 4, 99).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.base, b.base);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.train.shape(), (20, 8));
        assert_eq!(a.base.shape(), (30, 8));
        assert_eq!(a.queries.shape(), (10, 8));
        // Different splits, different samples.
        assert_ne!(a.train.row(0), a.base.row(0));

        let c = synth_dataset(20, 30, 10, 8, 4, 100).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn synth_values_stay_near_the_lattice() {
        let d = synth_dataset(200, 0, 0, 4, 8, 7).unwrap();
        for &v in d.train.data() {
            // Means lie in [-4.5, 4.5], std is 0.1; 10 sigma of slack.
            assert!((-5.5..=5.5).contains(&v), "value {v} implausible");
        }
    }

    proptest! {
        #[test]
        fn fvecs_any_matrix_round_trips(rows in 0usize..6, cols in 1usize..5, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            let m = DenseMatrix::from_vec(rows, cols, data).unwrap();
            let dir = tmp();
            let p = dir.path().join("p.fvecs");
            write_fvecs(&p, &m).unwrap();
            let r = read_fvecs(&p).unwrap();
            if rows == 0 {
                prop_assert_eq!(r.rows(), 0);
            } else {
                prop_assert_eq!(r, m);
            }
        }

        #[test]
        fn codes_any_table_round_trips(n in 0usize..10, m in 1usize..5, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(1..=256usize);
            let codes: Vec<u8> = (0..n * m).map(|_| rng.random_range(0..k as u32) as u8).collect();
            let table = CodeTable::new(n, m, k, codes).unwrap();
            let dir = tmp();
            let p = dir.path().join("p.unqc");
            write_codes(&p, &table).unwrap();
            prop_assert_eq!(read_codes(&p).unwrap(), table);
        }
    }
}
