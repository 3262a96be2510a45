//! Synthetic problem instances: planted low-rank factors, Gaussian sensing
//! ensembles, exact quadratic measurements, and the streaming covariance
//! sketch that approximates them.
//!
//! Reproducibility contract: all randomness flows through a ChaCha8 stream
//! seeded with a caller-supplied 64-bit seed. Within one build of this crate
//! the draws are bit-reproducible; cross-implementation bit-exactness is not
//! promised. Concurrent trials must use distinct derived seeds, conventionally
//! `base_seed ^ trial_index`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::svd_small;

/// Name of the RNG algorithm backing every sampler in this module.
pub const GENERATOR_ID: &str = "chacha8";

/// Magic bytes of the flat binary ensemble/measurement layout.
pub const FILE_MAGIC: &[u8; 4] = b"R1FM";

/// Current version of the flat binary layout.
pub const FILE_VERSION: u32 = 1;

/// Derives the seed for trial `trial_index` from a base seed.
pub fn derive_trial_seed(base_seed: u64, trial_index: u64) -> u64 {
    base_seed ^ trial_index
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// FNV-1a over the identifying fields of an ensemble. Cheap, stable, and
/// good enough to catch mismatched (ensemble, measurement) pairs early.
fn fingerprint_of(seed: u64, m: usize, n: usize, generator_id: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    eat(&seed.to_le_bytes());
    eat(&(m as u64).to_le_bytes());
    eat(&(n as u64).to_le_bytes());
    eat(generator_id.as_bytes());
    h
}

/// Samples an n x r matrix with orthonormal columns from the
/// rotation-invariant distribution (QR of a Gaussian matrix, with the sign
/// of the triangular factor's diagonal folded in).
fn haar_orthonormal(rng: &mut ChaCha8Rng, nrows: usize, ncols: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(nrows, ncols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let rdiag: Vec<f64> = (0..ncols).map(|j| qr.r()[(j, j)]).collect();
    let mut q = qr.q();
    for (j, d) in rdiag.iter().enumerate() {
        if *d < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

/// The planted factor with a known singular spectrum.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    n: usize,
    r: usize,
    x: DMatrix<f64>,
    sigma: Vec<f64>,
    kappa: f64,
}

impl GroundTruth {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    /// The planted n x r factor.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Singular values, descending.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Condition number of the planted PSD matrix: `sigma_1^2 / sigma_r^2`.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Smallest squared singular value of the factor.
    pub fn sigma_r_sq(&self) -> f64 {
        let s = self.sigma[self.r - 1];
        s * s
    }

    /// Squared Frobenius norm of the factor (sum of squared singular values).
    pub fn frob_sq(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum()
    }
}

/// Builds a planted factor `U * diag(singular_values) * W^T` with Haar
/// orthonormal `U` (n x r) and `W` (r x r), so the singular spectrum is
/// exactly the one requested.
pub fn generate_ground_truth(
    n: usize,
    r: usize,
    singular_values: &[f64],
    seed: u64,
) -> Result<GroundTruth> {
    if r == 0 || r > n {
        return Err(Error::invalid(format!(
            "rank must satisfy 1 <= r <= n, got r={r}, n={n}"
        )));
    }
    if singular_values.len() != r {
        return Err(Error::invalid(format!(
            "expected {r} singular values, got {}",
            singular_values.len()
        )));
    }
    if singular_values
        .iter()
        .any(|s| !(*s > 0.0) || !s.is_finite())
    {
        return Err(Error::invalid(
            "singular values must be strictly positive and finite",
        ));
    }

    let mut sigma = singular_values.to_vec();
    sigma.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));

    let mut rng = rng_for(seed);
    let u = haar_orthonormal(&mut rng, n, r);
    let w = haar_orthonormal(&mut rng, r, r);

    let mut scaled = u;
    for (mut col, s) in scaled.column_iter_mut().zip(&sigma) {
        col.scale_mut(*s);
    }
    let x = scaled * w.transpose();

    let kappa = (sigma[0] / sigma[r - 1]).powi(2);
    Ok(GroundTruth {
        n,
        r,
        x,
        sigma,
        kappa,
    })
}

/// Recomputes the condition number from the cached spectrum.
pub fn condition_number(gt: &GroundTruth) -> f64 {
    gt.kappa()
}

/// Recomputes the singular values of an n x r factor through the r x r Gram
/// matrix. Used to cross-check cached spectra.
pub fn singular_values_of(factor: &DMatrix<f64>) -> Result<Vec<f64>> {
    let gram = factor.tr_mul(factor);
    let svd = svd_small(&gram)?;
    Ok(svd.sigma.iter().map(|s| s.max(0.0).sqrt()).collect())
}

// ---------------------------------------------------------------------------
// Sensing ensemble
// ---------------------------------------------------------------------------

/// `m` Gaussian sensing vectors plus the seed that produced them.
///
/// Vectors are stored one per column (n x m) so that each sensing vector is
/// contiguous; logically the ensemble is the m x n stack of rows `a_i`.
#[derive(Debug, Clone)]
pub struct SensingEnsemble {
    m: usize,
    n: usize,
    vectors: DMatrix<f64>,
    seed: u64,
    generator_id: String,
}

impl SensingEnsemble {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn generator_id(&self) -> &str {
        &self.generator_id
    }

    /// Sensing vector `a_i` as a column view.
    pub fn vector(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        self.vectors.column(i)
    }

    /// n x m matrix whose column `i` is `a_i`.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    /// 64-bit hash binding measurements to this ensemble.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_of(self.seed, self.m, self.n, &self.generator_id)
    }

    /// Builds an ensemble from explicit sensing vectors, one slice per `a_i`.
    /// The seed is provenance metadata only; it still participates in the
    /// fingerprint, so distinct seeds give distinct bindings.
    pub fn from_vectors(rows: &[impl AsRef<[f64]>], seed: u64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("ensemble must have m >= 1"));
        }
        let n = rows[0].as_ref().len();
        let mut vectors = DMatrix::zeros(n, rows.len());
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n {
                return Err(Error::invalid(format!(
                    "sensing vector {i} has dimension {}, expected {n}",
                    row.len()
                )));
            }
            vectors.column_mut(i).copy_from_slice(row);
        }
        Self::from_parts(vectors, seed)
    }

    fn from_parts(vectors: DMatrix<f64>, seed: u64) -> Result<Self> {
        let (n, m) = (vectors.nrows(), vectors.ncols());
        if m == 0 || n == 0 {
            return Err(Error::invalid("ensemble must have m >= 1 and n >= 1"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ensemble vectors must be finite"));
        }
        Ok(Self {
            m,
            n,
            vectors,
            seed,
            generator_id: GENERATOR_ID.to_string(),
        })
    }
}

/// Draws `m * n` standard normal values from a ChaCha8 stream seeded by
/// `seed`, laid out vector by vector. Bit-reproducible for fixed
/// `(generator_id, seed, m, n)` within one build.
pub fn sample_sensing_ensemble(m: usize, n: usize, seed: u64) -> Result<SensingEnsemble> {
    if m == 0 || n == 0 {
        return Err(Error::invalid(format!(
            "ensemble requires m >= 1 and n >= 1, got m={m}, n={n}"
        )));
    }
    let mut rng = rng_for(seed);
    let mut vectors = DMatrix::zeros(n, m);
    for i in 0..m {
        for k in 0..n {
            vectors[(k, i)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    SensingEnsemble::from_parts(vectors, seed)
}

// ---------------------------------------------------------------------------
// Measurements
// ---------------------------------------------------------------------------

/// The `m` nonnegative measurement scalars, bound to their ensemble by
/// fingerprint.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    y: Vec<f64>,
    ensemble_fingerprint: u64,
}

impl MeasurementSet {
    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn ensemble_fingerprint(&self) -> u64 {
        self.ensemble_fingerprint
    }

    /// Checks that this measurement set was produced from `ens`.
    pub fn check_bound_to(&self, ens: &SensingEnsemble) -> Result<()> {
        if self.ensemble_fingerprint != ens.fingerprint() {
            return Err(Error::invalid(
                "measurement set is not bound to this sensing ensemble \
                 (fingerprint mismatch)",
            ));
        }
        if self.y.len() != ens.m() {
            return Err(Error::invalid(format!(
                "measurement count {} does not match ensemble m={}",
                self.y.len(),
                ens.m()
            )));
        }
        Ok(())
    }

    fn from_values(y: Vec<f64>, fingerprint: u64) -> Result<Self> {
        if y.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "measurements must be finite and nonnegative",
            ));
        }
        Ok(Self {
            y,
            ensemble_fingerprint: fingerprint,
        })
    }
}

/// Exact quadratic measurements `y_i = ||a_i^T X||_2^2`.
pub fn measure(gt: &GroundTruth, ens: &SensingEnsemble) -> Result<MeasurementSet> {
    measure_factor(gt.factor(), ens)
}

/// Exact quadratic measurements of an arbitrary factor.
pub fn measure_factor(factor: &DMatrix<f64>, ens: &SensingEnsemble) -> Result<MeasurementSet> {
    if factor.nrows() != ens.n() {
        return Err(Error::invalid(format!(
            "factor dimension {} does not match ensemble n={}",
            factor.nrows(),
            ens.n()
        )));
    }
    // b = A^T X stacks the r dot products per sensing vector.
    let b = ens.vectors().tr_mul(factor);
    let y: Vec<f64> = (0..ens.m()).map(|i| b.row(i).norm_squared()).collect();
    MeasurementSet::from_values(y, ens.fingerprint())
}

/// Streaming covariance sketch `y_i = (1/|T|) sum_t (a_i^T x_t)^2`.
///
/// One pass over the stream with `O(m)` accumulator state.
pub fn covariance_sketch<I>(data_stream: I, ens: &SensingEnsemble) -> Result<MeasurementSet>
where
    I: IntoIterator,
    I::Item: AsRef<[f64]>,
{
    let m = ens.m();
    let n = ens.n();
    let mut acc = vec![0.0_f64; m];
    let mut count = 0_u64;
    let mut projected = DVector::<f64>::zeros(m);

    for sample in data_stream {
        let s = sample.as_ref();
        if s.len() != n {
            return Err(Error::invalid(format!(
                "stream sample has dimension {}, expected {n}",
                s.len()
            )));
        }
        let x = DVector::from_column_slice(s);
        projected.gemv_tr(1.0, ens.vectors(), &x, 0.0);
        for (a, z) in acc.iter_mut().zip(projected.iter()) {
            *a += z * z;
        }
        count += 1;
    }

    if count == 0 {
        return Err(Error::EmptyInput("covariance sketch stream".into()));
    }
    let inv = 1.0 / count as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    MeasurementSet::from_values(acc, ens.fingerprint())
}

/// Draws a length-`len` stream of samples from `N(0, X X^T)` where `X` is the
/// planted factor, as `x_t = X g_t` with `g_t ~ N(0, I_r)`.
pub fn sample_covariance_stream(gt: &GroundTruth, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed);
    let r = gt.rank();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let g = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = gt.factor() * g;
        out.push(x.as_slice().to_vec());
    }
    out
}

// ---------------------------------------------------------------------------
// Flat binary save/load
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FileHeader {
    m: u64,
    n: u64,
    seed: u64,
}

fn write_header<W: Write>(w: &mut W, h: &FileHeader) -> Result<()> {
    w.write_all(FILE_MAGIC)?;
    w.write_all(&FILE_VERSION.to_le_bytes())?;
    w.write_all(&h.m.to_le_bytes())?;
    w.write_all(&h.n.to_le_bytes())?;
    w.write_all(&h.seed.to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<FileHeader> {
    let mut magic = [0_u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FILE_MAGIC {
        return Err(Error::MalformedFile("bad magic bytes".into()));
    }
    let mut buf4 = [0_u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != FILE_VERSION {
        return Err(Error::MalformedFile(format!(
            "unsupported file version {version}"
        )));
    }
    let mut buf8 = [0_u8; 8];
    r.read_exact(&mut buf8)?;
    let m = u64::from_le_bytes(buf8);
    r.read_exact(&mut buf8)?;
    let n = u64::from_le_bytes(buf8);
    r.read_exact(&mut buf8)?;
    let seed = u64::from_le_bytes(buf8);
    Ok(FileHeader { m, n, seed })
}

fn write_payload<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_payload<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut buf = [0_u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)
            .map_err(|_| Error::MalformedFile("truncated payload".into()))?;
        out.push(f64::from_le_bytes(buf));
    }
    let mut extra = [0_u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(out),
        _ => Err(Error::MalformedFile("trailing bytes after payload".into())),
    }
}

/// Writes an ensemble: 32-byte header then the m x n rows `a_i` row-major,
/// little-endian f64.
pub fn write_ensemble<W: Write>(w: &mut W, ens: &SensingEnsemble) -> Result<()> {
    write_header(
        w,
        &FileHeader {
            m: ens.m() as u64,
            n: ens.n() as u64,
            seed: ens.seed(),
        },
    )?;
    // Column-major over the n x m storage, i.e. one sensing vector at a time,
    // which is exactly row-major for the logical m x n stack.
    write_payload(w, ens.vectors.iter().copied())
}

/// Reads an ensemble written by [`write_ensemble`].
pub fn read_ensemble<R: Read>(r: &mut R) -> Result<SensingEnsemble> {
    let h = read_header(r)?;
    let (m, n) = (h.m as usize, h.n as usize);
    let data = read_payload(
        r,
        m.checked_mul(n)
            .ok_or_else(|| Error::MalformedFile("payload size overflow".into()))?,
    )?;
    let vectors = DMatrix::from_column_slice(n, m, &data);
    SensingEnsemble::from_parts(vectors, h.seed)
}

/// Writes a measurement set with the header of the ensemble it is bound to,
/// followed by the m measurement scalars.
pub fn write_measurements<W: Write>(
    w: &mut W,
    y: &MeasurementSet,
    ens: &SensingEnsemble,
) -> Result<()> {
    y.check_bound_to(ens)?;
    write_header(
        w,
        &FileHeader {
            m: ens.m() as u64,
            n: ens.n() as u64,
            seed: ens.seed(),
        },
    )?;
    write_payload(w, y.values().iter().copied())
}

/// Reads a measurement set; the binding fingerprint is reconstructed from the
/// header fields.
pub fn read_measurements<R: Read>(r: &mut R) -> Result<MeasurementSet> {
    let h = read_header(r)?;
    let y = read_payload(r, h.m as usize)?;
    MeasurementSet::from_values(
        y,
        fingerprint_of(h.seed, h.m as usize, h.n as usize, GENERATOR_ID),
    )
}

pub fn save_ensemble(path: impl AsRef<Path>, ens: &SensingEnsemble) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ensemble(&mut w, ens)?;
    w.flush()?;
    Ok(())
}

pub fn load_ensemble(path: impl AsRef<Path>) -> Result<SensingEnsemble> {
    read_ensemble(&mut BufReader::new(File::open(path)?))
}

pub fn save_measurements(
    path: impl AsRef<Path>,
    y: &MeasurementSet,
    ens: &SensingEnsemble,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_measurements(&mut w, y, ens)?;
    w.flush()?;
    Ok(())
}

pub fn load_measurements(path: impl AsRef<Path>) -> Result<MeasurementSet> {
    read_measurements(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_frobenius_is_sigma() {
        let gt = generate_ground_truth(3, 1, &[2.0], 11).unwrap();
        assert!((gt.factor().norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_matches_requested_spectrum() {
        let gt = generate_ground_truth(4, 2, &[2.0, 1.0], 5).unwrap();
        assert!((gt.kappa() - 4.0).abs() < 1e-10);
        assert!((condition_number(&gt) - 4.0).abs() < 1e-10);

        let flat = generate_ground_truth(4, 2, &[1.0, 1.0], 5).unwrap();
        assert!((condition_number(&flat) - 1.0).abs() < 1e-12);
        let spread = generate_ground_truth(4, 2, &[3.0, 1.0], 5).unwrap();
        assert!((condition_number(&spread) - 9.0).abs() < 1e-10);
    }

    #[test]
    fn ground_truth_rejects_bad_arguments() {
        assert!(generate_ground_truth(2, 3, &[1.0, 1.0, 1.0], 0).is_err());
        assert!(generate_ground_truth(3, 1, &[0.0], 0).is_err());
        assert!(generate_ground_truth(3, 1, &[-1.0], 0).is_err());
        assert!(generate_ground_truth(3, 2, &[1.0], 0).is_err());
    }

    #[test]
    fn ensemble_is_deterministic() {
        let a = sample_sensing_ensemble(2, 3, 7).unwrap();
        let b = sample_sensing_ensemble(2, 3, 7).unwrap();
        assert_eq!(a.vectors(), b.vectors());
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = sample_sensing_ensemble(2, 3, 8).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn measurements_are_nonnegative_and_bound() {
        let gt = generate_ground_truth(5, 2, &[1.5, 0.5], 3).unwrap();
        let ens = sample_sensing_ensemble(20, 5, 4).unwrap();
        let y = measure(&gt, &ens).unwrap();
        assert!(y.values().iter().all(|v| *v >= 0.0));
        y.check_bound_to(&ens).unwrap();
        let other = sample_sensing_ensemble(20, 5, 5).unwrap();
        assert!(y.check_bound_to(&other).is_err());
    }

    #[test]
    fn measure_dimension_mismatch() {
        let gt = generate_ground_truth(5, 1, &[1.0], 3).unwrap();
        let ens = sample_sensing_ensemble(4, 6, 4).unwrap();
        assert!(measure(&gt, &ens).is_err());
    }

    #[test]
    fn scalar_measurement_hand_case() {
        // n=2, r=1, a=(1,0), x=(2,0) -> y = 4.
        let ens = SensingEnsemble::from_vectors(&[[1.0, 0.0]], 0).unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[2.0, 0.0]);
        let y = measure_factor(&x, &ens).unwrap();
        assert_eq!(y.values(), &[4.0]);
    }

    #[test]
    fn sketch_single_sample_and_zero_stream() {
        let ens = sample_sensing_ensemble(6, 3, 9).unwrap();
        let x = vec![0.3, -1.0, 2.0];
        let y = covariance_sketch(std::iter::once(&x[..]), &ens).unwrap();
        for i in 0..6 {
            let dot: f64 = ens.vector(i).iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((y.values()[i] - dot * dot).abs() < 1e-12);
        }

        let zeros = vec![vec![0.0; 3]; 4];
        let y0 = covariance_sketch(&zeros, &ens).unwrap();
        assert!(y0.values().iter().all(|v| *v == 0.0));

        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(
            covariance_sketch(&empty, &ens),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn binary_roundtrip() {
        let ens = sample_sensing_ensemble(7, 4, 42).unwrap();
        let gt = generate_ground_truth(4, 2, &[1.0, 0.5], 1).unwrap();
        let y = measure(&gt, &ens).unwrap();

        let mut buf = Vec::new();
        write_ensemble(&mut buf, &ens).unwrap();
        assert_eq!(buf.len(), 32 + 7 * 4 * 8);
        let back = read_ensemble(&mut &buf[..]).unwrap();
        assert_eq!(back.vectors(), ens.vectors());
        assert_eq!(back.fingerprint(), ens.fingerprint());

        let mut ybuf = Vec::new();
        write_measurements(&mut ybuf, &y, &ens).unwrap();
        let yback = read_measurements(&mut &ybuf[..]).unwrap();
        assert_eq!(yback.values(), y.values());
        yback.check_bound_to(&ens).unwrap();
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let ens = sample_sensing_ensemble(3, 2, 1).unwrap();
        let mut buf = Vec::new();
        write_ensemble(&mut buf, &ens).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_ensemble(&mut &bad_magic[..]).is_err());

        let truncated = &buf[..buf.len() - 3];
        assert!(read_ensemble(&mut &truncated[..]).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_ensemble(&mut &trailing[..]).is_err());
    }
}
