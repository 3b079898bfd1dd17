//! Labelled training data for the phase estimator.
//!
//! A capture session sends random unit-modulus samples through two static
//! branches. Each received chunk is labelled by cross-correlating it with
//! the known transmitted chunk; the label is the difference of the two
//! branch phase shifts. Because a static channel yields nearly constant
//! labels, every record is then rotated per branch by a random phase and
//! its label adjusted accordingly.
//!
//! # File format
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `DBDS`                           |
//! | 4      | 4    | version (`u32`, currently 1)           |
//! | 8      | 4    | chunk length `M` (`u32`)               |
//! | 12     | 4    | antennas `N` (`u32`)                   |
//! | 16     | 8    | record count (`u64`)                   |
//! | 24     | ...  | records                                |
//!
//! Each record is `2·M·N + 2` binary32 values: the packed input tensor
//! followed by the `[-π, π)` label and the `[0, 2π)` label.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{apply_branch_channel, snr_to_noise_psd, BranchChannel};
use crate::error::{Error, Result};
use crate::phasecore::{wrap_2pi, wrap_pi, SampleChunk, DEFAULT_CHUNK_LEN};
use crate::seed::sub_seed;

/// Receive antennas handled by the estimator.
pub const N_ANTENNAS: usize = 2;
/// Largest lag searched (both directions) when labelling by correlation.
pub const LABEL_MAX_LAG: usize = 16;

const MAGIC: &[u8; 4] = b"DBDS";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

/// One training example: a packed `2×M×N` tensor plus the relative phase
/// in both label ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub input: Vec<f32>,
    pub label_pi: f32,
    pub label_2pi: f32,
}

impl LabeledRecord {
    /// Builds a record from a relative phase, deriving both labels.
    pub fn new(input: Vec<f32>, delta: f64) -> Self {
        let (label_pi, label_2pi) = labels(delta);
        LabeledRecord {
            input,
            label_pi,
            label_2pi,
        }
    }

    pub fn chunk_len(&self) -> usize {
        self.input.len() / (2 * N_ANTENNAS)
    }
}

fn labels(delta: f64) -> (f32, f32) {
    let pi_label = wrap_pi(delta) as f32;
    (pi_label, wrap_2pi(pi_label as f64) as f32)
}

/// Unit-modulus samples with independent uniform phases.
pub fn random_unit_samples(n: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Complex64::from_polar(1.0, rng.random_range(-PI..PI)))
        .collect()
}

/// Phase of the peak of the cross-correlation between a received chunk
/// and the known transmitted chunk, searched over lags up to
/// [`LABEL_MAX_LAG`].
pub fn label_phase_shift(received: &SampleChunk, tx_reference: &SampleChunk) -> Result<f64> {
    let rx = received.samples();
    let tx = tx_reference.samples();
    if rx.len() != tx.len() {
        return Err(Error::LengthMismatch {
            expected: tx.len(),
            actual: rx.len(),
        });
    }
    if tx.iter().all(|s| s.norm_sqr() == 0.0) {
        return Err(Error::ZeroEnergy);
    }
    let m = tx.len() as isize;
    let max_lag = (LABEL_MAX_LAG as isize).min(m - 1);
    let mut best = Complex64::new(0.0, 0.0);
    let mut best_mag = -1.0;
    for lag in -max_lag..=max_lag {
        let mut acc = Complex64::new(0.0, 0.0);
        for n in 0..m {
            let k = n + lag;
            if (0..m).contains(&k) {
                acc += rx[k as usize] * tx[n as usize].conj();
            }
        }
        let mag = acc.norm_sqr();
        if mag > best_mag {
            best_mag = mag;
            best = acc;
        }
    }
    Ok(wrap_pi(best.arg()))
}

/// Packs two branch chunks into a `2×M×N` tensor laid out as
/// `[row][time][antenna]` with row 0 = I and row 1 = Q.
pub fn pack_input(chunk_b1: &SampleChunk, chunk_b2: &SampleChunk) -> Result<Vec<f32>> {
    pack_samples(chunk_b1.samples(), chunk_b2.samples())
}

pub(crate) fn pack_samples(b1: &[Complex64], b2: &[Complex64]) -> Result<Vec<f32>> {
    if b1.len() != b2.len() {
        return Err(Error::LengthMismatch {
            expected: b1.len(),
            actual: b2.len(),
        });
    }
    let m = b1.len();
    let mut out = vec![0f32; 2 * m * N_ANTENNAS];
    for (a, branch) in [b1, b2].into_iter().enumerate() {
        for (t, s) in branch.iter().enumerate() {
            out[t * N_ANTENNAS + a] = s.re as f32;
            out[m * N_ANTENNAS + t * N_ANTENNAS + a] = s.im as f32;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_input`].
pub fn unpack_input(input: &[f32]) -> Result<(SampleChunk, SampleChunk)> {
    if !input.len().is_multiple_of(2 * N_ANTENNAS) {
        return Err(Error::Shape(format!(
            "{} values is not a 2×M×{N_ANTENNAS} tensor",
            input.len()
        )));
    }
    let m = input.len() / (2 * N_ANTENNAS);
    let branch = |a: usize| {
        let samples = (0..m)
            .map(|t| {
                Complex64::new(
                    input[t * N_ANTENNAS + a] as f64,
                    input[m * N_ANTENNAS + t * N_ANTENNAS + a] as f64,
                )
            })
            .collect();
        SampleChunk::new(samples, a)
    };
    Ok((branch(0), branch(1)))
}

/// Labels a pair of aligned branch chunks against the transmitted chunk.
pub fn make_labeled_record(
    chunk_b1: &SampleChunk,
    chunk_b2: &SampleChunk,
    tx_reference: &SampleChunk,
) -> Result<LabeledRecord> {
    let phi1 = label_phase_shift(chunk_b1, tx_reference)?;
    let phi2 = label_phase_shift(chunk_b2, tx_reference)?;
    Ok(LabeledRecord::new(pack_input(chunk_b1, chunk_b2)?, phi2 - phi1))
}

/// Rotates branch 1 by `rho1` and branch 2 by `rho2`; the label moves by
/// `rho2 - rho1`.
pub fn augment_with(record: &LabeledRecord, rho1: f64, rho2: f64) -> LabeledRecord {
    let m = record.chunk_len();
    let mut input = record.input.clone();
    for (a, rho) in [rho1, rho2].into_iter().enumerate() {
        let (s, c) = rho.sin_cos();
        for t in 0..m {
            let i_idx = t * N_ANTENNAS + a;
            let q_idx = m * N_ANTENNAS + i_idx;
            let (i, q) = (input[i_idx] as f64, input[q_idx] as f64);
            input[i_idx] = (i * c - q * s) as f32;
            input[q_idx] = (i * s + q * c) as f32;
        }
    }
    LabeledRecord::new(input, record.label_pi as f64 + rho2 - rho1)
}

/// Random per-branch phase augmentation with `ρ₁, ρ₂ ~ U[-π, π)`.
pub fn augment_record(record: &LabeledRecord, seed: u64) -> LabeledRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho1 = rng.random_range(-PI..PI);
    let rho2 = rng.random_range(-PI..PI);
    augment_with(record, rho1, rho2)
}

/// Shuffled 0.64 / 0.16 / 0.20 train / validation / test partition.
pub fn split_dataset<T>(records: Vec<T>, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let n = records.len();
    if n < 5 {
        return Err(Error::invalid(format!("need at least 5 records to split, got {n}")));
    }
    let n_train = n * 64 / 100;
    let n_val = n * 16 / 100;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<Option<T>> = records.into_iter().map(Some).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut take = |idx: &[usize]| -> Vec<T> { idx.iter().map(|&i| slots[i].take().unwrap()).collect() };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

/// Parameters of a synthetic capture session.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub records: usize,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub seed: u64,
    pub chunk_len: usize,
    pub augment: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            records: 60_000,
            snr_min_db: 0.0,
            snr_max_db: 35.0,
            seed: 1,
            chunk_len: DEFAULT_CHUNK_LEN,
            augment: true,
        }
    }
}

/// Simulates a capture session and returns labelled (and optionally
/// augmented) records. Record `i` depends only on `(seed, i)`.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Vec<LabeledRecord>> {
    if cfg.chunk_len == 0 {
        return Err(Error::invalid("chunk length must be at least 1"));
    }
    if !(cfg.snr_min_db <= cfg.snr_max_db) {
        return Err(Error::invalid("snr_min must not exceed snr_max"));
    }
    // Static session channel: both branches fixed for the whole capture.
    let mut session = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0));
    let theta1 = session.random_range(-PI..PI);
    let theta2 = session.random_range(-PI..PI);
    (0..cfg.records)
        .map(|i| {
            let rs = sub_seed(cfg.seed, 1 + i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(rs);
            let snr = if cfg.snr_max_db > cfg.snr_min_db {
                rng.random_range(cfg.snr_min_db..cfg.snr_max_db)
            } else {
                cfg.snr_min_db
            };
            let n0 = snr_to_noise_psd(1.0, snr)?;
            let tx = random_unit_samples(cfg.chunk_len, sub_seed(rs, 1));
            let c1 = BranchChannel::new(1.0, theta1, n0)?;
            let c2 = BranchChannel::new(1.0, theta2, n0)?;
            let r1 = SampleChunk::new(apply_branch_channel(&tx, &c1, sub_seed(rs, 2)), 0);
            let r2 = SampleChunk::new(apply_branch_channel(&tx, &c2, sub_seed(rs, 3)), 1);
            let record = make_labeled_record(&r1, &r2, &SampleChunk::new(tx, 0))?;
            Ok(if cfg.augment {
                augment_record(&record, sub_seed(rs, 4))
            } else {
                record
            })
        })
        .collect()
}

/// In-memory form of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub chunk_len: usize,
    pub antennas: usize,
    pub records: Vec<LabeledRecord>,
}

impl DatasetFile {
    pub fn new(chunk_len: usize, records: Vec<LabeledRecord>) -> Result<Self> {
        let want = 2 * chunk_len * N_ANTENNAS;
        if let Some(bad) = records.iter().find(|r| r.input.len() != want) {
            return Err(Error::LengthMismatch {
                expected: want,
                actual: bad.input.len(),
            });
        }
        Ok(DatasetFile {
            chunk_len,
            antennas: N_ANTENNAS,
            records,
        })
    }

    fn record_values(&self) -> usize {
        2 * self.chunk_len * self.antennas + 2
    }
}

pub fn write_dataset(path: impl AsRef<Path>, file: &DatasetFile) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(file.chunk_len as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(file.antennas as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(file.records.len() as u64).to_le_bytes()).map_err(io)?;
    for r in &file.records {
        for v in r.input.iter().chain([&r.label_pi, &r.label_2pi]) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetFile> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let f = File::open(path).map_err(io)?;
    let found = f.metadata().map_err(io)?.len();
    let mut r = BufReader::new(f);
    if found < HEADER_LEN {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            found,
        });
    }
    let mut header = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut header).map_err(io)?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format(format!("bad dataset magic {:?}", &header[0..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let chunk_len = u32_at(8) as usize;
    let antennas = u32_at(12) as usize;
    if antennas != N_ANTENNAS || chunk_len == 0 {
        return Err(Error::Format(format!(
            "unsupported tensor shape M={chunk_len}, N={antennas}"
        )));
    }
    let count = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let per_record = (2 * chunk_len * antennas + 2) as u64;
    let needed = HEADER_LEN + count * per_record * 4;
    if found < needed {
        return Err(Error::Truncated { needed, found });
    }
    if found > needed {
        return Err(Error::Format(format!("{} trailing bytes", found - needed)));
    }
    let mut buf = vec![0u8; (per_record * 4) as usize];
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(io)?;
        let mut vals: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let label_2pi = vals.pop().unwrap();
        let label_pi = vals.pop().unwrap();
        records.push(LabeledRecord {
            input: vals,
            label_pi,
            label_2pi,
        });
    }
    let file = DatasetFile {
        chunk_len,
        antennas,
        records,
    };
    debug_assert_eq!(file.record_values() as u64, per_record);
    Ok(file)
}
