//! Complex-sample primitives and phase arithmetic.
//!
//! Everything downstream works on fixed-size windows of baseband samples
//! ([`SampleChunk`]) and on angles kept in one of two half-open ranges,
//! `[-π, π)` or `[0, 2π)`.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One complex baseband sample (`re` = in-phase, `im` = quadrature).
pub type ComplexSample = Complex64;

/// Default chunk length fed to the phase estimator.
pub const DEFAULT_CHUNK_LEN: usize = 128;

/// A window of consecutive samples from one receive branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleChunk {
    samples: Vec<ComplexSample>,
    branch_id: usize,
}

impl SampleChunk {
    pub fn new(samples: Vec<ComplexSample>, branch_id: usize) -> Self {
        SampleChunk { samples, branch_id }
    }

    pub fn samples(&self) -> &[ComplexSample] {
        &self.samples
    }

    pub fn branch_id(&self) -> usize {
        self.branch_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<ComplexSample> {
        self.samples
    }
}

fn check_finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(x))
    }
}

/// Wraps a finite angle into `[-π, π)`.
pub fn wrap_to_pi(angle: f64) -> Result<f64> {
    check_finite(angle).map(wrap_pi)
}

/// Wraps a finite angle into `[0, 2π)`.
pub fn wrap_to_2pi(angle: f64) -> Result<f64> {
    check_finite(angle).map(wrap_2pi)
}

/// Smallest absolute difference between two angles, in `[0, π]`.
pub fn circular_distance(a: f64, b: f64) -> Result<f64> {
    check_finite(a)?;
    check_finite(b)?;
    Ok(circ_dist(a, b))
}

// Unchecked variants for internal hot paths where finiteness is already known.

pub(crate) fn wrap_pi(angle: f64) -> f64 {
    let mut r = angle - TAU * ((angle + PI) / TAU).floor();
    if r >= PI {
        r -= TAU;
    }
    if r < -PI {
        r += TAU;
    }
    r
}

pub(crate) fn wrap_2pi(angle: f64) -> f64 {
    let mut r = angle - TAU * (angle / TAU).floor();
    if r >= TAU {
        r -= TAU;
    }
    if r < 0.0 {
        r += TAU;
    }
    r
}

pub(crate) fn circ_dist(a: f64, b: f64) -> f64 {
    wrap_pi(a - b).abs()
}

/// Multiplies every sample by `e^{jθ}`.
pub fn rotate_chunk(chunk: &SampleChunk, theta: f64) -> SampleChunk {
    SampleChunk {
        samples: rotate_samples(&chunk.samples, theta),
        branch_id: chunk.branch_id,
    }
}

pub(crate) fn rotate_samples(samples: &[ComplexSample], theta: f64) -> Vec<ComplexSample> {
    let phasor = Complex64::from_polar(1.0, theta);
    samples.iter().map(|&s| s * phasor).collect()
}

/// Root-mean-square magnitude over the chunk.
pub fn rms_amplitude(chunk: &SampleChunk) -> f64 {
    rms(&chunk.samples)
}

pub(crate) fn rms(samples: &[ComplexSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    mean_power(samples).sqrt()
}

pub(crate) fn mean_power(samples: &[ComplexSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64
}

/// Splits a stream into consecutive, non-overlapping chunks of `chunk_len`
/// samples. A trailing partial window is dropped.
pub fn chunk_stream(
    samples: &[ComplexSample],
    chunk_len: usize,
    branch_id: usize,
) -> Result<Vec<SampleChunk>> {
    if chunk_len == 0 {
        return Err(Error::invalid("chunk length must be at least 1"));
    }
    Ok(samples
        .chunks_exact(chunk_len)
        .map(|w| SampleChunk::new(w.to_vec(), branch_id))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> ComplexSample {
        Complex64::new(re, im)
    }

    #[test]
    fn wrap_examples() {
        assert!((wrap_to_pi(3.0 * PI / 2.0).unwrap() + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_to_pi(0.0).unwrap(), 0.0);
        // Repeated subtraction oracle for -5π.
        let mut x = -5.0 * PI;
        while x < -PI {
            x += TAU;
        }
        assert!((wrap_to_pi(-5.0 * PI).unwrap() - x).abs() < 1e-12);
        assert!((x + PI).abs() < 1e-12);

        assert!((wrap_to_2pi(-PI / 2.0).unwrap() - 3.0 * PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_to_2pi(TAU).unwrap(), 0.0);
        assert!((wrap_to_2pi(7.0).unwrap() - (7.0 - TAU)).abs() < 1e-12);
        assert!((wrap_to_2pi(7.0).unwrap() - 0.7168).abs() < 1e-4);
    }

    #[test]
    fn wrap_rejects_non_finite() {
        assert!(matches!(wrap_to_pi(f64::NAN), Err(Error::NonFinite(_))));
        assert!(wrap_to_2pi(f64::INFINITY).is_err());
        assert!(circular_distance(0.0, f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn circular_distance_examples() {
        let (a, b) = (PI - 0.1, -PI + 0.1);
        let brute = [-1.0, 0.0, 1.0]
            .iter()
            .map(|k| (a - b + TAU * k).abs())
            .fold(f64::INFINITY, f64::min);
        assert!((circular_distance(a, b).unwrap() - brute).abs() < 1e-12);
        assert!((brute - 0.2).abs() < 1e-12);
        assert_eq!(circular_distance(1.3, 1.3).unwrap(), 0.0);
        assert!((circular_distance(0.0, PI).unwrap() - PI).abs() < 1e-12);
    }

    #[test]
    fn rotate_examples() {
        let chunk = SampleChunk::new(vec![c(1.0, 2.0), c(-0.5, 0.25), c(0.0, -3.0)], 1);
        assert_eq!(rotate_chunk(&chunk, 0.0), chunk);
        let neg = rotate_chunk(&chunk, PI);
        for (a, b) in neg.samples().iter().zip(chunk.samples()) {
            assert!((a + b).norm() < 1e-12);
        }
        let back = rotate_chunk(&rotate_chunk(&chunk, 0.83), -0.83);
        for (a, b) in back.samples().iter().zip(chunk.samples()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_eq!(neg.branch_id(), 1);
    }

    #[test]
    fn rms_examples() {
        assert_eq!(rms_amplitude(&SampleChunk::new(vec![c(1.0, 0.0); 8], 0)), 1.0);
        assert_eq!(rms_amplitude(&SampleChunk::new(vec![c(0.0, 0.0); 8], 0)), 0.0);
        let two = SampleChunk::new(vec![c(1.0, 0.0), c(0.0, 3.0)], 0);
        assert!((rms_amplitude(&two) - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn chunk_stream_examples() {
        let s = vec![c(1.0, 0.0); 300];
        let chunks = chunk_stream(&s, 128, 0).unwrap();
        assert_eq!(chunks.len(), 300 / 128);
        assert_eq!(300 - chunks.len() * 128, 44);
        assert_eq!(chunk_stream(&s[..128], 128, 0).unwrap().len(), 1);
        assert!(chunk_stream(&[], 128, 0).unwrap().is_empty());
        assert!(chunk_stream(&s, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn wraps_are_idempotent_and_congruent(a in -1e4f64..1e4) {
            let p = wrap_to_pi(a).unwrap();
            let q = wrap_to_2pi(a).unwrap();
            prop_assert!((-PI..PI).contains(&p));
            prop_assert!((0.0..TAU).contains(&q));
            prop_assert_eq!(wrap_to_pi(p).unwrap(), p);
            prop_assert_eq!(wrap_to_2pi(q).unwrap(), q);
            let k = (p - q) / TAU;
            prop_assert!((k - k.round()).abs() < 1e-9);
            prop_assert!(circular_distance(p, q).unwrap() < 1e-9);
            let k = (a - p) / TAU;
            prop_assert!((k - k.round()).abs() < 1e-9);
        }

        #[test]
        fn circular_distance_is_min_over_shifts(a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let d = circular_distance(a, b).unwrap();
            prop_assert!((0.0..=PI).contains(&d));
            let brute = (-8..=8)
                .map(|k| (a - b + TAU * k as f64).abs())
                .fold(f64::INFINITY, f64::min);
            prop_assert!((d - brute).abs() < 1e-9);
        }

        #[test]
        fn rotation_preserves_rms(
            pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..64),
            theta in -10.0f64..10.0,
        ) {
            let chunk = SampleChunk::new(pts.iter().map(|&(i, q)| c(i, q)).collect(), 0);
            let r0 = rms_amplitude(&chunk);
            let r1 = rms_amplitude(&rotate_chunk(&chunk, theta));
            prop_assert!((r0 - r1).abs() <= 1e-12 * r0.max(1e-300));
        }

        #[test]
        fn chunk_stream_lengths(n in 0usize..1000, m in 1usize..200) {
            let s = vec![c(0.5, -0.5); n];
            let chunks = chunk_stream(&s, m, 3).unwrap();
            prop_assert_eq!(chunks.len(), n / m);
            prop_assert!(chunks.iter().all(|ch| ch.len() == m && ch.branch_id() == 3));
        }
    }
}
