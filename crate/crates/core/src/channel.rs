//! Per-branch slow flat fading with AWGN, carrier offset and optional
//! short multipath.
//!
//! A branch sees `R[n] = h · (S ∗ taps)[n] · e^{j2π f n} + N[n]` where the
//! noise is circularly-symmetric complex Gaussian with variance `N₀` per
//! complex sample.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::phasecore::wrap_pi;

/// Longest multipath FIR accepted.
pub const MAX_MULTIPATH_TAPS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BranchChannel {
    gain_mag: f64,
    gain_phase: f64,
    noise_psd: f64,
    freq_offset: f64,
    multipath_taps: Option<Vec<Complex64>>,
}

impl BranchChannel {
    pub fn new(gain_mag: f64, gain_phase: f64, noise_psd: f64) -> Result<Self> {
        if !(gain_mag > 0.0 && gain_mag.is_finite()) {
            return Err(Error::invalid(format!("gain magnitude must be > 0, got {gain_mag}")));
        }
        if !gain_phase.is_finite() {
            return Err(Error::NonFinite(gain_phase));
        }
        if !(noise_psd >= 0.0 && noise_psd.is_finite()) {
            return Err(Error::invalid(format!("noise PSD must be >= 0, got {noise_psd}")));
        }
        Ok(BranchChannel {
            gain_mag,
            gain_phase,
            noise_psd,
            freq_offset: 0.0,
            multipath_taps: None,
        })
    }

    pub fn with_freq_offset(mut self, offset: f64) -> Result<Self> {
        check_offset(offset)?;
        self.freq_offset = offset;
        Ok(self)
    }

    pub fn with_multipath(mut self, taps: Vec<Complex64>) -> Result<Self> {
        if taps.is_empty() || taps.len() > MAX_MULTIPATH_TAPS {
            return Err(Error::invalid(format!(
                "multipath needs 1..={MAX_MULTIPATH_TAPS} taps, got {}",
                taps.len()
            )));
        }
        self.multipath_taps = Some(taps);
        Ok(self)
    }

    pub fn gain_mag(&self) -> f64 {
        self.gain_mag
    }

    pub fn gain_phase(&self) -> f64 {
        self.gain_phase
    }

    pub fn noise_psd(&self) -> f64 {
        self.noise_psd
    }

    pub fn freq_offset(&self) -> f64 {
        self.freq_offset
    }

    pub fn multipath_taps(&self) -> Option<&[Complex64]> {
        self.multipath_taps.as_deref()
    }

    /// Complex gain `h = |h| e^{jθ}`.
    pub fn gain(&self) -> Complex64 {
        Complex64::from_polar(self.gain_mag, self.gain_phase)
    }
}

/// Signal and noise components of one received branch, kept apart so the
/// simulator can measure SNR exactly.
#[derive(Debug, Clone)]
pub struct ReceivedParts {
    pub signal: Vec<Complex64>,
    pub noise: Vec<Complex64>,
}

impl ReceivedParts {
    pub fn received(&self) -> Vec<Complex64> {
        self.signal.iter().zip(&self.noise).map(|(s, n)| s + n).collect()
    }
}

fn check_offset(offset: f64) -> Result<()> {
    if !offset.is_finite() {
        return Err(Error::NonFinite(offset));
    }
    if offset.abs() >= 0.5 {
        return Err(Error::invalid(format!(
            "frequency offset {offset} cycles/sample aliases (|f| must be < 0.5)"
        )));
    }
    Ok(())
}

/// Converts an SNR in dB into the noise variance per complex sample.
pub fn snr_to_noise_psd(signal_power: f64, snr_db: f64) -> Result<f64> {
    if !(signal_power > 0.0) {
        return Err(Error::invalid(format!("signal power must be > 0, got {signal_power}")));
    }
    Ok(signal_power / 10f64.powf(snr_db / 10.0))
}

/// Complex white Gaussian noise with variance `noise_psd` per sample.
pub fn awgn(n: usize, noise_psd: f64, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (noise_psd / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * sigma, im * sigma)
        })
        .collect()
}

/// Adds complex white Gaussian noise in place.
pub fn add_awgn(samples: &mut [Complex64], noise_psd: f64, seed: u64) {
    if noise_psd == 0.0 {
        return;
    }
    let noise = awgn(samples.len(), noise_psd, seed);
    for (s, n) in samples.iter_mut().zip(noise) {
        *s += n;
    }
}

/// Multiplies sample `n` by `e^{j2π·offset·n}`.
pub fn apply_frequency_offset(signal: &[Complex64], offset: f64) -> Result<Vec<Complex64>> {
    check_offset(offset)?;
    Ok(rotate_by_offset(signal, offset, 0))
}

fn rotate_by_offset(signal: &[Complex64], offset: f64, start: usize) -> Vec<Complex64> {
    if offset == 0.0 {
        return signal.to_vec();
    }
    signal
        .iter()
        .enumerate()
        .map(|(n, &s)| {
            // Reduce the phase before evaluating to keep precision on long runs.
            let cycles = (offset * (n + start) as f64).fract();
            s * Complex64::from_polar(1.0, TAU * cycles)
        })
        .collect()
}

fn fir(signal: &[Complex64], taps: &[Complex64]) -> Vec<Complex64> {
    (0..signal.len())
        .map(|n| {
            taps.iter()
                .enumerate()
                .filter(|(k, _)| *k <= n)
                .map(|(k, &t)| t * signal[n - k])
                .sum()
        })
        .collect()
}

/// Clean (noise-free) output of a branch channel.
pub fn branch_signal(signal: &[Complex64], ch: &BranchChannel) -> Vec<Complex64> {
    let h = ch.gain();
    let filtered = match &ch.multipath_taps {
        Some(taps) => fir(signal, taps),
        None => signal.to_vec(),
    };
    let scaled: Vec<Complex64> = filtered.iter().map(|&s| s * h).collect();
    rotate_by_offset(&scaled, ch.freq_offset, 0)
}

/// Passes `signal` through one branch, returning signal and noise parts.
pub fn apply_branch_channel_parts(signal: &[Complex64], ch: &BranchChannel, seed: u64) -> ReceivedParts {
    let clean = branch_signal(signal, ch);
    let noise = if ch.noise_psd > 0.0 {
        awgn(clean.len(), ch.noise_psd, seed)
    } else {
        vec![Complex64::new(0.0, 0.0); clean.len()]
    };
    ReceivedParts { signal: clean, noise }
}

/// Passes `signal` through one branch: `h·(S∗taps)·e^{j2πfn} + N`.
pub fn apply_branch_channel(signal: &[Complex64], ch: &BranchChannel, seed: u64) -> Vec<Complex64> {
    apply_branch_channel_parts(signal, ch, seed).received()
}

/// Piecewise-constant relative-phase trajectory, one value per chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingSchedule {
    values: Vec<f64>,
    start: f64,
    n_steps: usize,
}

impl FadingSchedule {
    /// Relative phase for every chunk, wrapped into `[-π, π)`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn step_height(&self) -> f64 {
        TAU / self.n_steps as f64
    }

    /// Unwrapped phase of the final plateau (`start + 2π`).
    pub fn end(&self) -> f64 {
        self.start + TAU
    }

    /// Phase for chunk `idx`; indices past the end hold the last plateau.
    pub fn at(&self, idx: usize) -> f64 {
        self.values[idx.min(self.values.len() - 1)]
    }
}

/// Stair-step relative-phase schedule: a random start in `[-π, π)`
/// followed by `n_steps` equal increments of `2π / n_steps`, so the run
/// sweeps the full circle and ends where it began (mod 2π).
///
/// The `n_steps + 1` plateaus share the chunks as evenly as possible.
pub fn stair_step_schedule(n_chunks: usize, n_steps: usize, seed: u64) -> Result<FadingSchedule> {
    if n_steps == 0 {
        return Err(Error::invalid("stair-step schedule needs at least one step"));
    }
    if n_chunks <= n_steps {
        return Err(Error::invalid(format!(
            "{n_chunks} chunks cannot hold {} plateaus",
            n_steps + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(-PI..PI);
    let height = TAU / n_steps as f64;
    let plateaus = n_steps + 1;
    let values = (0..n_chunks)
        .map(|c| {
            let p = c * plateaus / n_chunks;
            wrap_pi(start + p as f64 * height)
        })
        .collect();
    Ok(FadingSchedule {
        values,
        start,
        n_steps,
    })
}

/// Multiplies chunk `c` of `signal` by `e^{j·phases(c)}`.
pub fn apply_chunk_phases(signal: &[Complex64], chunk_len: usize, phases: impl Fn(usize) -> f64) -> Vec<Complex64> {
    signal
        .chunks(chunk_len)
        .enumerate()
        .flat_map(|(c, w)| {
            let p = Complex64::from_polar(1.0, phases(c));
            w.iter().map(move |&s| s * p)
        })
        .collect()
}
