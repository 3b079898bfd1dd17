//! Bit sources, modulators/demodulators and bit-error accounting.
//!
//! The PSK family is differentially encoded so it can be decoded without
//! carrier recovery. 16-QAM is coherent and is decoded against the known
//! transmitted symbols (the evaluation harness always has them). GMSK is
//! decoded with a frequency discriminator.

use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Roll-off of the root-raised-cosine pulse used for PSK and QAM.
pub const RRC_ROLLOFF: f64 = 0.35;
/// Span of the root-raised-cosine pulse, in symbols.
pub const RRC_SPAN: usize = 8;
/// Default GMSK bandwidth-time product.
pub const GMSK_BT: f64 = 0.35;
/// Default GMSK oversampling.
pub const GMSK_SPS: usize = 4;
/// Span of the Gaussian frequency pulse, in symbols.
const GMSK_SPAN: usize = 4;
/// Symbols per block for reference-aided 16-QAM derotation.
pub const QAM_DEROTATION_BLOCK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModulationKind {
    Dbpsk,
    Dqpsk,
    D8psk,
    Qam16,
    Gmsk,
}

impl ModulationKind {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            ModulationKind::Dbpsk | ModulationKind::Gmsk => 1,
            ModulationKind::Dqpsk => 2,
            ModulationKind::D8psk => 3,
            ModulationKind::Qam16 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModulationKind::Dbpsk => "dbpsk",
            ModulationKind::Dqpsk => "dqpsk",
            ModulationKind::D8psk => "d8psk",
            ModulationKind::Qam16 => "qam16",
            ModulationKind::Gmsk => "gmsk",
        }
    }

    fn psk_order(self) -> Option<usize> {
        match self {
            ModulationKind::Dbpsk => Some(2),
            ModulationKind::Dqpsk => Some(4),
            ModulationKind::D8psk => Some(8),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModulationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModulationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dbpsk" => Ok(ModulationKind::Dbpsk),
            "dqpsk" => Ok(ModulationKind::Dqpsk),
            "d8psk" => Ok(ModulationKind::D8psk),
            "qam16" | "16qam" => Ok(ModulationKind::Qam16),
            "gmsk" => Ok(ModulationKind::Gmsk),
            other => Err(Error::invalid(format!("unknown modulation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationScheme {
    kind: ModulationKind,
    samples_per_symbol: usize,
    gmsk_bt: f64,
}

impl ModulationScheme {
    pub fn new(kind: ModulationKind, samples_per_symbol: usize) -> Result<Self> {
        Self::with_bt(kind, samples_per_symbol, GMSK_BT)
    }

    pub fn with_bt(kind: ModulationKind, samples_per_symbol: usize, gmsk_bt: f64) -> Result<Self> {
        if samples_per_symbol == 0 {
            return Err(Error::invalid("samples_per_symbol must be at least 1"));
        }
        if !(gmsk_bt > 0.0 && gmsk_bt <= 1.0) {
            return Err(Error::invalid(format!("GMSK BT {gmsk_bt} outside (0, 1]")));
        }
        Ok(ModulationScheme {
            kind,
            samples_per_symbol,
            gmsk_bt,
        })
    }

    /// GMSK with the default BT and oversampling.
    pub fn gmsk() -> Self {
        ModulationScheme {
            kind: ModulationKind::Gmsk,
            samples_per_symbol: GMSK_SPS,
            gmsk_bt: GMSK_BT,
        }
    }

    pub fn kind(&self) -> ModulationKind {
        self.kind
    }

    pub fn samples_per_symbol(&self) -> usize {
        self.samples_per_symbol
    }

    pub fn gmsk_bt(&self) -> f64 {
        self.gmsk_bt
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.kind.bits_per_symbol()
    }

    /// Extra samples beyond `symbols * sps` produced by the pulse filter.
    fn tail_len(&self) -> usize {
        match self.kind {
            ModulationKind::Gmsk => GMSK_SPAN * self.samples_per_symbol + 1,
            _ if self.samples_per_symbol > 1 => RRC_SPAN * self.samples_per_symbol,
            _ => 0,
        }
    }

    /// Number of transmitted symbol slots for `n_bits` (including the
    /// differential reference symbol for DPSK).
    fn symbol_slots(&self, n_bits: usize) -> usize {
        let data = n_bits / self.bits_per_symbol();
        if self.kind.psk_order().is_some() {
            data + 1
        } else {
            data
        }
    }

    /// Length of the waveform [`modulate`] produces for `n_bits` bits.
    pub fn sample_count(&self, n_bits: usize) -> usize {
        self.symbol_slots(n_bits) * self.samples_per_symbol + self.tail_len()
    }

    /// Inverse of [`ModulationScheme::sample_count`].
    pub fn bit_count(&self, n_samples: usize) -> Result<usize> {
        let tail = self.tail_len();
        let sps = self.samples_per_symbol;
        let bad = || Error::invalid(format!("{n_samples} samples is not a valid {} waveform length", self.kind));
        if n_samples < tail || !(n_samples - tail).is_multiple_of(sps) {
            return Err(bad());
        }
        let slots = (n_samples - tail) / sps;
        let data = if self.kind.psk_order().is_some() {
            slots.checked_sub(1).ok_or_else(bad)?
        } else {
            slots
        };
        Ok(data * self.bits_per_symbol())
    }
}

/// Bit-error statistics for one comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerReport {
    pub bits_compared: u64,
    pub bit_errors: u64,
    pub ber: f64,
}

impl BerReport {
    pub fn merge(&self, other: &BerReport) -> BerReport {
        let bits_compared = self.bits_compared + other.bits_compared;
        let bit_errors = self.bit_errors + other.bit_errors;
        BerReport {
            bits_compared,
            bit_errors,
            ber: bit_errors as f64 / bits_compared as f64,
        }
    }
}

/// Deterministic pseudo-random bit source.
pub fn generate_bits(n: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<bool>()).collect()
}

/// Exact Hamming distance between two equal-length bit strings.
pub fn count_bit_errors(tx: &[bool], rx: &[bool]) -> Result<BerReport> {
    if tx.len() != rx.len() {
        return Err(Error::LengthMismatch {
            expected: tx.len(),
            actual: rx.len(),
        });
    }
    if tx.is_empty() {
        return Err(Error::invalid("no bits to compare"));
    }
    let bit_errors = tx.iter().zip(rx).filter(|(a, b)| a != b).count() as u64;
    Ok(BerReport {
        bits_compared: tx.len() as u64,
        bit_errors,
        ber: bit_errors as f64 / tx.len() as f64,
    })
}

fn gray(k: usize) -> usize {
    k ^ (k >> 1)
}

fn gray_inverse(mut g: usize) -> usize {
    let mut k = g;
    while g > 0 {
        g >>= 1;
        k ^= g;
    }
    k
}

fn bits_to_uint(bits: &[bool]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
}

fn push_uint(out: &mut Vec<bool>, v: usize, width: usize) {
    for i in (0..width).rev() {
        out.push((v >> i) & 1 == 1);
    }
}

// Gray-coded amplitude levels for one 16-QAM rail: 00, 01, 11, 10.
const QAM_LEVELS: [f64; 4] = [-3.0, -1.0, 3.0, 1.0];

fn qam_scale() -> f64 {
    1.0 / 10f64.sqrt()
}

fn qam_level_bits(x: f64) -> usize {
    // Thresholds at -2, 0, +2 on the unnormalized grid.
    let x = x / qam_scale();
    
    if x < -2.0 {
        0
    } else if x < 0.0 {
        1
    } else if x < 2.0 {
        3
    } else {
        2
    }
}

fn check_bits(bits: &[bool], scheme: &ModulationScheme) -> Result<()> {
    let bps = scheme.bits_per_symbol();
    if !bits.len().is_multiple_of(bps) {
        return Err(Error::invalid(format!(
            "{} bits is not a multiple of {bps} bits/symbol for {}",
            bits.len(),
            scheme.kind
        )));
    }
    Ok(())
}

/// Maps bits to unit-energy constellation symbols at one sample per symbol.
///
/// For differential PSK the first symbol is the phase reference `1 + 0j`.
/// GMSK has no symbol constellation; its "symbols" are the NRZ levels ±1.
pub fn map_symbols(bits: &[bool], scheme: &ModulationScheme) -> Result<Vec<Complex64>> {
    check_bits(bits, scheme)?;
    let bps = scheme.bits_per_symbol();
    let groups = bits.chunks_exact(bps).map(bits_to_uint);
    Ok(match scheme.kind {
        ModulationKind::Dbpsk | ModulationKind::Dqpsk | ModulationKind::D8psk => {
            let order = scheme.kind.psk_order().unwrap();
            let mut phase_idx = 0usize;
            let mut out = Vec::with_capacity(bits.len() / bps + 1);
            out.push(Complex64::new(1.0, 0.0));
            for v in groups {
                phase_idx = (phase_idx + gray_inverse(v)) % order;
                out.push(Complex64::from_polar(1.0, 2.0 * PI * phase_idx as f64 / order as f64));
            }
            out
        }
        ModulationKind::Qam16 => groups
            .map(|v| {
                let s = qam_scale();
                Complex64::new(QAM_LEVELS[v >> 2] * s, QAM_LEVELS[v & 3] * s)
            })
            .collect(),
        ModulationKind::Gmsk => groups
            .map(|v| Complex64::new(if v == 1 { 1.0 } else { -1.0 }, 0.0))
            .collect(),
    })
}

/// Root-raised-cosine taps with unit peak matched-filter gain per sample:
/// the energy `Σh²` equals `sps`, so shaped unit-energy symbols have unit
/// average power.
pub fn rrc_taps(sps: usize, rolloff: f64, span: usize) -> Vec<f64> {
    let len = span * sps + 1;
    let mid = (len - 1) as f64 / 2.0;
    let b = rolloff;
    let mut taps: Vec<f64> = (0..len)
        .map(|i| {
            let t = (i as f64 - mid) / sps as f64;
            if t.abs() < 1e-12 {
                1.0 - b + 4.0 * b / PI
            } else if b > 0.0 && (t.abs() - 1.0 / (4.0 * b)).abs() < 1e-9 {
                b / SQRT_2
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * b)).sin()
                        + (1.0 - 2.0 / PI) * (PI / (4.0 * b)).cos())
            } else {
                let num = (PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos();
                let den = PI * t * (1.0 - (4.0 * b * t).powi(2));
                num / den
            }
        })
        .collect();
    let energy: f64 = taps.iter().map(|h| h * h).sum();
    let scale = (sps as f64 / energy).sqrt();
    taps.iter_mut().for_each(|h| *h *= scale);
    taps
}

fn convolve_full(x: &[Complex64], h: &[f64]) -> Vec<Complex64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mut y = vec![Complex64::new(0.0, 0.0); x.len() + h.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        if xi == Complex64::new(0.0, 0.0) {
            continue;
        }
        for (j, &hj) in h.iter().enumerate() {
            y[i + j] += xi * hj;
        }
    }
    y
}

fn pulse_shape(symbols: &[Complex64], sps: usize) -> Vec<Complex64> {
    if sps == 1 {
        return symbols.to_vec();
    }
    let mut up = vec![Complex64::new(0.0, 0.0); symbols.len() * sps];
    for (k, &s) in symbols.iter().enumerate() {
        up[k * sps] = s;
    }
    convolve_full(&up, &rrc_taps(sps, RRC_ROLLOFF, RRC_SPAN))
}

/// Matched filter and symbol-rate sampling; inverse of [`pulse_shape`].
fn matched_filter(samples: &[Complex64], sps: usize, n_slots: usize) -> Vec<Complex64> {
    if sps == 1 {
        return samples[..n_slots].to_vec();
    }
    let taps = rrc_taps(sps, RRC_ROLLOFF, RRC_SPAN);
    let delay = taps.len() - 1;
    let inv = 1.0 / sps as f64;
    (0..n_slots)
        .map(|k| {
            let t = delay + k * sps;
            // y[t] = Σ_j x[t - j] h[j], restricted to valid indices.
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &hj) in taps.iter().enumerate() {
                if let Some(idx) = t.checked_sub(j) {
                    if idx < samples.len() {
                        acc += samples[idx] * hj;
                    }
                }
            }
            acc * inv
        })
        .collect()
}

/// Gaussian-filtered rectangular frequency pulse, normalised so that one
/// symbol contributes a total phase change of π/2.
fn gmsk_frequency_pulse(sps: usize, bt: f64) -> Vec<f64> {
    let len = GMSK_SPAN * sps;
    let sigma = (2f64.ln()).sqrt() / (2.0 * PI * bt);
    let q = |x: f64| 0.5 * libm::erfc(x / SQRT_2);
    let mid = len as f64 / 2.0;
    let mut p: Vec<f64> = (0..len)
        .map(|m| {
            let t = (m as f64 + 0.5 - mid) / sps as f64;
            q((t - 0.5) / sigma) - q((t + 0.5) / sigma)
        })
        .collect();
    let area: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v *= (PI / 2.0) / area);
    p
}

fn gmsk_modulate(levels: &[Complex64], sps: usize, bt: f64) -> Vec<Complex64> {
    let pulse = gmsk_frequency_pulse(sps, bt);
    let mut freq = vec![0.0; levels.len() * sps + pulse.len()];
    for (k, a) in levels.iter().enumerate() {
        for (m, &p) in pulse.iter().enumerate() {
            freq[k * sps + m] += a.re * p;
        }
    }
    let mut out = Vec::with_capacity(freq.len() + 1);
    let mut phase = 0.0;
    out.push(Complex64::new(1.0, 0.0));
    for f in freq {
        phase += f;
        out.push(Complex64::from_polar(1.0, phase));
    }
    out
}

fn gmsk_demodulate(samples: &[Complex64], sps: usize, n_bits: usize) -> Vec<bool> {
    let len = GMSK_SPAN * sps;
    let offset = (len - sps) / 2;
    let disc: Vec<f64> = samples.windows(2).map(|w| (w[1] * w[0].conj()).arg()).collect();
    (0..n_bits)
        .map(|k| {
            let start = k * sps + offset;
            disc[start..start + sps].iter().sum::<f64>() > 0.0
        })
        .collect()
}

/// Modulates bits into unit-average-power complex baseband samples.
pub fn modulate(bits: &[bool], scheme: &ModulationScheme) -> Result<Vec<Complex64>> {
    let symbols = map_symbols(bits, scheme)?;
    Ok(match scheme.kind {
        ModulationKind::Gmsk => gmsk_modulate(&symbols, scheme.samples_per_symbol, scheme.gmsk_bt),
        _ => pulse_shape(&symbols, scheme.samples_per_symbol),
    })
}

/// Demodulates a waveform produced by [`modulate`] (after any channel).
///
/// `reference` must hold the transmitted symbols from [`map_symbols`] for
/// 16-QAM; the other schemes ignore it.
pub fn demodulate(
    samples: &[Complex64],
    scheme: &ModulationScheme,
    reference: Option<&[Complex64]>,
) -> Result<Vec<bool>> {
    let n_bits = scheme.bit_count(samples.len())?;
    let bps = scheme.bits_per_symbol();
    let sps = scheme.samples_per_symbol;
    let mut out = Vec::with_capacity(n_bits);
    match scheme.kind {
        ModulationKind::Dbpsk | ModulationKind::Dqpsk | ModulationKind::D8psk => {
            let order = scheme.kind.psk_order().unwrap();
            let sym = matched_filter(samples, sps, n_bits / bps + 1);
            for w in sym.windows(2) {
                let dphi = (w[1] * w[0].conj()).arg();
                let k = (dphi * order as f64 / (2.0 * PI)).round().rem_euclid(order as f64) as usize;
                push_uint(&mut out, gray(k % order), bps);
            }
        }
        ModulationKind::Qam16 => {
            let reference = reference.ok_or(Error::MissingReference("qam16"))?;
            let n_sym = n_bits / bps;
            if reference.len() != n_sym {
                return Err(Error::LengthMismatch {
                    expected: n_sym,
                    actual: reference.len(),
                });
            }
            let sym = matched_filter(samples, sps, n_sym);
            for (rx, tx) in sym
                .chunks(QAM_DEROTATION_BLOCK)
                .zip(reference.chunks(QAM_DEROTATION_BLOCK))
            {
                // Least-squares complex gain of the block against the
                // known symbols removes residual phase and scale.
                let num: Complex64 = rx.iter().zip(tx).map(|(r, t)| r * t.conj()).sum();
                let den: f64 = tx.iter().map(|t| t.norm_sqr()).sum();
                let gain = num / den;
                let inv = if gain.norm() > 0.0 {
                    gain.inv()
                } else {
                    Complex64::new(1.0, 0.0)
                };
                for r in rx {
                    let z = r * inv;
                    push_uint(&mut out, qam_level_bits(z.re), 2);
                    push_uint(&mut out, qam_level_bits(z.im), 2);
                }
            }
        }
        ModulationKind::Gmsk => out = gmsk_demodulate(samples, sps, n_bits),
    }
    Ok(out)
}
