//! Combining weights and maximum-ratio combining.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::phasecore::ComplexSample;

/// Per-branch complex combining weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamWeights {
    weights: Vec<Complex64>,
}

impl BeamWeights {
    pub fn new(weights: Vec<Complex64>) -> Self {
        BeamWeights { weights }
    }

    /// Weight 1 on `branch`, 0 elsewhere.
    pub fn select(n_branches: usize, branch: usize) -> Self {
        let mut weights = vec![Complex64::new(0.0, 0.0); n_branches];
        weights[branch] = Complex64::new(1.0, 0.0);
        BeamWeights { weights }
    }

    pub fn weights(&self) -> &[Complex64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `Σ |ā_i|`.
    pub fn l1_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.norm()).sum()
    }
}

/// `ā_i = A_i·e^{−jΔθ_i}`, with the reference branch `k` forced to zero phase.
pub fn compute_weights(amplitudes: &[f64], rel_phases: &[f64], k: usize) -> Result<BeamWeights> {
    if amplitudes.len() != rel_phases.len() {
        return Err(Error::LengthMismatch {
            expected: amplitudes.len(),
            actual: rel_phases.len(),
        });
    }
    if k >= amplitudes.len() {
        return Err(Error::invalid(format!("reference branch {k} out of range")));
    }
    Ok(BeamWeights {
        weights: amplitudes
            .iter()
            .zip(rel_phases)
            .enumerate()
            .map(|(i, (&a, &d))| {
                if i == k {
                    Complex64::new(a, 0.0)
                } else {
                    Complex64::from_polar(a, -d)
                }
            })
            .collect(),
    })
}

/// Pointwise `Σ_i ā_i·R_i`.
pub fn combine(branches: &[&[ComplexSample]], w: &BeamWeights) -> Result<Vec<ComplexSample>> {
    if branches.len() != w.len() {
        return Err(Error::LengthMismatch {
            expected: w.len(),
            actual: branches.len(),
        });
    }
    let n = branches.first().map_or(0, |b| b.len());
    if let Some(b) = branches.iter().find(|b| b.len() != n) {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: b.len(),
        });
    }
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (branch, &a) in branches.iter().zip(&w.weights) {
        for (o, &r) in out.iter_mut().zip(*branch) {
            *o += a * r;
        }
    }
    Ok(out)
}

/// Optimal weights `â_i = s_i* / Σ_j |s_j|` for known complex branch
/// amplitudes `s_i` (gain times signal RMS).
pub fn oracle_weights(s: &[Complex64]) -> Result<BeamWeights> {
    let total: f64 = s.iter().map(|x| x.norm()).sum();
    if s.is_empty() || total == 0.0 {
        return Err(Error::ZeroEnergy);
    }
    Ok(BeamWeights {
        weights: s.iter().map(|x| x.conj() / total).collect(),
    })
}

/// `|Σ a_i s_i|² / (N0 Σ |a_i|²)` as a linear ratio. With `N0 = 0`, returns
/// infinity for a nonzero combined signal and zero otherwise.
pub fn combined_snr(w: &BeamWeights, s: &[Complex64], noise_psd: f64) -> Result<f64> {
    if w.len() != s.len() {
        return Err(Error::LengthMismatch {
            expected: w.len(),
            actual: s.len(),
        });
    }
    if !(noise_psd >= 0.0) {
        return Err(Error::invalid(format!("noise PSD {noise_psd} must be non-negative")));
    }
    let signal: Complex64 = w.weights.iter().zip(s).map(|(a, x)| a * x).sum();
    let gain: f64 = w.weights.iter().map(|a| a.norm_sqr()).sum();
    let num = signal.norm_sqr();
    if noise_psd == 0.0 || gain == 0.0 {
        return Ok(if num > 0.0 { f64::INFINITY } else { 0.0 });
    }
    Ok(num / (noise_psd * gain))
}
