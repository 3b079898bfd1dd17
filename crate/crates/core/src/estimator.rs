//! Turns raw network outputs into a stable relative-phase estimate, and
//! estimates per-branch amplitude weights from received RMS.
//!
//! A [`PhaseRegressor`] produces the two raw heads `(E1, E2)` for a pair of
//! branch chunks. [`EstimatorState::select_output`] picks between them,
//! [`EstimatorState::temporal_smooth`] blends successive chunks, and
//! [`multi_trial_estimate`] averages repeated passes over one chunk pair.

use std::collections::VecDeque;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::pack_samples;
use crate::error::{Error, Result};
use crate::nn::{PhaseModel, Scalar};
use crate::phasecore::{rms, rotate_samples, wrap_pi, SampleChunk};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Selection half-width ε around 0 (E1) and π (E2), radians.
    pub epsilon: f64,
    /// History window K.
    pub history_len: usize,
    /// Smoothing weight λ of the newest estimate.
    pub lambda: f64,
    /// Jump threshold α, radians.
    pub alpha: f64,
    /// Trials per chunk for multi-trial averaging.
    pub n_trials: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            epsilon: 0.2 * PI,
            history_len: 10,
            lambda: 0.2,
            alpha: 1.5 * PI,
            n_trials: 16,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < PI / 2.0) {
            return Err(Error::invalid(format!("epsilon {} not in (0, π/2)", self.epsilon)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid(format!("lambda {} not in (0, 1]", self.lambda)));
        }
        if !(self.alpha > PI && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha {} must exceed π", self.alpha)));
        }
        if self.history_len < 2 {
            return Err(Error::invalid("history_len must be at least 2"));
        }
        if self.n_trials == 0 {
            return Err(Error::invalid("n_trials must be at least 1"));
        }
        Ok(())
    }
}

/// Anything that maps packed two-branch records to raw `(E1, E2)` outputs.
pub trait PhaseRegressor {
    /// Samples per branch chunk the regressor expects.
    fn chunk_len(&self) -> usize;

    /// `packed` holds `batch` records in the [`pack_input`](crate::dataset::pack_input) layout.
    fn predict_batch(&self, packed: &[f32], batch: usize) -> Result<Vec<(f64, f64)>>;

    fn predict_pair(&self, b1: &[crate::ComplexSample], b2: &[crate::ComplexSample]) -> Result<(f64, f64)> {
        if b1.len() != self.chunk_len() {
            return Err(Error::LengthMismatch {
                expected: self.chunk_len(),
                actual: b1.len(),
            });
        }
        let packed = pack_samples(b1, b2)?;
        Ok(self.predict_batch(&packed, 1)?[0])
    }
}

impl<T: Scalar> PhaseRegressor for PhaseModel<T> {
    fn chunk_len(&self) -> usize {
        self.architecture().chunk_len
    }

    fn predict_batch(&self, packed: &[f32], batch: usize) -> Result<Vec<(f64, f64)>> {
        let len = self.architecture().input_len();
        if packed.len() != batch * len {
            return Err(Error::Shape(format!(
                "expected {batch} × {len} input values, got {}",
                packed.len()
            )));
        }
        let mut out = Vec::with_capacity(batch);
        for chunk in packed.chunks(256 * len) {
            let x: Vec<T> = chunk.iter().map(|&v| T::from_f32(v).unwrap_or_else(T::nan)).collect();
            for o in self.infer(&x, chunk.len() / len)? {
                out.push((o[0].to_f64().unwrap_or(f64::NAN), o[1].to_f64().unwrap_or(f64::NAN)));
            }
        }
        Ok(out)
    }
}

/// Maps an `E2` output into `E1`'s range when recent `E2` predictions sit
/// above π: subtracts 2π iff `history_mean > π`.
pub fn convert_e2(e2: f64, history_mean: f64) -> f64 {
    if history_mean > PI {
        e2 - TAU
    } else {
        e2
    }
}

fn mean(v: &VecDeque<f64>) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &VecDeque<f64>) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Streaming selection and smoothing state for one branch pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    config: EstimatorConfig,
    history_e1: VecDeque<f64>,
    history_e2: VecDeque<f64>,
    smoothed: Option<f64>,
}

impl EstimatorState {
    pub fn new(config: EstimatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(EstimatorState {
            config,
            history_e1: VecDeque::with_capacity(config.history_len),
            history_e2: VecDeque::with_capacity(config.history_len),
            smoothed: None,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn history_e1(&self) -> &VecDeque<f64> {
        &self.history_e1
    }

    pub fn history_e2(&self) -> &VecDeque<f64> {
        &self.history_e2
    }

    pub fn smoothed(&self) -> Option<f64> {
        self.smoothed
    }

    pub fn reset(&mut self) {
        self.history_e1.clear();
        self.history_e2.clear();
        self.smoothed = None;
    }

    fn push(&mut self, e1: f64, e2: f64) {
        if self.history_e1.len() == self.config.history_len {
            self.history_e1.pop_front();
            self.history_e2.pop_front();
        }
        self.history_e1.push_back(e1);
        self.history_e2.push_back(e2);
    }

    /// Chooses between the two heads for the current chunk. Both values
    /// join the history windows before the selection statistics are taken.
    pub fn select_output(&mut self, e1: f64, e2: f64) -> f64 {
        let eps = self.config.epsilon;
        let select2 = PI - eps < e2 && e2 < PI + eps;
        let select1 = -eps < e1 && e1 < eps;
        self.push(e1, e2);
        let e2 = convert_e2(e2, mean(&self.history_e2));
        match (select1, select2) {
            (true, false) => e1,
            (false, true) => e2,
            (true, true) => {
                if self.history_e1.len() >= 2 && std_dev(&self.history_e2) < std_dev(&self.history_e1) {
                    e2
                } else {
                    e1
                }
            }
            // A stale history can leave the converted E2 a full turn away
            // from E1; average the representative nearest E1 instead.
            (false, false) => {
                if (e1 - e2).abs() > PI {
                    wrap_pi(0.5 * (e1 + e2 + TAU.copysign(e1 - e2)))
                } else {
                    0.5 * (e1 + e2)
                }
            }
        }
    }

    /// Exponential smoothing `λ·E_cur + (1−λ)·E_prev`. A jump larger than α
    /// (or no previous value) restarts from `E_cur` and clears the histories.
    pub fn temporal_smooth(&mut self, e_cur: f64) -> f64 {
        let out = match self.smoothed {
            Some(prev) if (prev - e_cur).abs() <= self.config.alpha => {
                self.config.lambda * e_cur + (1.0 - self.config.lambda) * prev
            }
            Some(_) => {
                self.history_e1.clear();
                self.history_e2.clear();
                e_cur
            }
            None => e_cur,
        };
        self.smoothed = Some(out);
        out
    }
}

/// Splits estimates into two clusters by distance α from the running mean of
/// the first and returns the mean of the larger one (the first on ties).
pub fn cluster_estimates(estimates: &[f64], alpha: f64) -> Result<f64> {
    let (&first, rest) = estimates
        .split_first()
        .ok_or_else(|| Error::invalid("no estimates to cluster"))?;
    let (mut sum1, mut n1) = (first, 1usize);
    let (mut sum2, mut n2) = (0.0, 0usize);
    for &e in rest {
        if (e - sum1 / n1 as f64).abs() < alpha {
            sum1 += e;
            n1 += 1;
        } else {
            sum2 += e;
            n2 += 1;
        }
    }
    Ok(if n1 >= n2 { sum1 / n1 as f64 } else { sum2 / n2 as f64 })
}

/// Averages `n_trials` passes over one chunk pair. Each trial rotates branch
/// 2 by a random phase, selects an output with a fresh state, and removes the
/// rotation again before clustering.
pub fn multi_trial_estimate(
    b1: &SampleChunk,
    b2: &SampleChunk,
    model: &(impl PhaseRegressor + ?Sized),
    config: &EstimatorConfig,
    seed: u64,
) -> Result<f64> {
    config.validate()?;
    if b1.len() != b2.len() {
        return Err(Error::LengthMismatch {
            expected: b1.len(),
            actual: b2.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas: Vec<f64> = (0..config.n_trials).map(|_| rng.random_range(-PI..PI)).collect();
    let mut packed = Vec::with_capacity(config.n_trials * 4 * b1.len());
    for &theta in &thetas {
        packed.extend(pack_samples(b1.samples(), &rotate_samples(b2.samples(), theta))?);
    }
    let outputs = model.predict_batch(&packed, config.n_trials)?;
    let estimates: Vec<f64> = outputs
        .iter()
        .zip(&thetas)
        .map(|(&(e1, e2), &theta)| {
            let mut state = EstimatorState::new(*config).expect("validated above");
            wrap_pi(state.select_output(e1, e2) - theta)
        })
        .collect();
    cluster_estimates(&estimates, config.alpha)
}

/// Amplitude weights `A_i = (RMS_i/RMS_k) / Σ_j (RMS_j/RMS_k)` relative to
/// reference branch `k`.
pub fn estimate_amplitudes(chunks: &[SampleChunk], k: usize) -> Result<Vec<f64>> {
    let reference = chunks
        .get(k)
        .ok_or_else(|| Error::invalid(format!("reference branch {k} out of range")))?;
    let rk = rms(reference.samples());
    if rk == 0.0 {
        return Err(Error::ZeroEnergy);
    }
    let ratios: Vec<f64> = chunks.iter().map(|c| rms(c.samples()) / rk).collect();
    let total: f64 = ratios.iter().sum();
    Ok(ratios.iter().map(|r| r / total).collect())
}
