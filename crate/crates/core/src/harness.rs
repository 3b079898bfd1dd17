//! Experiment orchestration: BER sweeps under emulated stair-step fading,
//! phase-accuracy sweeps, a two-hop relay simulation, and report output.
//!
//! Every random draw is derived from the config seed with [`sub_seed`], so a
//! run is a pure function of the config and the checkpoint.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beamform::{combine, compute_weights, oracle_weights, BeamWeights};
use crate::channel::{apply_chunk_phases, awgn, snr_to_noise_psd, stair_step_schedule};
use crate::dataset::pack_samples;
use crate::error::{Error, Result};
use crate::estimator::{estimate_amplitudes, multi_trial_estimate, EstimatorConfig, EstimatorState, PhaseRegressor};
use crate::modem::{count_bit_errors, demodulate, generate_bits, map_symbols, modulate, ModulationKind, ModulationScheme};
use crate::phasecore::{circ_dist, mean_power, wrap_pi, ComplexSample, SampleChunk};
use crate::seed::sub_seed;

/// How the receiver forms its combining weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    /// Decode branch 1 alone.
    #[serde(rename = "none")]
    NonBeamforming,
    /// Raw `[-π, π)` head only.
    SingleOutput,
    DoubleOutput,
    TemporalSmoothing,
    MultiTrial,
    /// Weights from the true channel gains.
    Oracle,
}

impl EstimatorMode {
    pub const ALL: [EstimatorMode; 6] = [
        EstimatorMode::NonBeamforming,
        EstimatorMode::SingleOutput,
        EstimatorMode::DoubleOutput,
        EstimatorMode::TemporalSmoothing,
        EstimatorMode::MultiTrial,
        EstimatorMode::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorMode::NonBeamforming => "none",
            EstimatorMode::SingleOutput => "single-output",
            EstimatorMode::DoubleOutput => "double-output",
            EstimatorMode::TemporalSmoothing => "temporal-smoothing",
            EstimatorMode::MultiTrial => "multi-trial",
            EstimatorMode::Oracle => "oracle",
        }
    }

    /// Whether the mode needs a trained model.
    pub fn is_learned(self) -> bool {
        !matches!(self, EstimatorMode::NonBeamforming | EstimatorMode::Oracle)
    }
}

impl fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown estimator mode '{s}'")))
    }
}

/// Relative-phase trajectory between the two branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FadingConfig {
    /// Random start, then `n_steps` increments of `2π/n_steps` per block.
    StairStep { n_steps: usize },
    /// Fixed relative phase (radians).
    Constant { phase: f64 },
}

impl Default for FadingConfig {
    fn default() -> Self {
        FadingConfig::StairStep { n_steps: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSweepConfig {
    pub grid_points: usize,
    pub snr_db: f64,
    pub chunks_per_point: usize,
}

impl Default for PhaseSweepConfig {
    fn default() -> Self {
        PhaseSweepConfig {
            grid_points: 64,
            snr_db: 15.0,
            chunks_per_point: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelayConfig {
    pub packets: usize,
    /// Hop-1 branch SNRs are drawn uniformly from this range (dB).
    pub hop1_snr_db: [f64; 2],
    pub hop2_snr_db: f64,
    /// SNR of the source→destination path; `None` disables it.
    pub direct_snr_db: Option<f64>,
    /// One channel realization per seed.
    pub channel_seeds: Vec<u64>,
    pub mode: EstimatorMode,
}

impl Default for RelayConfig {
    fn default() -> Self {
        RelayConfig {
            packets: 1000,
            hop1_snr_db: [6.0, 10.0],
            hop2_snr_db: 15.0,
            direct_snr_db: None,
            channel_seeds: vec![1, 2, 3, 4],
            mode: EstimatorMode::TemporalSmoothing,
        }
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modulation: ModulationKind,
    pub samples_per_symbol: usize,
    /// Per-sample SNR of each branch, dB, ascending.
    pub snr_db: Vec<f64>,
    pub modes: Vec<EstimatorMode>,
    pub fading: FadingConfig,
    /// Branch gain magnitudes `|h1|, |h2|`.
    pub branch_gains: [f64; 2],
    pub estimator: EstimatorConfig,
    pub seed: u64,
    pub chunk_len: usize,
    /// Chunks simulated per block; fading restarts every block.
    pub chunks_per_block: usize,
    /// A point stops after this many bit errors ...
    pub min_errors: u64,
    /// ... or this many bits, whichever comes first.
    pub max_bits: u64,
    pub packet_len: usize,
    pub checkpoint: Option<PathBuf>,
    pub phase_sweep: PhaseSweepConfig,
    pub relay: RelayConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            modulation: ModulationKind::Dbpsk,
            samples_per_symbol: 1,
            snr_db: (0..=12).map(f64::from).collect(),
            modes: vec![
                EstimatorMode::NonBeamforming,
                EstimatorMode::DoubleOutput,
                EstimatorMode::TemporalSmoothing,
                EstimatorMode::Oracle,
            ],
            fading: FadingConfig::default(),
            branch_gains: [1.0, 1.0],
            estimator: EstimatorConfig::default(),
            seed: 1,
            chunk_len: crate::phasecore::DEFAULT_CHUNK_LEN,
            chunks_per_block: 544,
            min_errors: 100,
            max_bits: 10_000_000,
            packet_len: 256,
            checkpoint: None,
            phase_sweep: PhaseSweepConfig::default(),
            relay: RelayConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn scheme(&self) -> Result<ModulationScheme> {
        ModulationScheme::new(self.modulation, self.samples_per_symbol)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.snr_db.is_empty() {
            return bad("snr_db must not be empty");
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) || self.snr_db.windows(2).any(|w| w[0] >= w[1]) {
            return bad("snr_db must be finite and strictly ascending");
        }
        if self.modes.is_empty() {
            return bad("at least one mode is required");
        }
        if self.chunk_len == 0 || self.chunks_per_block == 0 || self.packet_len == 0 {
            return bad("chunk_len, chunks_per_block and packet_len must be positive");
        }
        if self.max_bits == 0 {
            return bad("max_bits must be positive");
        }
        if self.branch_gains.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return bad("branch gains must be positive");
        }
        if let FadingConfig::StairStep { n_steps } = self.fading {
            if n_steps == 0 || self.chunks_per_block <= n_steps {
                return bad("stair-step fading needs 1 ≤ n_steps < chunks_per_block");
            }
        }
        if self.phase_sweep.grid_points == 0 || self.phase_sweep.chunks_per_point == 0 {
            return bad("phase sweep needs grid points and chunks");
        }
        let r = &self.relay;
        if r.packets == 0 || r.channel_seeds.is_empty() || !(r.hop1_snr_db[0] <= r.hop1_snr_db[1]) {
            return bad("relay needs packets, channel seeds and an ordered hop-1 SNR range");
        }
        self.scheme()?;
        self.estimator.validate()
    }

    fn require_model<'a>(
        &self,
        mode: EstimatorMode,
        model: Option<&'a dyn PhaseRegressor>,
    ) -> Result<Option<&'a dyn PhaseRegressor>> {
        match model {
            None if mode.is_learned() => Err(Error::MissingCheckpoint(mode.name().to_string())),
            Some(m) if mode.is_learned() && m.chunk_len() != self.chunk_len => Err(Error::Shape(format!(
                "model expects {}-sample chunks, config uses {}",
                m.chunk_len(),
                self.chunk_len
            ))),
            m => Ok(m),
        }
    }
}

/// Per-chunk combining weights for one two-branch stream.
///
/// `gains[c]` holds the true complex branch gains of chunk `c` (used only by
/// the oracle). A trailing partial chunk reuses the last full chunk's weights.
#[allow(clippy::too_many_arguments)]
pub fn chunk_weights(
    mode: EstimatorMode,
    r1: &[ComplexSample],
    r2: &[ComplexSample],
    gains: &[[Complex64; 2]],
    chunk_len: usize,
    model: Option<&dyn PhaseRegressor>,
    est: &EstimatorConfig,
    seed: u64,
) -> Result<Vec<BeamWeights>> {
    if r1.len() != r2.len() {
        return Err(Error::LengthMismatch {
            expected: r1.len(),
            actual: r2.len(),
        });
    }
    let n_chunks = r1.len().div_ceil(chunk_len);
    let full = r1.len() / chunk_len;
    let hold = |mut w: Vec<BeamWeights>| {
        while w.len() < n_chunks {
            let last = w.last().cloned().unwrap_or_else(|| BeamWeights::select(2, 0));
            w.push(last);
        }
        w
    };
    let span = |c: usize| c * chunk_len..(c + 1) * chunk_len;
    match mode {
        EstimatorMode::NonBeamforming => return Ok(vec![BeamWeights::select(2, 0); n_chunks]),
        EstimatorMode::Oracle => {
            return (0..n_chunks)
                .map(|c| oracle_weights(&gains[c.min(gains.len() - 1)]))
                .collect();
        }
        _ => {}
    }
    let model = model.ok_or_else(|| Error::MissingCheckpoint(mode.name().to_string()))?;
    let amplitudes = (0..full)
        .map(|c| {
            estimate_amplitudes(
                &[
                    SampleChunk::new(r1[span(c)].to_vec(), 0),
                    SampleChunk::new(r2[span(c)].to_vec(), 1),
                ],
                0,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let phases: Vec<f64> = if mode == EstimatorMode::MultiTrial {
        (0..full)
            .map(|c| {
                multi_trial_estimate(
                    &SampleChunk::new(r1[span(c)].to_vec(), 0),
                    &SampleChunk::new(r2[span(c)].to_vec(), 1),
                    model,
                    est,
                    sub_seed(seed, c as u64),
                )
            })
            .collect::<Result<_>>()?
    } else {
        let mut packed = Vec::with_capacity(full * 4 * chunk_len);
        for c in 0..full {
            packed.extend(pack_samples(&r1[span(c)], &r2[span(c)])?);
        }
        let raw = if full > 0 {
            model.predict_batch(&packed, full)?
        } else {
            Vec::new()
        };
        let mut state = EstimatorState::new(*est)?;
        raw.iter()
            .map(|&(e1, e2)| match mode {
                EstimatorMode::SingleOutput => e1,
                EstimatorMode::DoubleOutput => state.select_output(e1, e2),
                _ => {
                    let cur = state.select_output(e1, e2);
                    state.temporal_smooth(cur)
                }
            })
            .collect()
    };
    let weights = amplitudes
        .iter()
        .zip(&phases)
        .map(|(a, &d)| compute_weights(a, &[0.0, wrap_pi(d)], 0))
        .collect::<Result<Vec<_>>>()?;
    Ok(hold(weights))
}

/// Applies one weight set per chunk.
pub fn combine_chunks(
    b1: &[ComplexSample],
    b2: &[ComplexSample],
    weights: &[BeamWeights],
    chunk_len: usize,
) -> Result<Vec<ComplexSample>> {
    if weights.len() < b1.len().div_ceil(chunk_len) {
        return Err(Error::LengthMismatch {
            expected: b1.len().div_ceil(chunk_len),
            actual: weights.len(),
        });
    }
    let mut out = Vec::with_capacity(b1.len());
    for ((c1, c2), w) in b1.chunks(chunk_len).zip(b2.chunks(chunk_len)).zip(weights) {
        out.extend(combine(&[c1, c2], w)?);
    }
    Ok(out)
}

/// Two received branches with their clean and noise parts kept apart.
struct TwoBranch {
    clean: [Vec<ComplexSample>; 2],
    noise: [Vec<ComplexSample>; 2],
    gains: Vec<[Complex64; 2]>,
}

impl TwoBranch {
    fn received(&self, i: usize) -> Vec<ComplexSample> {
        self.clean[i].iter().zip(&self.noise[i]).map(|(s, n)| s + n).collect()
    }
}

/// Branch 1 has constant phase θ1; branch 2 has θ1 plus the relative phase
/// of each chunk. Both branches see independent AWGN of PSD `n0`.
fn two_branch(
    tx: &[ComplexSample],
    chunk_len: usize,
    gains: [f64; 2],
    rel_phase: impl Fn(usize) -> f64,
    n0: [f64; 2],
    seed: u64,
) -> TwoBranch {
    let theta1 = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0)).random_range(-PI..PI);
    let h1 = Complex64::from_polar(gains[0], theta1);
    let s1: Vec<_> = tx.iter().map(|&s| s * h1).collect();
    let s2: Vec<_> = apply_chunk_phases(tx, chunk_len, |c| theta1 + rel_phase(c))
        .into_iter()
        .map(|s| s * gains[1])
        .collect();
    let n_chunks = tx.len().div_ceil(chunk_len);
    let gains = (0..n_chunks)
        .map(|c| [h1, Complex64::from_polar(gains[1], theta1 + rel_phase(c))])
        .collect();
    TwoBranch {
        noise: [awgn(tx.len(), n0[0], sub_seed(seed, 1)), awgn(tx.len(), n0[1], sub_seed(seed, 2))],
        clean: [s1, s2],
        gains,
    }
}

/// Largest bit count whose waveform fits in `n_samples`.
fn bits_for_samples(scheme: &ModulationScheme, n_samples: usize) -> Result<usize> {
    let bps = scheme.bits_per_symbol();
    let mut bits = n_samples / scheme.samples_per_symbol() * bps;
    while bits > 0 && scheme.sample_count(bits) > n_samples {
        bits -= bps;
    }
    if bits == 0 {
        return Err(Error::Config("block too short for one symbol".into()));
    }
    Ok(bits)
}

fn demod_errors(
    rx: &[ComplexSample],
    scheme: &ModulationScheme,
    bits: &[bool],
    reference: Option<&[Complex64]>,
) -> Result<(u64, u64)> {
    let decoded = demodulate(rx, scheme, reference)?;
    let report = count_bit_errors(bits, &decoded)?;
    Ok((report.bit_errors, report.bits_compared))
}

/// One `(snr_db, ber, bits)` row of a BER curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub snr_db: f64,
    pub ber: f64,
    pub bits: u64,
    pub errors: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BerCurve {
    pub mode: EstimatorMode,
    pub points: Vec<BerPoint>,
}

impl BerCurve {
    /// SNR at which the curve crosses `target`, interpolating linearly in
    /// `log10(BER)` between the bracketing points.
    pub fn snr_at_ber(&self, target: f64) -> Option<f64> {
        let pts: Vec<&BerPoint> = self.points.iter().filter(|p| p.ber > 0.0).collect();
        pts.windows(2).find_map(|w| {
            let (a, b) = (w[0], w[1]);
            if a.ber >= target && b.ber <= target && a.ber > b.ber {
                let t = (a.ber.log10() - target.log10()) / (a.ber.log10() - b.ber.log10());
                Some(a.snr_db + t * (b.snr_db - a.snr_db))
            } else {
                None
            }
        })
    }
}

/// SNR gain of `curve` over `baseline` at BER `target`, in dB.
pub fn gain_at_ber(baseline: &BerCurve, curve: &BerCurve, target: f64) -> Option<f64> {
    Some(baseline.snr_at_ber(target)? - curve.snr_at_ber(target)?)
}

/// BER versus per-branch SNR for every configured mode, with the relative
/// phase between branches following the configured fading.
///
/// All modes see the same bits, channels and noise (common random numbers);
/// each point runs until `min_errors` errors or `max_bits` bits.
pub fn run_ber_sweep(cfg: &ExperimentConfig, model: Option<&dyn PhaseRegressor>) -> Result<Vec<BerCurve>> {
    cfg.validate()?;
    for &mode in &cfg.modes {
        cfg.require_model(mode, model)?;
    }
    let scheme = cfg.scheme()?;
    let n_bits = bits_for_samples(&scheme, cfg.chunks_per_block * cfg.chunk_len)?;
    let mut curves: Vec<BerCurve> = cfg
        .modes
        .iter()
        .map(|&mode| BerCurve { mode, points: Vec::new() })
        .collect();
    for (si, &snr) in cfg.snr_db.iter().enumerate() {
        let mut errors = vec![0u64; cfg.modes.len()];
        let mut bits_seen = vec![0u64; cfg.modes.len()];
        let active = |e: u64, b: u64| e < cfg.min_errors && b < cfg.max_bits;
        let mut block = 0u64;
        while (0..cfg.modes.len()).any(|m| active(errors[m], bits_seen[m])) {
            let seed = sub_seed(sub_seed(cfg.seed, si as u64), block);
            let bits = generate_bits(n_bits, sub_seed(seed, 1));
            let tx = modulate(&bits, &scheme)?;
            let reference = (scheme.kind() == ModulationKind::Qam16)
                .then(|| map_symbols(&bits, &scheme))
                .transpose()?;
            let n_chunks = tx.len().div_ceil(cfg.chunk_len);
            let rel: Box<dyn Fn(usize) -> f64> = match cfg.fading {
                FadingConfig::StairStep { n_steps } => {
                    let sched = stair_step_schedule(n_chunks.max(n_steps + 1), n_steps, sub_seed(seed, 2))?;
                    Box::new(move |c| sched.at(c))
                }
                FadingConfig::Constant { phase } => Box::new(move |_| phase),
            };
            let p = mean_power(&tx);
            let n0 = [
                snr_to_noise_psd(p * cfg.branch_gains[0].powi(2), snr)?,
                snr_to_noise_psd(p * cfg.branch_gains[1].powi(2), snr)?,
            ];
            let rx = two_branch(&tx, cfg.chunk_len, cfg.branch_gains, rel, n0, sub_seed(seed, 3));
            let (r1, r2) = (rx.received(0), rx.received(1));
            for (m, &mode) in cfg.modes.iter().enumerate() {
                if !active(errors[m], bits_seen[m]) {
                    continue;
                }
                let w = chunk_weights(mode, &r1, &r2, &rx.gains, cfg.chunk_len, model, &cfg.estimator, sub_seed(seed, 4))?;
                let combined = combine_chunks(&r1, &r2, &w, cfg.chunk_len)?;
                let (e, b) = demod_errors(&combined, &scheme, &bits, reference.as_deref())?;
                errors[m] += e;
                bits_seen[m] += b;
            }
            block += 1;
        }
        for (m, curve) in curves.iter_mut().enumerate() {
            curve.points.push(BerPoint {
                snr_db: snr,
                ber: errors[m] as f64 / bits_seen[m] as f64,
                bits: bits_seen[m],
                errors: errors[m],
            });
        }
    }
    Ok(curves)
}

/// Phase-estimation statistics at one true relative phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSweepRow {
    pub true_delta: f64,
    pub e1_mean: f64,
    pub e1_error: f64,
    pub e1_std: f64,
    pub e2_mean: f64,
    pub e2_error: f64,
    pub e2_std: f64,
    pub selected_mean: f64,
    pub selected_error: f64,
    pub selected_std: f64,
}

/// Circular mean, mean circular error against `truth`, and plain STD.
fn phase_stats(values: &[f64], truth: f64) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let resultant: Complex64 = values.iter().map(|&v| Complex64::from_polar(1.0, v)).sum();
    let err = values.iter().map(|&v| circ_dist(v, truth)).sum::<f64>() / n;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (resultant.arg(), err, std)
}

/// Sweeps the true relative phase over an even grid of `[-π, π)` at fixed
/// branch SNR and reports accuracy of both raw heads and of the selected
/// output. Each grid point starts from a fresh estimator state.
pub fn run_phase_sweep(model: &dyn PhaseRegressor, cfg: &ExperimentConfig) -> Result<Vec<PhaseSweepRow>> {
    cfg.validate()?;
    let ps = &cfg.phase_sweep;
    let m = model.chunk_len();
    let mut rows = Vec::with_capacity(ps.grid_points);
    for k in 0..ps.grid_points {
        let delta = -PI + 2.0 * PI * k as f64 / ps.grid_points as f64;
        let seed = sub_seed(sub_seed(cfg.seed, 0x5048_4153), k as u64);
        let tx = crate::dataset::random_unit_samples(m * ps.chunks_per_point, sub_seed(seed, 0));
        let n0 = snr_to_noise_psd(1.0, ps.snr_db)?;
        let rx = two_branch(&tx, m, [1.0, 1.0], |_| delta, [n0, n0], sub_seed(seed, 1));
        let (r1, r2) = (rx.received(0), rx.received(1));
        let mut packed = Vec::with_capacity(ps.chunks_per_point * 4 * m);
        for c in 0..ps.chunks_per_point {
            packed.extend(pack_samples(&r1[c * m..(c + 1) * m], &r2[c * m..(c + 1) * m])?);
        }
        let raw = model.predict_batch(&packed, ps.chunks_per_point)?;
        let mut state = EstimatorState::new(cfg.estimator)?;
        let e1: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let e2: Vec<f64> = raw.iter().map(|r| r.1).collect();
        let sel: Vec<f64> = raw.iter().map(|&(a, b)| state.select_output(a, b)).collect();
        let (e1_mean, e1_error, e1_std) = phase_stats(&e1, delta);
        let (e2_mean, e2_error, e2_std) = phase_stats(&e2, delta);
        let (selected_mean, selected_error, selected_std) = phase_stats(&sel, delta);
        rows.push(PhaseSweepRow {
            true_delta: delta,
            e1_mean,
            e1_error,
            e1_std,
            e2_mean,
            e2_error,
            e2_std,
            selected_mean,
            selected_error,
            selected_std,
        });
    }
    Ok(rows)
}

/// How the relay handles its two received branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelayPath {
    /// Source straight to destination, no relay.
    Direct,
    /// Amplify-and-forward of one relay antenna.
    Branch1,
    Branch2,
    /// Combine both antennas with learned weights, then forward.
    Combined,
}

impl RelayPath {
    pub fn name(self) -> &'static str {
        match self {
            RelayPath::Direct => "direct",
            RelayPath::Branch1 => "relay-branch-1",
            RelayPath::Branch2 => "relay-branch-2",
            RelayPath::Combined => "relay-combined",
        }
    }
}

/// Packet statistics of one relay path for one channel realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelayRow {
    pub channel_seed: u64,
    pub path: RelayPath,
    pub hop1_snr_db: [f64; 2],
    /// SNR of the waveform the relay transmits (clean over noise power), dB.
    pub forwarded_snr_db: f64,
    pub packets: usize,
    pub lost: usize,
    pub plr: f64,
    pub pdr: f64,
}

fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Two-hop relay simulation: source → two relay antennas → (branch 1 |
/// branch 2 | combined) amplify-and-forward at unit power → destination.
///
/// Packets are `packet_len` DBPSK bits sent back-to-back as one stream; a
/// packet is lost if any of its bits is wrong.
pub fn run_relay_sim(cfg: &ExperimentConfig, model: Option<&dyn PhaseRegressor>) -> Result<Vec<RelayRow>> {
    cfg.validate()?;
    let rc = &cfg.relay;
    let model = cfg.require_model(rc.mode, model)?;
    let scheme = ModulationScheme::new(ModulationKind::Dbpsk, 1)?;
    let n_bits = rc.packets * cfg.packet_len;
    let mut rows = Vec::new();
    for &cs in &rc.channel_seeds {
        let seed = sub_seed(sub_seed(cfg.seed, 0x5245_4c41), cs);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0));
        let hop1 = [
            rng.random_range(rc.hop1_snr_db[0]..=rc.hop1_snr_db[1]),
            rng.random_range(rc.hop1_snr_db[0]..=rc.hop1_snr_db[1]),
        ];
        let rel = rng.random_range(-PI..PI);
        let hop2_phase = rng.random_range(-PI..PI);
        let bits = generate_bits(n_bits, sub_seed(seed, 1));
        let tx = modulate(&bits, &scheme)?;
        let p = mean_power(&tx);
        // Unit noise PSD at the relay; branch gains set the SNRs.
        let gains = hop1.map(|s| 10f64.powf(s / 20.0));
        let rx = two_branch(&tx, cfg.chunk_len, gains, |_| rel, [p, p], sub_seed(seed, 2));
        let (r1, r2) = (rx.received(0), rx.received(1));

        let count_losses = |received: &[ComplexSample]| -> Result<usize> {
            let decoded = demodulate(received, &scheme, None)?;
            if decoded.len() != bits.len() {
                return Err(Error::LengthMismatch {
                    expected: bits.len(),
                    actual: decoded.len(),
                });
            }
            Ok(bits
                .chunks(cfg.packet_len)
                .zip(decoded.chunks(cfg.packet_len))
                .filter(|(a, b)| a != b)
                .count())
        };
        let mut push = |path: RelayPath, fwd_snr: f64, lost: usize| {
            rows.push(RelayRow {
                channel_seed: cs,
                path,
                hop1_snr_db: hop1,
                forwarded_snr_db: fwd_snr,
                packets: rc.packets,
                lost,
                plr: lost as f64 / rc.packets as f64,
                pdr: 1.0 - lost as f64 / rc.packets as f64,
            });
        };

        let lost_direct = match rc.direct_snr_db {
            None => rc.packets,
            Some(snr) => {
                let mut y = tx.clone();
                let noise = awgn(y.len(), snr_to_noise_psd(p, snr)?, sub_seed(seed, 3));
                y.iter_mut().zip(noise).for_each(|(a, n)| *a += n);
                count_losses(&y)?
            }
        };
        push(RelayPath::Direct, rc.direct_snr_db.unwrap_or(f64::NEG_INFINITY), lost_direct);

        let combined_weights = chunk_weights(rc.mode, &r1, &r2, &rx.gains, cfg.chunk_len, model, &cfg.estimator, sub_seed(seed, 4))?;
        let paths = [
            (RelayPath::Branch1, vec![BeamWeights::select(2, 0); combined_weights.len()]),
            (RelayPath::Branch2, vec![BeamWeights::select(2, 1); combined_weights.len()]),
            (RelayPath::Combined, combined_weights),
        ];
        for (path, w) in paths {
            let clean = combine_chunks(&rx.clean[0], &rx.clean[1], &w, cfg.chunk_len)?;
            let noise = combine_chunks(&rx.noise[0], &rx.noise[1], &w, cfg.chunk_len)?;
            let fwd_snr = to_db(mean_power(&clean) / mean_power(&noise));
            // The relay only sees the sum, so it normalizes total power.
            let out: Vec<ComplexSample> = clean.iter().zip(&noise).map(|(s, n)| s + n).collect();
            let scale = 1.0 / mean_power(&out).sqrt();
            let h2 = Complex64::from_polar(scale, hop2_phase);
            let n2 = awgn(out.len(), snr_to_noise_psd(1.0, rc.hop2_snr_db)?, sub_seed(seed, 5));
            let y: Vec<ComplexSample> = out.iter().zip(&n2).map(|(s, n)| s * h2 + n).collect();
            push(path, fwd_snr, count_losses(&y)?);
        }
    }
    Ok(rows)
}

/// Results of one CLI run, ready to be written out.
#[derive(Debug, Clone, Default)]
pub struct RunResults {
    pub ber_curves: Vec<BerCurve>,
    pub phase_sweep: Vec<PhaseSweepRow>,
    pub relay: Vec<RelayRow>,
}

#[derive(Debug, Serialize)]
struct BerCsvRow<'a> {
    snr_db: f64,
    mode: &'a str,
    ber: f64,
    bits: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub relay_channel_seeds: Vec<u64>,
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub min_errors: u64,
    pub max_bits: u64,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes one CSV per BER curve (`ber_<mode>.csv`), plus `phase_sweep.csv`
/// and `relay.csv` when present, and a `manifest.toml` recording the config,
/// seeds, checkpoint hash and crate version. Returns the written paths.
pub fn emit_report(results: &RunResults, cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for curve in &results.ber_curves {
        let path = dir.join(format!("ber_{}.csv", curve.mode.name()));
        let mut w = csv::Writer::from_path(&path)?;
        for p in &curve.points {
            w.serialize(BerCsvRow {
                snr_db: p.snr_db,
                mode: curve.mode.name(),
                ber: p.ber,
                bits: p.bits,
            })?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if !results.phase_sweep.is_empty() {
        let path = dir.join("phase_sweep.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for r in &results.phase_sweep {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if !results.relay.is_empty() {
        let path = dir.join("relay.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["channel_seed", "path", "hop1_snr1_db", "hop1_snr2_db", "forwarded_snr_db", "packets", "lost", "plr", "pdr"])?;
        for r in &results.relay {
            w.write_record([
                r.channel_seed.to_string(),
                r.path.name().to_string(),
                r.hop1_snr_db[0].to_string(),
                r.hop1_snr_db[1].to_string(),
                r.forwarded_snr_db.to_string(),
                r.packets.to_string(),
                r.lost.to_string(),
                r.plr.to_string(),
                r.pdr.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        relay_channel_seeds: cfg.relay.channel_seeds.clone(),
        checkpoint: cfg.checkpoint.as_ref().map(|p| p.display().to_string()),
        checkpoint_sha256: cfg.checkpoint.as_ref().map(file_sha256).transpose()?,
        min_errors: cfg.min_errors,
        max_bits: cfg.max_bits,
        files: written
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
        config: cfg.clone(),
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
