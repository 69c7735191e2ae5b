//! Photon-stream Monte Carlo, Hanbury Brown-Twiss correlation and g2 fits.
//!
//! Each emitter is a renewal process: consecutive emission cycles are
//! Erlang-2 distributed, which makes its intensity correlation
//! `1 - exp(-|tau| / tau_c)`. Detection keeps every cycle with probability
//! `r / R` where `R` is the cycle rate. Random thinning leaves the normalised
//! correlation unchanged, so detected photons stay perfectly antibunched.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Geometric};
use thiserror::Error;

use crate::psf::{lm_fit, FitError, LmOptions, Model, Profile1D};

/// Expected detections below which a stream is flagged as low statistics.
pub const LOW_STATISTICS_DETECTIONS: f64 = 1e4;
/// Default correlation time.
pub const DEFAULT_TAU_C_NS: f64 = 20.0;
/// Default blinking switching rates (per second).
pub const DEFAULT_BLINK_RATE_HZ: f64 = 1e3;
/// Lower edge of the g0 range that is below the two-emitter threshold yet
/// inconsistent with a clean single emitter.
pub const MULTI_EMITTER_CAVEAT_G0: f64 = 0.15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhotonError {
    #[error("invalid emitter: {0}")]
    InvalidEmitter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("channel {0} has no photons")]
    EmptyChannel(char),
    #[error("g0 = {0} is outside [0, 1)")]
    G0OutOfRange(f64),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// On/off telegraph switching (rates in 1/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blinking {
    /// Rate of switching from dark to bright.
    pub on_rate_hz: f64,
    /// Rate of switching from bright to dark.
    pub off_rate_hz: f64,
}

impl Blinking {
    pub fn duty_cycle(&self) -> f64 {
        self.on_rate_hz / (self.on_rate_hz + self.off_rate_hz)
    }
}

impl Default for Blinking {
    fn default() -> Self {
        Self {
            on_rate_hz: DEFAULT_BLINK_RATE_HZ,
            off_rate_hz: DEFAULT_BLINK_RATE_HZ,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emitter {
    /// Detected count rate while bright (counts/s).
    pub rate_cps: f64,
    pub tau_c_ns: f64,
    pub blinking: Option<Blinking>,
}

impl Emitter {
    pub fn new(rate_cps: f64) -> Self {
        Self {
            rate_cps,
            tau_c_ns: DEFAULT_TAU_C_NS,
            blinking: None,
        }
    }

    /// Emission-cycle rate `1 / (4 tau_c)` in 1/ns.
    fn cycle_rate_per_ns(&self) -> f64 {
        0.25 / self.tau_c_ns
    }

    fn mean_rate_cps(&self) -> f64 {
        self.rate_cps * self.blinking.map_or(1.0, |b| b.duty_cycle())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmitterEnsemble {
    pub emitters: Vec<Emitter>,
    /// Uncorrelated background (counts/s).
    pub background_cps: f64,
}

impl EmitterEnsemble {
    pub fn validate(&self) -> Result<(), PhotonError> {
        if !(self.background_cps >= 0.0 && self.background_cps.is_finite()) {
            return Err(PhotonError::InvalidEmitter("background must be >= 0".into()));
        }
        for (i, e) in self.emitters.iter().enumerate() {
            if !(e.rate_cps > 0.0 && e.tau_c_ns > 0.0) {
                return Err(PhotonError::InvalidEmitter(format!(
                    "emitter {i}: rate and tau_c must be positive"
                )));
            }
            let max = e.cycle_rate_per_ns() * 1e9;
            if e.rate_cps > max {
                return Err(PhotonError::InvalidEmitter(format!(
                    "emitter {i}: rate {} cps exceeds the cycle rate {max} cps",
                    e.rate_cps
                )));
            }
            if let Some(b) = e.blinking {
                if !(b.on_rate_hz > 0.0 && b.off_rate_hz > 0.0) {
                    return Err(PhotonError::InvalidEmitter(format!(
                        "emitter {i}: blinking rates must be positive"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mean_rate_cps(&self) -> f64 {
        self.emitters.iter().map(Emitter::mean_rate_cps).sum::<f64>() + self.background_cps
    }
}

/// Timestamps (ns) from the two detectors of a 50:50 beamsplitter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhotonStream {
    pub channel_a: Vec<u64>,
    pub channel_b: Vec<u64>,
    pub duration_ns: u64,
    pub seed: u64,
    pub low_statistics: bool,
}

impl PhotonStream {
    pub fn detections(&self) -> usize {
        self.channel_a.len() + self.channel_b.len()
    }
}

/// `1 - sum r_i^2 / (sum r_i)^2`.
pub fn g2_zero_analytic(rates: &[f64]) -> Result<f64, PhotonError> {
    if rates.is_empty() {
        return Err(PhotonError::InvalidArgument("empty rate list".into()));
    }
    if rates.iter().any(|r| !(*r > 0.0)) {
        return Err(PhotonError::InvalidArgument("rates must be positive".into()));
    }
    let sum: f64 = rates.iter().sum();
    let sq: f64 = rates.iter().map(|r| r * r).sum();
    Ok(1.0 - sq / (sum * sum))
}

/// `1 - (1 - g0) exp(-|tau| / tau_c)`.
pub fn g2_model(tau_ns: f64, g0: f64, tau_c_ns: f64) -> f64 {
    1.0 - (1.0 - g0) * (-tau_ns.abs() / tau_c_ns).exp()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Bright intervals `[start, end)` in ns covering `[0, duration)`.
fn bright_intervals(blinking: Option<Blinking>, duration: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let Some(b) = blinking else {
        return vec![(0.0, duration)];
    };
    let on = Exp::new(b.off_rate_hz * 1e-9).expect("positive rate");
    let off = Exp::new(b.on_rate_hz * 1e-9).expect("positive rate");
    let mut bright = rng.gen::<f64>() < b.duty_cycle();
    let mut t = 0.0;
    let mut out = Vec::new();
    while t < duration {
        let dwell = if bright { on.sample(rng) } else { off.sample(rng) };
        let end = (t + dwell).min(duration);
        if bright {
            out.push((t, end));
        }
        t += dwell;
        bright = !bright;
    }
    out
}

fn emitter_times(e: &Emitter, duration: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let k = e.cycle_rate_per_ns();
    let keep = e.rate_cps * 1e-9 / k;
    let stage_rate = 2.0 * k;
    let cycles = Geometric::new(keep).expect("probability in (0, 1]");
    let gap = |rng: &mut ChaCha8Rng| {
        let n = cycles.sample(rng) + 1;
        Gamma::new(2.0 * n as f64, 1.0 / stage_rate)
            .expect("positive shape")
            .sample(rng)
    };
    let intervals = bright_intervals(e.blinking, duration, rng);
    let steady = e.blinking.is_none();
    for (start, end) in intervals {
        // a free-running emitter is started well before t = 0 so that the
        // recorded part is stationary; a blinking one restarts on switch-on
        let mut t = if steady {
            -20.0 * e.tau_c_ns - 5e9 / e.rate_cps.max(1.0)
        } else {
            start
        };
        loop {
            t += gap(rng);
            if t >= end {
                break;
            }
            if t >= start {
                out.push(t);
            }
        }
    }
}

/// Simulates detections from all emitters plus background and routes each
/// photon to channel A or B with equal probability.
///
/// Timestamps are truncated to whole nanoseconds; a second photon in the
/// same nanosecond on the same channel is dropped (one-nanosecond dead time).
pub fn simulate_stream(
    ensemble: &EmitterEnsemble,
    duration_s: f64,
    seed: u64,
) -> Result<PhotonStream, PhotonError> {
    ensemble.validate()?;
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(PhotonError::InvalidArgument("duration must be positive".into()));
    }
    let duration = duration_s * 1e9;
    let expected = ensemble.mean_rate_cps() * duration_s;
    let low_statistics = expected < LOW_STATISTICS_DETECTIONS;
    if low_statistics {
        warn!("only {expected:.0} detections expected; g2 estimates will be noisy");
    }
    let mut times = Vec::with_capacity(expected as usize + 16);
    for (i, e) in ensemble.emitters.iter().enumerate() {
        let mut rng = rng_for(seed, i as u64);
        emitter_times(e, duration, &mut rng, &mut times);
    }
    if ensemble.background_cps > 0.0 {
        let mut rng = rng_for(seed, ensemble.emitters.len() as u64);
        let exp = Exp::new(ensemble.background_cps * 1e-9).expect("positive rate");
        let mut t = exp.sample(&mut rng);
        while t < duration {
            times.push(t);
            t += exp.sample(&mut rng);
        }
    }
    times.sort_by(f64::total_cmp);
    let mut rng = rng_for(seed, ensemble.emitters.len() as u64 + 1);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for t in times {
        let stamp = t as u64;
        let ch = if rng.gen::<bool>() { &mut a } else { &mut b };
        if ch.last() != Some(&stamp) {
            ch.push(stamp);
        }
    }
    Ok(PhotonStream {
        channel_a: a,
        channel_b: b,
        duration_ns: duration as u64,
        seed,
        low_statistics,
    })
}

/// Cross-correlation histogram between the two channels.
///
/// Bins are centred on `k * bin_ns` for `k = -K..=K`, `K = window / bin`.
/// Coincidences at `+tau` and `-tau` are pooled, so the histogram is even by
/// construction and does not depend on which detector is called A.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationHistogram {
    pub bin_ns: u64,
    pub window_ns: u64,
    pub tau_ns: Vec<f64>,
    /// Pooled coincidences for `|tau|` in the bin (same value at `+k` and `-k`).
    pub counts: Vec<u64>,
    /// Integer lags pooled into each bin.
    pub lags: Vec<u64>,
    pub g2: Vec<f64>,
    /// Coincidences expected per nanosecond of lag for uncorrelated channels,
    /// times the bin width: `r_A r_B T bin`.
    pub normalization: f64,
}

impl CorrelationHistogram {
    /// Bins with `tau >= 0`, as `(tau, g2, counts, lags)`.
    pub fn non_negative(&self) -> impl Iterator<Item = (f64, f64, u64, u64)> + '_ {
        let k0 = self.tau_ns.len() / 2;
        (k0..self.tau_ns.len()).map(move |i| (self.tau_ns[i], self.g2[i], self.counts[i], self.lags[i]))
    }
}

fn folded_bin(lag: u64, bin: u64) -> usize {
    ((lag + bin / 2) / bin) as usize
}

pub fn hbt_correlate(stream: &PhotonStream, bin_ns: u64, window_ns: u64) -> Result<CorrelationHistogram, PhotonError> {
    if bin_ns == 0 || window_ns == 0 || !window_ns.is_multiple_of(bin_ns) {
        return Err(PhotonError::InvalidArgument(format!(
            "bin {bin_ns} ns must be positive and divide the window {window_ns} ns"
        )));
    }
    if stream.channel_a.is_empty() {
        return Err(PhotonError::EmptyChannel('A'));
    }
    if stream.channel_b.is_empty() {
        return Err(PhotonError::EmptyChannel('B'));
    }
    let k_max = (window_ns / bin_ns) as usize;
    let mut folded = vec![0u64; k_max + 1];
    let mut lag_count = vec![0u64; k_max + 1];
    for lag in 0..=window_ns {
        let k = folded_bin(lag, bin_ns);
        if k <= k_max {
            lag_count[k] += if lag == 0 { 1 } else { 2 };
        }
    }
    let b = &stream.channel_b;
    let mut lo = 0usize;
    for &ta in &stream.channel_a {
        let start = ta.saturating_sub(window_ns);
        while lo < b.len() && b[lo] < start {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() && b[j] <= ta + window_ns {
            let k = folded_bin(b[j].abs_diff(ta), bin_ns);
            if k <= k_max {
                folded[k] += 1;
            }
            j += 1;
        }
    }
    let t = stream.duration_ns as f64;
    let ra = stream.channel_a.len() as f64 / t;
    let rb = stream.channel_b.len() as f64 / t;
    let per_lag = ra * rb * t;
    let n = 2 * k_max + 1;
    let mut tau_ns = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    let mut lags = Vec::with_capacity(n);
    let mut g2 = Vec::with_capacity(n);
    for i in 0..n {
        let k = i.abs_diff(k_max);
        tau_ns.push((i as f64 - k_max as f64) * bin_ns as f64);
        counts.push(folded[k]);
        lags.push(lag_count[k]);
        g2.push(if lag_count[k] > 0 {
            folded[k] as f64 / (per_lag * lag_count[k] as f64)
        } else {
            0.0
        });
    }
    Ok(CorrelationHistogram {
        bin_ns,
        window_ns,
        tau_ns,
        counts,
        lags,
        g2,
        normalization: per_lag * bin_ns as f64,
    })
}

/// `B (1 - (1 - g0) exp(-|tau| / tau_c))` with `p = [g0, tau_c, B]`.
///
/// The baseline `B` absorbs bunching on timescales far beyond the window
/// (for example blinking), so `g0` is the dip depth relative to the local
/// plateau.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct G2Model;

impl Model for G2Model {
    fn n_params(&self) -> usize {
        3
    }

    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        p[2] * g2_model(x, p[0], p[1])
    }

    fn gradient(&self, x: f64, p: &[f64], g: &mut [f64]) {
        let (g0, tc, base) = (p[0], p[1], p[2]);
        let e = (-x.abs() / tc).exp();
        g[0] = base * e;
        g[1] = -base * (1.0 - g0) * e * x.abs() / (tc * tc);
        g[2] = 1.0 - (1.0 - g0) * e;
    }

    fn admissible(&self, p: &[f64]) -> bool {
        p[1] > 0.0 && p[2] > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct G2Fit {
    pub g0: f64,
    pub tau_c_ns: f64,
    pub baseline: f64,
    pub g0_err: f64,
    pub tau_c_err: f64,
    pub baseline_err: f64,
    pub converged: bool,
}

impl G2Fit {
    /// `g0` clamped to `[0, 1]` for emitter-count inference.
    pub fn g0_clamped(&self) -> f64 {
        self.g0.clamp(0.0, 1.0)
    }
}

/// Least-squares fit of the antibunching dip over the `tau >= 0` bins.
pub fn fit_g2(hist: &CorrelationHistogram) -> Result<G2Fit, PhotonError> {
    fit_g2_with(hist, &LmOptions::default())
}

pub fn fit_g2_with(hist: &CorrelationHistogram, opts: &LmOptions) -> Result<G2Fit, PhotonError> {
    let per_lag = hist.normalization / hist.bin_ns as f64;
    let (mut x, mut y, mut s) = (Vec::new(), Vec::new(), Vec::new());
    for (tau, g, c, lags) in hist.non_negative() {
        if lags == 0 {
            continue;
        }
        x.push(tau);
        y.push(g);
        s.push((c.max(1) as f64).sqrt() / (per_lag * lags as f64));
    }
    let data = Profile1D::with_sigma(x, y, s)?;
    let tail_start = data.len() * 3 / 4;
    let base0 = data.values[tail_start..].iter().sum::<f64>() / (data.len() - tail_start) as f64;
    if !(base0 > 0.0) {
        return Err(PhotonError::Fit(FitError::NoPeak));
    }
    let g00 = (data.values[0] / base0).clamp(0.0, 1.0);
    let level = base0 * (1.0 - (1.0 - g00) / std::f64::consts::E);
    let tc0 = data
        .positions
        .iter()
        .zip(&data.values)
        .find(|(_, &v)| v >= level)
        .map(|(&t, _)| t)
        .filter(|t| *t > 0.0)
        .unwrap_or(hist.window_ns as f64 / 10.0);
    let r = lm_fit(&G2Model, &data, &[g00, tc0, base0], opts)?;
    Ok(G2Fit {
        g0: r.params[0],
        tau_c_ns: r.params[1],
        baseline: r.params[2],
        g0_err: r.std_error(0),
        tau_c_err: r.std_error(1),
        baseline_err: r.std_error(2),
        converged: r.converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitterVerdict {
    /// `g0` consistent with a single emitter.
    Single,
    /// Below the 0.5 two-emitter threshold but too high for a clean single
    /// emitter: several unequal or blinking emitters remain possible.
    MultiEmitterPossible,
    /// At or above 0.5.
    Multiple,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmitterCount {
    pub n: f64,
    pub nearest: u32,
    pub verdict: EmitterVerdict,
}

/// `N = 1 / (1 - g0)`.
pub fn emitter_count_estimate(g0: f64) -> Result<EmitterCount, PhotonError> {
    if !(0.0..1.0).contains(&g0) {
        return Err(PhotonError::G0OutOfRange(g0));
    }
    let n = 1.0 / (1.0 - g0);
    let verdict = if g0 >= 0.5 {
        EmitterVerdict::Multiple
    } else if g0 >= MULTI_EMITTER_CAVEAT_G0 {
        EmitterVerdict::MultiEmitterPossible
    } else {
        EmitterVerdict::Single
    };
    Ok(EmitterCount {
        n,
        nearest: n.round() as u32,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ensemble(rates: &[f64]) -> EmitterEnsemble {
        EmitterEnsemble {
            emitters: rates.iter().map(|&r| Emitter::new(r)).collect(),
            background_cps: 0.0,
        }
    }

    #[test]
    fn analytic_g2_examples() {
        assert_eq!(g2_zero_analytic(&[1.0]).unwrap(), 0.0);
        assert!((g2_zero_analytic(&[3.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((g2_zero_analytic(&[2.0, 1.0]).unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert!(g2_zero_analytic(&[]).is_err());
        assert!(g2_zero_analytic(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn model_examples() {
        assert!((g2_model(0.0, 0.3, 20.0) - 0.3).abs() < 1e-15);
        assert!((g2_model(1e6, 0.3, 20.0) - 1.0).abs() < 1e-12);
        assert!((g2_model(20.0, 0.0, 20.0) - 0.632_120_558_828_557_7).abs() < 1e-12);
        assert_eq!(g2_model(-7.0, 0.2, 5.0), g2_model(7.0, 0.2, 5.0));
    }

    #[test]
    fn count_estimate_examples() {
        let c = emitter_count_estimate(0.5).unwrap();
        assert!((c.n - 2.0).abs() < 1e-12);
        assert_eq!(c.verdict, EmitterVerdict::Multiple);
        let c = emitter_count_estimate(0.0).unwrap();
        assert_eq!((c.n, c.nearest, c.verdict), (1.0, 1, EmitterVerdict::Single));
        let c = emitter_count_estimate(0.23).unwrap();
        assert!((c.n - 1.2987).abs() < 1e-4);
        assert_eq!(c.verdict, EmitterVerdict::MultiEmitterPossible);
        assert!(emitter_count_estimate(1.0).is_err());
    }

    #[test]
    fn folded_bins_cover_each_lag_once() {
        for bin in 1..6u64 {
            let window = 4 * bin;
            let mut lags = [0u64; 5];
            for lag in 0..=window {
                let k = folded_bin(lag, bin);
                if k < lags.len() {
                    lags[k] += if lag == 0 { 1 } else { 2 };
                }
            }
            // every interior bin pools `bin` lags on each side
            for &l in &lags[1..4] {
                assert_eq!(l, 2 * bin, "bin {bin}");
            }
        }
    }

    #[test]
    fn noiseless_histogram_fit_round_trip() {
        let k_max = 200usize;
        let per_lag = 500.0;
        let n = 2 * k_max + 1;
        let tau: Vec<f64> = (0..n).map(|i| i as f64 - k_max as f64).collect();
        let g2: Vec<f64> = tau.iter().map(|&t| g2_model(t, 0.3, 20.0)).collect();
        let lags: Vec<u64> = (0..n).map(|i| if i == k_max { 1 } else { 2 }).collect();
        let counts = g2
            .iter()
            .zip(&lags)
            .map(|(g, l)| (g * per_lag * *l as f64).round() as u64)
            .collect();
        let h = CorrelationHistogram {
            bin_ns: 1,
            window_ns: k_max as u64,
            tau_ns: tau,
            counts,
            lags,
            g2,
            normalization: per_lag,
        };
        let f = fit_g2(&h).unwrap();
        assert!((f.g0 - 0.3).abs() < 1e-6, "{f:?}");
        assert!((f.tau_c_ns - 20.0).abs() < 20.0 * 1e-6);
        assert!((f.baseline - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stream_is_deterministic_and_sorted() {
        let e = ensemble(&[2e5, 1e5]);
        let a = simulate_stream(&e, 0.05, 7).unwrap();
        let b = simulate_stream(&e, 0.05, 7).unwrap();
        assert_eq!(a, b);
        for ch in [&a.channel_a, &a.channel_b] {
            assert!(ch.windows(2).all(|w| w[0] < w[1]));
            assert!(ch.iter().all(|&t| t <= a.duration_ns));
        }
        let c = simulate_stream(&e, 0.05, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stream_rate_matches_request() {
        let e = ensemble(&[3e5]);
        let s = simulate_stream(&e, 0.2, 3).unwrap();
        let expected = 6e4;
        let got = s.detections() as f64;
        assert!((got - expected).abs() < 5.0 * expected.sqrt(), "{got}");
        assert!(!s.low_statistics);
        let tiny = simulate_stream(&e, 1e-3, 3).unwrap();
        assert!(tiny.low_statistics);
    }

    #[test]
    fn over_bright_emitter_is_rejected() {
        let e = ensemble(&[2e8]);
        assert!(matches!(simulate_stream(&e, 0.1, 1), Err(PhotonError::InvalidEmitter(_))));
    }

    #[test]
    fn swapping_channels_leaves_histogram_unchanged() {
        let s = simulate_stream(&ensemble(&[4e5]), 0.05, 11).unwrap();
        let swapped = PhotonStream {
            channel_a: s.channel_b.clone(),
            channel_b: s.channel_a.clone(),
            ..s.clone()
        };
        assert_eq!(hbt_correlate(&s, 2, 100).unwrap(), hbt_correlate(&swapped, 2, 100).unwrap());
    }

    #[test]
    fn correlator_rejects_bad_arguments() {
        let s = simulate_stream(&ensemble(&[4e5]), 0.01, 1).unwrap();
        assert!(hbt_correlate(&s, 3, 100).is_err());
        let empty = PhotonStream {
            channel_a: vec![],
            ..s
        };
        assert_eq!(hbt_correlate(&empty, 1, 10).unwrap_err(), PhotonError::EmptyChannel('A'));
    }
}
