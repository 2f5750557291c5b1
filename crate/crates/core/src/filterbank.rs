//! Filterbank construction: center-frequency/bandwidth progressions, Morlet
//! and Gaussian filters sampled in the Fourier domain at every resolution the
//! pipeline can request, and the immutable plan tying them together.
//!
//! All frequencies are normalized to a unit sample rate (cycles per sample on
//! the time axis, cycles per bin on the log-frequency axis). Band-pass
//! magnitudes peak at [`PSI_PEAK`]; low-pass filters have unit gain at DC.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dsp;
use crate::error::{Error, Result};

/// Bandwidth floor scale: a filter of bandwidth `SIGMA0 / 2^j` tolerates
/// subsampling by `2^j`.
pub const SIGMA0: f64 = 0.1;
/// Amplitude at which adjacent band-pass filters cross.
pub const R_PSI: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Peak magnitude of every band-pass frequency response.
pub const PSI_PEAK: f64 = 2.0;

/// One band-pass or low-pass filter: center frequency, bandwidth, dyadic
/// subsampling exponent, and spin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterSpec {
    /// Normalized center frequency in (-0.5, 0.5); 0 for low-pass filters.
    pub xi: f64,
    /// Normalized bandwidth, > 0.
    pub sigma: f64,
    /// Dyadic subsampling exponent: `max(0, floor(log2(SIGMA0 / sigma)))`.
    pub j: u32,
    /// `sign(xi)`: -1, 0 (low-pass), or +1.
    pub spin: i8,
}

impl FilterSpec {
    pub fn bandpass(xi: f64, sigma: f64) -> Self {
        FilterSpec {
            xi,
            sigma,
            j: dyadic_scale(sigma),
            spin: if xi > 0.0 { 1 } else { -1 },
        }
    }

    pub fn lowpass(sigma: f64, j: u32) -> Self {
        FilterSpec {
            xi: 0.0,
            sigma,
            j,
            spin: 0,
        }
    }
}

fn dyadic_scale(sigma: f64) -> u32 {
    let j = (SIGMA0 / sigma).log2().floor();
    if j < 0.0 {
        0
    } else {
        j as u32
    }
}

/// Center-frequency/bandwidth progression for one filterbank: geometric at
/// quality factor `q` down to the bandwidth floor `SIGMA0 * 2^-j` (the
/// "elbow"), then an arithmetic tail of `q - 1` constant-bandwidth filters.
///
/// Returns `(xi, sigma)` pairs in decreasing-frequency order. Degenerate
/// parameters produce short sequences, never a panic.
pub fn bandpass_progression(j: u32, q: u32) -> Vec<(f64, f64)> {
    let q_f = q as f64;
    let step = 2f64.powf(1.0 / q_f);
    let factor = 1.0 / step;

    let mut xi = (1.0 / (1.0 + 2f64.powf(3.0 / q_f))).max(0.35);
    let mut sigma = (1.0 - factor) / (1.0 + factor) * xi / (2.0 * (1.0 / R_PSI).ln()).sqrt();
    let sigma_min = SIGMA0 / 2f64.powi(j as i32);

    let mut out = Vec::new();
    if sigma <= sigma_min {
        xi = sigma;
    } else {
        out.push((xi, sigma));
        while sigma > sigma_min * step {
            xi /= step;
            sigma /= step;
            out.push((xi, sigma));
        }
    }

    let elbow_xi = xi;
    for _ in 1..q.max(1) {
        xi -= elbow_xi / q_f;
        out.push((xi, sigma_min));
    }
    out
}

/// Appends a negated-center-frequency twin for every input filter, so that
/// oriented time-frequency patterns can be told apart downstream.
pub fn spin(specs: &[FilterSpec]) -> Vec<FilterSpec> {
    let mut out = Vec::with_capacity(specs.len() * 2);
    out.extend_from_slice(specs);
    for s in specs {
        out.push(FilterSpec {
            xi: -s.xi,
            spin: -s.spin,
            ..*s
        });
    }
    out
}

/// Gaussian sampled on the length-`n` frequency grid, periodized, centered at
/// `center` cycles/sample. Summation order is symmetric so that a DC-centered
/// Gaussian satisfies `bin[k] == bin[n-k]` exactly.
fn periodized_gauss(n: usize, center: f64, sigma: f64) -> Vec<f64> {
    const PERIODS: usize = 4;
    let denom = 2.0 * sigma * sigma;
    (0..n)
        .map(|k| {
            let f = k as f64 / n as f64;
            let mut d = (f - center).rem_euclid(1.0);
            if d >= 0.5 {
                d -= 1.0;
            }
            let mut acc = (-d * d / denom).exp();
            for p in 1..=PERIODS {
                let hi = d + p as f64;
                let lo = d - p as f64;
                acc += (-hi * hi / denom).exp() + (-lo * lo / denom).exp();
            }
            acc
        })
        .collect()
}

fn check_resolution(samples: &[f64], what: &str, sigma: f64) -> Result<()> {
    let peak = samples.iter().cloned().fold(0.0, f64::max);
    let above = samples.iter().filter(|&&v| v > 0.5 * peak).count();
    if above < 2 {
        return Err(Error::Resolution(format!(
            "{what} with sigma {sigma:.3e} is underresolved on a {}-point grid \
             ({above} bin(s) above half-peak)",
            samples.len()
        )));
    }
    Ok(())
}

/// Morlet band-pass filter sampled in the Fourier domain: a Gaussian bump at
/// `xi` minus a DC-centered Gaussian scaled so the DC bin vanishes exactly
/// (one vanishing moment). Peak magnitude is normalized to [`PSI_PEAK`].
pub fn morlet_fourier(n: usize, xi: f64, sigma: f64) -> Result<Vec<f64>> {
    if !n.is_power_of_two() {
        return Err(Error::Size(format!(
            "filter grid length must be a power of two, got {n}"
        )));
    }
    let gabor = periodized_gauss(n, xi, sigma);
    let lowpass = periodized_gauss(n, 0.0, sigma);
    let kappa = gabor[0] / lowpass[0];
    let mut out: Vec<f64> = gabor
        .iter()
        .zip(&lowpass)
        .map(|(&g, &l)| g - kappa * l)
        .collect();
    out[0] = 0.0;
    check_resolution(&out.iter().map(|v| v.abs()).collect::<Vec<_>>(), "Morlet", sigma)?;
    let peak = out.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let scale = PSI_PEAK / peak;
    for v in out.iter_mut() {
        *v *= scale;
    }
    Ok(out)
}

/// DC-centered Gaussian low-pass sampled in the Fourier domain, unit gain at DC.
pub fn gauss_fourier(n: usize, sigma: f64) -> Result<Vec<f64>> {
    if !n.is_power_of_two() {
        return Err(Error::Size(format!(
            "filter grid length must be a power of two, got {n}"
        )));
    }
    let mut out = periodized_gauss(n, 0.0, sigma);
    check_resolution(&out, "Gaussian low-pass", sigma)?;
    let scale = 1.0 / out[0];
    for v in out.iter_mut() {
        *v *= scale;
    }
    Ok(out)
}

/// A filter sampled at level 0 plus periodized copies; level k has length
/// `base / 2^k` and equals the level-0 response folded by `2^k` with sum
/// aggregation, so low-pass filters keep unit DC gain at every level.
#[derive(Debug, Clone)]
pub struct SampledFilter {
    pub spec: FilterSpec,
    pub levels: Vec<Vec<f64>>,
}

impl SampledFilter {
    fn sample(spec: FilterSpec, n: usize, max_level: u32) -> Result<Self> {
        let level0 = if spec.spin == 0 {
            gauss_fourier(n, spec.sigma)?
        } else {
            morlet_fourier(n, spec.xi, spec.sigma)?
        };
        let mut levels = vec![level0];
        for _ in 0..max_level {
            let prev = levels.last().unwrap();
            levels.push(fold_real(prev));
        }
        Ok(SampledFilter { spec, levels })
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }
}

/// One fold-by-two of a real frequency response (sum of the two halves, the
/// unit-DC-gain convention for filters; data folding carries the 1/k).
fn fold_real(x: &[f64]) -> Vec<f64> {
    let m = x.len() / 2;
    (0..m).map(|j| x[j] + x[j + m]).collect()
}

/// Hyperparameters of a scattering plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PlanParams {
    /// Temporal scale: first- and second-layer bandwidth floor `SIGMA0 * 2^-j`.
    pub j: u32,
    /// First-layer quality factor.
    pub q1: u32,
    /// Second-layer quality factor.
    pub q2: u32,
    /// Frequential scale.
    pub j_fr: u32,
    /// Frequential quality factor.
    pub q_fr: u32,
    /// Temporal averaging: `T = 2^log2_t` samples.
    pub log2_t: u32,
    /// Frequential averaging: `F = 2^log2_f` bins.
    pub log2_f: u32,
    /// Length of the signals the plan analyzes.
    pub n_input: usize,
}

impl Default for PlanParams {
    fn default() -> Self {
        PlanParams {
            j: 10,
            q1: 8,
            q2: 1,
            j_fr: 4,
            q_fr: 1,
            log2_t: 10,
            log2_f: 2,
            n_input: 1 << 15,
        }
    }
}

/// Immutable compiled set of the three wavelet filterbanks plus the two
/// averaging low-pass filters, each sampled in the Fourier domain at every
/// level the pipeline can request. Freely shareable across threads.
#[derive(Debug, Clone)]
pub struct FilterbankPlan {
    pub params: PlanParams,
    /// First temporal layer, strictly decreasing center frequencies.
    pub psi1: Vec<SampledFilter>,
    /// Second temporal layer.
    pub psi2: Vec<SampledFilter>,
    /// Frequential layer, spinned: positive spins first, then their
    /// negated-frequency twins.
    pub psi_fr: Vec<SampledFilter>,
    /// Temporal Gaussian of width `T = 2^log2_t` samples.
    pub phi_t: SampledFilter,
    /// Frequential Gaussian of width `F = 2^log2_f` bins.
    pub phi_f: SampledFilter,
    /// Padded temporal transform size.
    pub n_padded: usize,
    /// Padded frequential transform size.
    pub n_fr_padded: usize,
    /// Left reflection-padding amount, a multiple of `2^log2_t`.
    pub pad_left: usize,
}

/// Builds the full plan for the given hyperparameters and input length.
///
/// Filters that cannot be resolved on the resulting grids produce a
/// [`Error::Resolution`] instead of being silently widened, so plans are
/// reproducible.
pub fn build_plan(params: PlanParams) -> Result<FilterbankPlan> {
    if params.j < 1 {
        return Err(Error::Config("j must be >= 1".into()));
    }
    if params.q1 < 1 || params.q2 < 1 || params.q_fr < 1 {
        return Err(Error::Config("quality factors must be >= 1".into()));
    }
    if params.j_fr < 1 {
        return Err(Error::Config("j_fr must be >= 1".into()));
    }
    if params.log2_t > params.j {
        return Err(Error::Config(format!(
            "log2_t ({}) must not exceed j ({})",
            params.log2_t, params.j
        )));
    }
    if params.log2_f > params.j_fr {
        return Err(Error::Config(format!(
            "log2_f ({}) must not exceed j_fr ({})",
            params.log2_f, params.j_fr
        )));
    }
    if params.n_input < 2 {
        return Err(Error::Config("n_input must be >= 2".into()));
    }

    let t = 1usize << params.log2_t;
    let n_padded = (params.n_input + 2 * t).next_power_of_two();
    let pad_half = (n_padded - params.n_input) / 2;
    let pad_left = (pad_half / t) * t;

    let psi1_specs: Vec<FilterSpec> = bandpass_progression(params.j, params.q1)
        .into_iter()
        .map(|(xi, sigma)| FilterSpec::bandpass(xi, sigma))
        .collect();
    let psi2_specs: Vec<FilterSpec> = bandpass_progression(params.j, params.q2)
        .into_iter()
        .map(|(xi, sigma)| FilterSpec::bandpass(xi, sigma))
        .collect();
    let fr_specs: Vec<FilterSpec> = bandpass_progression(params.j_fr, params.q_fr)
        .into_iter()
        .map(|(xi, sigma)| FilterSpec::bandpass(xi, sigma))
        .collect();
    let fr_spinned = spin(&fr_specs);

    // Frequential grid: room for every first-layer bin plus filter support.
    let n_fr_padded =
        dsp::next_power_of_two(psi1_specs.len() + (1usize << (params.j_fr + 1)));

    let psi1 = psi1_specs
        .into_iter()
        .map(|s| SampledFilter::sample(s, n_padded, 0))
        .collect::<Result<Vec<_>>>()?;
    let psi2 = psi2_specs
        .into_iter()
        .map(|s| SampledFilter::sample(s, n_padded, params.log2_t))
        .collect::<Result<Vec<_>>>()?;
    let psi_fr = fr_spinned
        .into_iter()
        .map(|s| SampledFilter::sample(s, n_fr_padded, 0))
        .collect::<Result<Vec<_>>>()?;
    let phi_t = SampledFilter::sample(
        FilterSpec::lowpass(SIGMA0 / t as f64 * 1.0, params.log2_t),
        n_padded,
        params.log2_t,
    )?;
    let phi_f = SampledFilter::sample(
        FilterSpec::lowpass(SIGMA0 / (1u64 << params.log2_f) as f64, params.log2_f),
        n_fr_padded,
        params.log2_f,
    )?;

    Ok(FilterbankPlan {
        params,
        psi1,
        psi2,
        psi_fr,
        phi_t,
        phi_f,
        n_padded,
        n_fr_padded,
        pad_left,
    })
}

impl FilterbankPlan {
    /// Number of positive-spin frequential filters (half of `psi_fr`).
    pub fn n_fr_positive(&self) -> usize {
        self.psi_fr.len() / 2
    }

    /// Short stable hash of the hyperparameters and derived sizes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!(
            "j={} q1={} q2={} j_fr={} q_fr={} log2_t={} log2_f={} n_input={} \
             n_padded={} n_fr_padded={} pad_left={}",
            self.params.j,
            self.params.q1,
            self.params.q2,
            self.params.j_fr,
            self.params.q_fr,
            self.params.log2_t,
            self.params.log2_f,
            self.params.n_input,
            self.n_padded,
            self.n_fr_padded,
            self.pad_left
        ));
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Littlewood-Paley energy diagnostic for the first temporal filterbank.
    pub fn littlewood_paley(&self) -> FrameDiagnostic {
        let n = self.n_padded;
        let sigma_min = SIGMA0 / 2f64.powi(self.params.j as i32);
        let band_min = 2.0 * sigma_min;
        // The generator saturates its first center frequency at 0.35 for
        // moderate quality factors, so coverage can genuinely end below 0.45.
        let xi_max = self
            .psi1
            .iter()
            .map(|f| f.spec.xi)
            .fold(0.0, f64::max);
        let band_max = 0.45f64.min(xi_max);

        let mut lower = f64::INFINITY;
        let mut upper = 0.0f64;
        let mut global_max = 0.0f64;
        for k in 0..n {
            let f = k as f64 / n as f64;
            let mut sum = 0.0;
            for psi in &self.psi1 {
                let v = psi.level(0)[k];
                sum += v * v;
            }
            let phi = self.phi_t.level(0)[k];
            let sum_with_phi = sum + phi * phi;
            global_max = global_max.max(sum_with_phi);
            if f >= band_min && f <= band_max {
                lower = lower.min(sum_with_phi);
                upper = upper.max(sum_with_phi);
            }
        }
        FrameDiagnostic {
            band_min,
            band_max,
            lower,
            upper,
            global_max,
        }
    }
}

/// Energy envelope of the first filterbank over its covered band. This is a
/// sanity diagnostic, not a tight frame bound.
#[derive(Debug, Clone, Copy)]
pub struct FrameDiagnostic {
    pub band_min: f64,
    pub band_max: f64,
    /// Minimum of the squared-magnitude sum over the covered band.
    pub lower: f64,
    /// Maximum of the squared-magnitude sum over the covered band.
    pub upper: f64,
    /// Maximum of the squared-magnitude sum over the whole grid.
    pub global_max: f64,
}
