//! Euclidean scattering loss and its hand-written gradient: backpropagation
//! through averaging, frequential scattering, and both temporal layers, down
//! to the waveform.
//!
//! Sign convention, fixed here: the loss is `E = 1/2 * |Sx - Sy|^2` over
//! orders 1 and 2, and every `grad_*` function propagates the residual
//! `Sx - Sy`, which is `-dE/dSy`. The waveform-domain output is therefore the
//! *descent* direction: adding a small multiple of it to `y` decreases `E`.
//!
//! Adjoints are taken under the real inner product
//! `<a, b> = Re sum a[i] conj(b[i])`. With the normalized transforms from
//! [`crate::dsp`], the adjoint of every filter-and-fold stage
//! `ifft(subsample(fft(.) * H, k))` is `ifft(tile_k(fft(.)) * H)` with an
//! unscaled tile: the 1/k of the fold cancels against the transform lengths.

use indexmap::IndexMap;
use ndarray::{s, Array2};
use num_complex::Complex64;

use crate::dsp;
use crate::error::{Error, Result};
use crate::filterbank::FilterbankPlan;
use crate::path::{enumerate_paths, CoefficientSet, PathDescriptor, PathKey};
use crate::scattering::ForwardPass;

/// Euclidean loss split by order and by path. Order 0 is excluded: the
/// gradient equations cover only the first and second orders, and the
/// zeroth order's information is matched at initialization instead.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub per_order: IndexMap<u8, f64>,
    pub per_path: IndexMap<PathKey, f64>,
}

/// Waveform-domain descent direction, same length as the analyzed signal.
#[derive(Debug, Clone)]
pub struct GradientSignal {
    pub samples: Vec<f64>,
}

/// Real cotangent block at the resolution of one second-order modulus output.
pub struct ResidualBlock {
    pub key: PathKey,
    pub data: Array2<f64>,
}

/// `E = 1/2 * sum over orders 1 and 2 of squared entrywise differences`.
pub fn scattering_loss(sx: &CoefficientSet, sy: &CoefficientSet) -> Result<LossReport> {
    sx.check_compatible(sy)?;
    let mut per_path = IndexMap::new();
    let mut per_order: IndexMap<u8, f64> = IndexMap::new();
    per_order.insert(1u8, 0.0);
    per_order.insert(2u8, 0.0);
    for ((key, ex), ey) in sx.entries.iter().zip(sy.entries.values()) {
        if key.order == 0 {
            continue;
        }
        let value = 0.5
            * ex.data
                .iter()
                .zip(ey.data.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        per_path.insert(*key, value);
        *per_order.get_mut(&key.order).unwrap() += value;
    }
    let total = per_order.values().sum();
    Ok(LossReport {
        total,
        per_order,
        per_path,
    })
}

fn tile_1d(x: &[Complex64], k: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(x.len() * k);
    for _ in 0..k {
        out.extend_from_slice(x);
    }
    out
}

fn tile_rows(a: &Array2<Complex64>, k: usize) -> Array2<Complex64> {
    if k == 1 {
        return a.clone();
    }
    let (rows, cols) = a.dim();
    let mut out = Array2::<Complex64>::zeros((rows, cols * k));
    for (src, mut dst) in a.rows().into_iter().zip(out.rows_mut()) {
        for b in 0..k {
            for (j, &v) in src.iter().enumerate() {
                dst[b * cols + j] = v;
            }
        }
    }
    out
}

/// Adjoint of `ifft(subsample(fft(rows) * H, 2^sub))` along the trailing axis.
pub(crate) fn adjoint_conv_sub_rows(
    ybar: &Array2<Complex64>,
    filter: &[f64],
    sub: u32,
) -> Result<Array2<Complex64>> {
    let mut hat = ybar.clone();
    dsp::fft_rows_inplace(&mut hat);
    let mut tiled = tile_rows(&hat, 1 << sub);
    dsp::cdgmm_rows_real_inplace(&mut tiled, filter)?;
    dsp::ifft_rows_inplace(&mut tiled);
    Ok(tiled)
}

/// Modulus subgradient: `mbar * w / |w|`, with the phase defined as 0 where
/// `|w|` falls below `1e-12` times the block RMS, so outputs stay finite.
fn phase_mul(mbar: &Array2<f64>, w: &Array2<Complex64>) -> Array2<Complex64> {
    let rms =
        (w.iter().map(|v| v.norm_sqr()).sum::<f64>() / w.len().max(1) as f64).sqrt();
    let eps = 1e-12 * rms;
    let mut out = Array2::<Complex64>::zeros(w.dim());
    for ((o, &g), &z) in out.iter_mut().zip(mbar.iter()).zip(w.iter()) {
        let r = z.norm();
        if r > eps && r > 0.0 {
            *o = z * (g / r);
        }
    }
    out
}

fn phase_mul_1d(mbar: &[f64], z: &[Complex64]) -> Vec<Complex64> {
    let rms = (z.iter().map(|v| v.norm_sqr()).sum::<f64>() / z.len().max(1) as f64).sqrt();
    let eps = 1e-12 * rms;
    mbar.iter()
        .zip(z)
        .map(|(&g, &v)| {
            let r = v.norm();
            if r > eps && r > 0.0 {
                v * (g / r)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect()
}

/// Residual of one path in the descent convention, `Sx - Sy`.
fn residual(sx: &CoefficientSet, sy: &CoefficientSet, key: &PathKey) -> Array2<f64> {
    let ex = &sx.entries[key].data;
    let ey = &sy.entries[key].data;
    ex - ey
}

/// Adjoint of the averaging-and-unpadding tail of one path: maps the final
/// (unpadded) residual back to a real cotangent at the raw block resolution.
fn adjoint_average_and_unpad(
    residual: &Array2<f64>,
    desc: &PathDescriptor,
    plan: &FilterbankPlan,
) -> Result<Array2<f64>> {
    let log2_t = plan.params.log2_t;
    let log2_f = plan.params.log2_f;
    let frames = plan.params.n_input.div_ceil(1 << log2_t);
    let frame_start = plan.pad_left >> log2_t;
    let rows_padded = if desc.key.order == 0 {
        1
    } else {
        plan.n_fr_padded >> log2_f
    };
    let cols_padded = plan.n_padded >> log2_t;

    let mut full = Array2::<f64>::zeros((rows_padded, cols_padded));
    full.slice_mut(s![
        ..residual.nrows(),
        frame_start..frame_start + frames
    ])
    .assign(residual);
    let mut c = full.mapv(|v| Complex64::new(v, 0.0));
    if desc.needs_fr_average {
        let t = dsp::swap_time_frequency(&c);
        let t = adjoint_conv_sub_rows(
            &t,
            plan.phi_f.level(desc.k_fr as usize),
            log2_f - desc.k_fr,
        )?;
        c = dsp::swap_time_frequency(&t);
    }
    if desc.needs_time_average {
        c = adjoint_conv_sub_rows(
            &c,
            plan.phi_t.level(desc.k_time as usize),
            log2_t - desc.k_time,
        )?;
    }
    Ok(c.mapv(|v| v.re))
}

/// Backpropagates the second-order residuals through the averaging filters'
/// adjoints, yielding one real cotangent block per order-2 path, at the
/// resolution of the modulus output.
pub fn grad_u2(
    sx: &CoefficientSet,
    sy: &CoefficientSet,
    plan: &FilterbankPlan,
) -> Result<Vec<ResidualBlock>> {
    sx.check_compatible(sy)?;
    let mut out = Vec::new();
    for desc in enumerate_paths(plan) {
        if desc.key.order != 2 {
            continue;
        }
        let r = residual(sx, sy, &desc.key);
        out.push(ResidualBlock {
            key: desc.key,
            data: adjoint_average_and_unpad(&r, &desc, plan)?,
        });
    }
    Ok(out)
}

/// Accumulator for the adjoint of one frequency-scattering call: partial
/// spectra are summed over filters, then inverted and truncated once.
struct FrAdjoint {
    acc: Array2<Complex64>,
    n1_max: usize,
}

impl FrAdjoint {
    fn new(cols_time: usize, n1_max: usize, plan: &FilterbankPlan) -> Self {
        FrAdjoint {
            acc: Array2::zeros((cols_time, plan.n_fr_padded)),
            n1_max,
        }
    }

    /// Adds the adjoint contribution of one filter output cotangent `wbar`
    /// (rows: frequential bins at stride `2^k_fr`, cols: time).
    fn add(&mut self, wbar: &Array2<Complex64>, filter: &[f64], k_fr: u32) -> Result<()> {
        let mut t = dsp::swap_time_frequency(wbar);
        dsp::fft_rows_inplace(&mut t);
        let mut tiled = tile_rows(&t, 1 << k_fr);
        dsp::cdgmm_rows_real_inplace(&mut tiled, filter)?;
        self.acc += &tiled;
        Ok(())
    }

    /// Finishes the shared inverse transform and strips the zero padding.
    fn finish(mut self) -> Array2<Complex64> {
        dsp::ifft_rows_inplace(&mut self.acc);
        let full = dsp::swap_time_frequency(&self.acc);
        full.slice(s![..self.n1_max, ..]).to_owned()
    }
}

/// Recomputes the spinned frequency-scattering input spectrum of one stacked
/// second-order block (checkpointing: cheaper to redo than to retain).
fn fr_input_spectrum(block: &Array2<Complex64>, plan: &FilterbankPlan) -> Array2<Complex64> {
    let padded = dsp::pad_frequency(block, plan.n_fr_padded - block.nrows());
    let mut x_hat = dsp::swap_time_frequency(&padded);
    dsp::fft_rows_inplace(&mut x_hat);
    x_hat
}

fn conv_sub_from_spectrum(
    x_hat: &Array2<Complex64>,
    filter: &[f64],
    sub: u32,
) -> Result<Array2<Complex64>> {
    let mut y = x_hat.clone();
    dsp::cdgmm_rows_real_inplace(&mut y, filter)?;
    let mut y = dsp::subsample_fourier_rows(&y, 1 << sub)?;
    dsp::ifft_rows_inplace(&mut y);
    Ok(dsp::swap_time_frequency(&y))
}

/// Backpropagates the first-order residuals and the second-order cotangents
/// onto the first-layer scalogram. Returns one real cotangent row per
/// first-layer filter, each at its native stride `2^k1`.
pub fn grad_u1(
    fwd: &ForwardPass,
    g2: &[ResidualBlock],
    sx: &CoefficientSet,
    sy: &CoefficientSet,
    plan: &FilterbankPlan,
) -> Result<Vec<Vec<f64>>> {
    sx.check_compatible(sy)?;
    let retained = fwd.retained()?;
    let log2_t = plan.params.log2_t;
    let n1_count = plan.psi1.len();
    let cols_t = plan.n_padded >> log2_t;
    let half = plan.n_fr_positive();

    let paths: IndexMap<PathKey, PathDescriptor> = enumerate_paths(plan)
        .into_iter()
        .map(|d| (d.key, d))
        .collect();

    // Spectrum-domain accumulators for the first-layer modulus rows.
    let mut u1_bar_hat: Vec<Vec<Complex64>> = retained
        .u1_hat
        .iter()
        .map(|h| vec![Complex64::new(0.0, 0.0); h.len()])
        .collect();

    // --- First order: adjoint of the non-spinned frequency scattering. ---
    let mut fr1 = FrAdjoint::new(cols_t, n1_count, plan);
    for n_fr in 0..half {
        let desc = &paths[&PathKey::order1(n_fr, plan.psi_fr[n_fr].spec.j)];
        let r = residual(sx, sy, &desc.key);
        let mbar = adjoint_average_and_unpad(&r, desc, plan)?;
        let wbar = phase_mul(&mbar, &retained.w1[n_fr]);
        fr1.add(&wbar, plan.psi_fr[n_fr].level(0), desc.k_fr)?;
    }
    {
        // Low-pass branch: linear, no modulus between scattering and output.
        let desc = &paths[&PathKey::order1(half, plan.params.log2_f)];
        let r = residual(sx, sy, &desc.key);
        let sbar = adjoint_average_and_unpad(&r, desc, plan)?;
        let cbar = sbar.mapv(|v| Complex64::new(v, 0.0));
        fr1.add(&cbar, plan.phi_f.level(0), desc.k_fr)?;
    }
    let s1_bar = fr1.finish().mapv(|v| v.re);

    // Adjoint of the temporal averaging that produced each S1 row.
    for n1 in 0..n1_count {
        let k1 = retained.k1[n1];
        let row: Vec<Complex64> = s1_bar
            .row(n1)
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        let hat = dsp::fft(&row);
        let tiled = tile_1d(&hat, 1 << (log2_t - k1));
        let filter = plan.phi_t.level(k1 as usize);
        for (acc, (t, &h)) in u1_bar_hat[n1].iter_mut().zip(tiled.iter().zip(filter)) {
            *acc += t * h;
        }
    }

    // --- Second order: adjoint of spinned scattering, grouped per n2. ---
    let mut by_n2: IndexMap<usize, Vec<&ResidualBlock>> = IndexMap::new();
    for block in g2 {
        by_n2.entry(block.key.n2.unwrap()).or_default().push(block);
    }
    for (&n2, blocks) in &by_n2 {
        let psi2 = &plan.psi2[n2];
        let j2 = psi2.spec.j;
        let k_time = j2.min(log2_t);
        let cols_2 = plan.n_padded >> k_time;

        // Recompute the stacked block from the retained spectra.
        let admissible: Vec<usize> = (0..n1_count)
            .filter(|&n1| plan.psi1[n1].spec.j < j2)
            .collect();
        let n1_max = admissible.len();
        let mut y2 = Array2::<Complex64>::zeros((n1_max, cols_2));
        for (r, &n1) in admissible.iter().enumerate() {
            let k1 = retained.k1[n1];
            let k2 = k_time - k1;
            let prod: Vec<Complex64> = retained.u1_hat[n1]
                .iter()
                .zip(psi2.level(k1 as usize))
                .map(|(&a, &b)| a * b)
                .collect();
            let z = dsp::ifft(&dsp::subsample_fourier(&prod, 1 << k2)?);
            for (c, v) in z.into_iter().enumerate() {
                y2[[r, c]] = v;
            }
        }
        let x_hat = fr_input_spectrum(&y2, plan);

        let mut fr2 = FrAdjoint::new(cols_2, n1_max, plan);
        for block in blocks {
            let n_fr = block.key.n_fr.unwrap();
            let psi_fr = &plan.psi_fr[n_fr];
            let k_fr = psi_fr.spec.j.min(plan.params.log2_f);
            let w = conv_sub_from_spectrum(&x_hat, psi_fr.level(0), k_fr)?;
            let wbar = phase_mul(&block.data, &w);
            fr2.add(&wbar, psi_fr.level(0), k_fr)?;
        }
        let y2_bar = fr2.finish();

        // Adjoint of the second-layer temporal convolutions, row by row.
        for (r, &n1) in admissible.iter().enumerate() {
            let k1 = retained.k1[n1];
            let k2 = k_time - k1;
            let row: Vec<Complex64> = y2_bar.row(r).to_vec();
            let hat = dsp::fft(&row);
            let tiled = tile_1d(&hat, 1 << k2);
            let filter = psi2.level(k1 as usize);
            for (acc, (t, &h)) in u1_bar_hat[n1].iter_mut().zip(tiled.iter().zip(filter)) {
                *acc += t * h;
            }
        }
    }

    // Shared final inverse: spectrum cotangent -> modulus-row cotangent.
    let mut out = Vec::with_capacity(n1_count);
    for hat in u1_bar_hat {
        let row = dsp::ifft(&hat);
        out.push(row.iter().map(|v| v.re).collect());
    }
    Ok(out)
}

/// Backpropagates the first layer into the waveform domain, including the
/// adjoints of padding and subsampling. Returns the descent direction.
pub fn grad_waveform(
    fwd: &ForwardPass,
    grad_u1_rows: &[Vec<f64>],
    plan: &FilterbankPlan,
) -> Result<GradientSignal> {
    let retained = fwd.retained()?;
    if retained.z1.len() != plan.psi1.len() {
        return Err(Error::State(
            "pre-modulus first-layer signals were not retained".into(),
        ));
    }
    if grad_u1_rows.len() != plan.psi1.len() {
        return Err(Error::Size(format!(
            "expected {} scalogram gradient rows, got {}",
            plan.psi1.len(),
            grad_u1_rows.len()
        )));
    }
    let mut x_bar = vec![Complex64::new(0.0, 0.0); plan.n_padded];
    for (n1, psi) in plan.psi1.iter().enumerate() {
        let k1 = retained.k1[n1];
        let zbar = phase_mul_1d(&grad_u1_rows[n1], &retained.z1[n1]);
        let hat = dsp::fft(&zbar);
        let tiled = tile_1d(&hat, 1 << k1);
        for (acc, (t, &h)) in x_bar.iter_mut().zip(tiled.iter().zip(psi.level(0))) {
            *acc += t * h;
        }
    }
    let padded_bar: Vec<f64> = dsp::ifft(&x_bar).iter().map(|v| v.re).collect();
    let samples = dsp::adjoint_pad_time(&padded_bar, plan.params.n_input, plan.pad_left);
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("gradient contains NaN or Inf".into()));
    }
    Ok(GradientSignal { samples })
}

/// Loss and waveform-domain descent direction in one call.
pub fn descent_direction(
    fwd: &ForwardPass,
    sx: &CoefficientSet,
    plan: &FilterbankPlan,
) -> Result<(GradientSignal, LossReport)> {
    let sy = &fwd.coefficients;
    let loss = scattering_loss(sx, sy)?;
    let g2 = grad_u2(sx, sy, plan)?;
    let g1 = grad_u1(fwd, &g2, sx, sy, plan)?;
    let direction = grad_waveform(fwd, &g1, plan)?;
    Ok((direction, loss))
}

/// Outcome of the finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub directions: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    pub median_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        self.passed as f64 / self.directions.max(1) as f64
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Compares the analytic directional derivative of the scattering loss
/// against central finite differences over seeded random directions. For
/// each direction the step is swept over `{1e-4, 1e-5, 1e-6}` times the RMS
/// of `y` and the best agreement is scored.
pub fn finite_difference_check(
    plan: &FilterbankPlan,
    x: &[f64],
    y: &[f64],
    n_directions: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};
    let sx = crate::scattering::forward(x, plan)?;
    let fwd = crate::scattering::forward_retained(y, plan)?;
    let (direction, _) = descent_direction(&fwd, &sx, plan)?;
    let scale = rms(y).max(1e-12);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut errs = Vec::with_capacity(n_directions);
    let mut passed = 0usize;
    for _ in 0..n_directions {
        let mut v: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in v.iter_mut() {
            *a /= norm;
        }
        // Analytic derivative of E along v; the returned signal is -grad E.
        let analytic = -dsp::inner_real(&direction.samples, &v);
        let mut best = f64::INFINITY;
        for h_factor in [1e-4, 1e-5, 1e-6] {
            let h = h_factor * scale;
            let yp: Vec<f64> = y.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let ym: Vec<f64> = y.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let ep = scattering_loss(&sx, &crate::scattering::forward(&yp, plan)?)?.total;
            let em = scattering_loss(&sx, &crate::scattering::forward(&ym, plan)?)?.total;
            let fd = (ep - em) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-300);
            best = best.min(rel);
        }
        errs.push(best);
        if best <= tolerance {
            passed += 1;
        }
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = errs[errs.len() / 2];
    let max = *errs.last().unwrap();
    Ok(GradCheckReport {
        directions: n_directions,
        passed,
        max_rel_err: max,
        median_rel_err: median,
        tolerance,
    })
}
