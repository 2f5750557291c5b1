//! The forward joint time-frequency scattering pipeline: scalogram, temporal
//! averaging, width-first second temporal layer, spinned and non-spinned
//! frequential scattering, and the final averaging into a coefficient set.
//!
//! Everything runs on the reflection-padded domain; unpadding happens last,
//! inside [`average_and_format`]. A forward pass is a pure function of the
//! input signal and the plan, so concurrent calls sharing one plan are safe.

use ndarray::{s, Array2};
use num_complex::Complex64;

use crate::dsp;
use crate::error::{Error, Result};
use crate::filterbank::FilterbankPlan;
use crate::path::{enumerate_paths, CoefficientEntry, CoefficientSet, PathDescriptor};

/// First-layer scalogram at the common stride `2^log2_t`, with per-row
/// dyadic scales. Rows are computed at their native stride
/// `2^min(j1, log2_t)` and decimated to the common stride for stacking.
pub struct Scalogram {
    pub data: Array2<f64>,
    pub j1: Vec<u32>,
}

/// Output of the width-first temporal pass.
pub struct TimeScattering {
    /// Temporally averaged zeroth order, padded domain, stride `2^log2_t`.
    pub s0: Vec<f64>,
    /// Temporally averaged first order, one row per first-layer filter.
    pub s1: Array2<f64>,
    /// One stacked complex block per admissible second-layer filter.
    pub y2: Vec<Y2Block>,
}

/// Stack over all first-layer rows with `j1 < j2` of the complex signals
/// `(|x * psi1| * psi2)` at time stride `2^min(j2, log2_t)`.
pub struct Y2Block {
    pub n2: usize,
    pub j2: u32,
    pub n1_max: usize,
    pub coef: Array2<Complex64>,
}

/// One output of [`frequency_scattering`].
pub struct FrequencyScattered {
    /// Position in the iteration order of the applied filter list.
    pub n_fr: usize,
    pub spin: i8,
    pub j_fr: u32,
    /// Applied frequential subsampling exponent `min(j_fr, log2_f)`.
    pub k_fr: u32,
    /// True for the frequential low-pass branch of the non-spinned case.
    pub lowpass: bool,
    /// `(n_fr_padded / 2^k_fr)` rows by the input's time columns.
    pub coef: Array2<Complex64>,
}

/// A real block awaiting averaging/unpadding, tagged with its bookkeeping.
pub struct RawBlock {
    pub desc: PathDescriptor,
    pub data: Array2<f64>,
}

/// Forward pass output; `retained` is populated only in with-gradients mode.
pub struct ForwardPass {
    pub coefficients: CoefficientSet,
    pub(crate) retained: Option<Retained>,
}

/// Intermediates the backward pass consumes. Second-order pre-modulus blocks
/// are recomputed from `u1_hat` instead of being stored.
pub(crate) struct Retained {
    /// Pre-modulus first-layer signals at stride `2^k1`, one per filter.
    pub z1: Vec<Vec<Complex64>>,
    /// First-layer modulus rows.
    pub u1m: Vec<Vec<f64>>,
    /// Spectra of the modulus rows, reused by both averaging and layer two.
    pub u1_hat: Vec<Vec<Complex64>>,
    pub k1: Vec<u32>,
    /// Pre-modulus non-spinned frequential blocks, indexed by n_fr.
    pub w1: Vec<Array2<Complex64>>,
}

impl ForwardPass {
    pub(crate) fn retained(&self) -> Result<&Retained> {
        self.retained.as_ref().ok_or_else(|| {
            Error::State("forward pass was not run in with-gradients mode".into())
        })
    }
}

fn ensure_finite(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("input contains NaN or Inf".into()));
    }
    Ok(())
}

fn to_complex(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// `ifft(subsample(X * H, 2^sub))` for a 1-D spectrum and real filter.
fn conv_sub_1d(x_hat: &[Complex64], filter: &[f64], sub: u32) -> Result<Vec<Complex64>> {
    if x_hat.len() != filter.len() {
        return Err(Error::Size(format!(
            "spectrum length {} does not match filter length {}",
            x_hat.len(),
            filter.len()
        )));
    }
    let prod: Vec<Complex64> = x_hat.iter().zip(filter).map(|(&a, &b)| a * b).collect();
    let folded = dsp::subsample_fourier(&prod, 1 << sub)?;
    Ok(dsp::ifft(&folded))
}

/// Row-wise (trailing-axis) filter-and-fold: `ifft(subsample(fft(row) * H))`.
pub(crate) fn conv_sub_rows(
    block: &Array2<Complex64>,
    filter: &[f64],
    sub: u32,
) -> Result<Array2<Complex64>> {
    let mut hat = block.clone();
    dsp::fft_rows_inplace(&mut hat);
    dsp::cdgmm_rows_real_inplace(&mut hat, filter)?;
    let mut out = dsp::subsample_fourier_rows(&hat, 1 << sub)?;
    dsp::ifft_rows_inplace(&mut out);
    Ok(out)
}

pub(crate) struct FirstLayer {
    pub z1: Vec<Vec<Complex64>>,
    pub u1m: Vec<Vec<f64>>,
    pub u1_hat: Vec<Vec<Complex64>>,
    pub k1: Vec<u32>,
}

/// Scalogram rows at their native strides, plus spectra for downstream use.
pub(crate) fn first_layer(
    x_hat: &[Complex64],
    plan: &FilterbankPlan,
    retain_premodulus: bool,
) -> Result<FirstLayer> {
    let log2_t = plan.params.log2_t;
    let n = plan.psi1.len();
    let mut z1 = Vec::with_capacity(if retain_premodulus { n } else { 0 });
    let mut u1m = Vec::with_capacity(n);
    let mut u1_hat = Vec::with_capacity(n);
    let mut k1 = Vec::with_capacity(n);

    for psi in &plan.psi1 {
        let k = psi.spec.j.min(log2_t);
        let z = conv_sub_1d(x_hat, psi.level(0), k)?;
        let m = dsp::modulus(&z);
        let mut hat = to_complex(&m);
        dsp::fft_inplace(&mut hat);
        if retain_premodulus {
            z1.push(z);
        }
        u1m.push(m);
        u1_hat.push(hat);
        k1.push(k);
    }
    Ok(FirstLayer { z1, u1m, u1_hat, k1 })
}

/// First-layer scalogram of a padded signal, rows decimated to the common
/// stride `2^log2_t` for stacking. Diagnostic-grade: the pipeline itself
/// averages with the temporal low-pass before completing the stride.
pub fn compute_scalogram(x_padded: &[f64], plan: &FilterbankPlan) -> Result<Scalogram> {
    ensure_finite(x_padded)?;
    if x_padded.len() != plan.n_padded {
        return Err(Error::Size(format!(
            "expected a padded signal of length {}, got {}",
            plan.n_padded,
            x_padded.len()
        )));
    }
    let x_hat = dsp::rfft(x_padded)?;
    let layer = first_layer(&x_hat, plan, false)?;
    let cols = plan.n_padded >> plan.params.log2_t;
    let mut data = Array2::<f64>::zeros((plan.psi1.len(), cols));
    for (n1, row) in layer.u1m.iter().enumerate() {
        let step = 1usize << (plan.params.log2_t - layer.k1[n1]);
        for (c, v) in row.iter().step_by(step).enumerate() {
            data[[n1, c]] = *v;
        }
    }
    Ok(Scalogram {
        data,
        j1: plan.psi1.iter().map(|p| p.spec.j).collect(),
    })
}

fn s1_rows(layer: &FirstLayer, plan: &FilterbankPlan) -> Result<Array2<f64>> {
    let log2_t = plan.params.log2_t;
    let cols = plan.n_padded >> log2_t;
    let mut s1 = Array2::<f64>::zeros((plan.psi1.len(), cols));
    for (n1, hat) in layer.u1_hat.iter().enumerate() {
        let k1 = layer.k1[n1];
        let row = conv_sub_1d(hat, plan.phi_t.level(k1 as usize), log2_t - k1)?;
        for (c, v) in row.iter().enumerate() {
            s1[[n1, c]] = v.re;
        }
    }
    Ok(s1)
}

fn second_layer(layer: &FirstLayer, plan: &FilterbankPlan) -> Result<Vec<Y2Block>> {
    let log2_t = plan.params.log2_t;
    let mut out = Vec::new();
    for (n2, psi2) in plan.psi2.iter().enumerate() {
        let j2 = psi2.spec.j;
        let k_time = j2.min(log2_t);
        let cols = plan.n_padded >> k_time;
        let mut rows = Vec::new();
        for (n1, hat) in layer.u1_hat.iter().enumerate() {
            let j1 = plan.psi1[n1].spec.j;
            if j2 > j1 {
                let k1 = layer.k1[n1];
                let k2 = k_time - k1;
                rows.push(conv_sub_1d(hat, psi2.level(k1 as usize), k2)?);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let n1_max = rows.len();
        let mut coef = Array2::<Complex64>::zeros((n1_max, cols));
        for (r, row) in rows.into_iter().enumerate() {
            for (c, v) in row.into_iter().enumerate() {
                coef[[r, c]] = v;
            }
        }
        out.push(Y2Block {
            n2,
            j2,
            n1_max,
            coef,
        });
    }
    Ok(out)
}

/// Width-first temporal scattering: the averaged zeroth and first orders,
/// then one stacked complex block per second-layer filter with at least one
/// admissible first-layer path (`j2 > j1`).
pub fn time_scattering_widthfirst(
    x_padded: &[f64],
    plan: &FilterbankPlan,
) -> Result<TimeScattering> {
    ensure_finite(x_padded)?;
    if x_padded.len() != plan.n_padded {
        return Err(Error::Size(format!(
            "expected a padded signal of length {}, got {}",
            plan.n_padded,
            x_padded.len()
        )));
    }
    let x_hat = dsp::rfft(x_padded)?;
    let layer = first_layer(&x_hat, plan, false)?;
    let s0 = conv_sub_1d(&x_hat, plan.phi_t.level(0), plan.params.log2_t)?
        .iter()
        .map(|v| v.re)
        .collect();
    let s1 = s1_rows(&layer, plan)?;
    let y2 = second_layer(&layer, plan)?;
    Ok(TimeScattering { s0, s1, y2 })
}

/// Scattering along the log-frequency axis: zero-pad the `n1` axis to the
/// frequential grid, transform, and band-pass with the spinned filterbank.
///
/// With `spinned` set, every filter (both spins) is applied. Otherwise the
/// input is treated as real: only nonnegative spins act, the positive-spin
/// half first and the frequential low-pass as the final, zero-spin output.
pub fn frequency_scattering(
    block: &Array2<Complex64>,
    n1_max: usize,
    plan: &FilterbankPlan,
    spinned: bool,
) -> Result<Vec<FrequencyScattered>> {
    if block.nrows() != n1_max {
        return Err(Error::Size(format!(
            "block has {} rows but n1_max is {n1_max}",
            block.nrows()
        )));
    }
    if n1_max > plan.n_fr_padded {
        return Err(Error::Size(format!(
            "n1_max {n1_max} exceeds the frequential grid {}",
            plan.n_fr_padded
        )));
    }
    let log2_f = plan.params.log2_f;
    let padded = dsp::pad_frequency(block, plan.n_fr_padded - n1_max);
    let mut x_hat = dsp::swap_time_frequency(&padded);
    dsp::fft_rows_inplace(&mut x_hat);

    // (filter samples, j_fr, spin, lowpass)
    let mut filters: Vec<(&[f64], u32, i8, bool)> = Vec::new();
    if spinned {
        for psi in &plan.psi_fr {
            filters.push((psi.level(0), psi.spec.j, psi.spec.spin, false));
        }
    } else {
        for psi in &plan.psi_fr[..plan.n_fr_positive()] {
            filters.push((psi.level(0), psi.spec.j, psi.spec.spin, false));
        }
        filters.push((plan.phi_f.level(0), log2_f, 0, true));
    }

    let mut out = Vec::with_capacity(filters.len());
    for (n_fr, (filter, j_fr, spin, lowpass)) in filters.into_iter().enumerate() {
        let k_fr = j_fr.min(log2_f);
        let mut y = x_hat.clone();
        dsp::cdgmm_rows_real_inplace(&mut y, filter)?;
        let mut y = dsp::subsample_fourier_rows(&y, 1 << k_fr)?;
        dsp::ifft_rows_inplace(&mut y);
        out.push(FrequencyScattered {
            n_fr,
            spin,
            j_fr,
            k_fr,
            lowpass,
            coef: dsp::swap_time_frequency(&y),
        });
    }
    Ok(out)
}

/// Applies the temporal and frequential averaging filters each raw block
/// still needs, completes both strides, unpads both axes, and assembles the
/// ordered coefficient set.
pub fn average_and_format(
    blocks: Vec<RawBlock>,
    plan: &FilterbankPlan,
) -> Result<CoefficientSet> {
    let log2_t = plan.params.log2_t;
    let log2_f = plan.params.log2_f;
    let frames = plan.params.n_input.div_ceil(1 << log2_t);
    let frame_start = plan.pad_left >> log2_t;
    let mut entries = indexmap::IndexMap::new();

    for block in blocks {
        let desc = &block.desc;
        let expected_cols = plan.n_padded >> desc.k_time;
        if block.data.ncols() != expected_cols {
            return Err(Error::State(format!(
                "{}: raw block has {} columns, stride bookkeeping expects {}",
                desc.key.label(),
                block.data.ncols(),
                expected_cols
            )));
        }
        let mut data = block.data.mapv(|v| Complex64::new(v, 0.0));
        if desc.needs_time_average {
            data = conv_sub_rows(
                &data,
                plan.phi_t.level(desc.k_time as usize),
                log2_t - desc.k_time,
            )?;
        } else if data.ncols() != plan.n_padded >> log2_t {
            return Err(Error::State(format!(
                "{}: block marked time-complete at the wrong stride",
                desc.key.label()
            )));
        }
        if desc.needs_fr_average {
            let mut t = dsp::swap_time_frequency(&data);
            t = conv_sub_rows(
                &t,
                plan.phi_f.level(desc.k_fr as usize),
                log2_f - desc.k_fr,
            )?;
            data = dsp::swap_time_frequency(&t);
        }
        let real = data.mapv(|v| v.re);

        let rows_out = if desc.key.order == 0 {
            1
        } else {
            desc.n1_max.div_ceil(1 << log2_f)
        };
        let unpadded = real
            .slice(s![..rows_out, frame_start..frame_start + frames])
            .to_owned();
        entries.insert(
            desc.key,
            CoefficientEntry {
                data: unpadded,
                n1_max: desc.n1_max,
            },
        );
    }

    Ok(CoefficientSet {
        entries,
        log2_t,
        log2_f,
        plan_fingerprint: plan.fingerprint(),
    })
}

/// Everything downstream of the first layer: averaging, both scattering
/// stages along frequency, and assembly. `s0_source` is the raw padded
/// waveform, or zeros when the pipeline is driven from a bare scalogram.
fn assemble_from_first_layer(
    layer: &FirstLayer,
    s0_source: Option<&[f64]>,
    plan: &FilterbankPlan,
    retain_w1: bool,
) -> Result<(CoefficientSet, Vec<Array2<Complex64>>)> {
    let s1 = s1_rows(layer, plan)?;
    let y2 = second_layer(layer, plan)?;
    let paths = enumerate_paths(plan);

    let mut blocks: Vec<RawBlock> = Vec::with_capacity(paths.len());
    let mut path_iter = paths.into_iter();

    // Zeroth order: the padded waveform itself; averaging happens below.
    let mut x_row = Array2::<f64>::zeros((1, plan.n_padded));
    if let Some(padded) = s0_source {
        for (c, &v) in padded.iter().enumerate() {
            x_row[[0, c]] = v;
        }
    }
    blocks.push(RawBlock {
        desc: path_iter.next().expect("path table starts with order 0"),
        data: x_row,
    });

    // First order: non-spinned frequency scattering of the averaged rows.
    let s1_complex = s1.mapv(|v| Complex64::new(v, 0.0));
    let fr1 = frequency_scattering(&s1_complex, plan.psi1.len(), plan, false)?;
    let mut w1 = Vec::with_capacity(if retain_w1 { fr1.len() - 1 } else { 0 });
    for fr in &fr1 {
        let desc = path_iter
            .next()
            .ok_or_else(|| Error::State("path table shorter than emission".into()))?;
        debug_assert_eq!(desc.key.n_fr, Some(fr.n_fr));
        let data = if fr.lowpass {
            fr.coef.mapv(|v| v.re)
        } else {
            if retain_w1 {
                w1.push(fr.coef.clone());
            }
            dsp::modulus_2d(&fr.coef)
        };
        blocks.push(RawBlock { desc, data });
    }

    // Second order: spinned frequency scattering of every stacked block.
    for y2_block in &y2 {
        let fr2 = frequency_scattering(&y2_block.coef, y2_block.n1_max, plan, true)?;
        for fr in fr2 {
            let desc = path_iter
                .next()
                .ok_or_else(|| Error::State("path table shorter than emission".into()))?;
            debug_assert_eq!(desc.key.n2, Some(y2_block.n2));
            debug_assert_eq!(desc.key.n_fr, Some(fr.n_fr));
            blocks.push(RawBlock {
                desc,
                data: dsp::modulus_2d(&fr.coef),
            });
        }
    }
    if path_iter.next().is_some() {
        return Err(Error::State("path table longer than emission".into()));
    }

    let coefficients = average_and_format(blocks, plan)?;
    Ok((coefficients, w1))
}

fn forward_inner(x: &[f64], plan: &FilterbankPlan, retain: bool) -> Result<ForwardPass> {
    ensure_finite(x)?;
    if x.len() != plan.params.n_input {
        return Err(Error::Size(format!(
            "plan expects {} samples, got {}",
            plan.params.n_input,
            x.len()
        )));
    }
    let padded = dsp::pad_time_with(x, plan.n_padded, plan.pad_left)?;
    let x_hat = dsp::rfft(&padded)?;
    let layer = first_layer(&x_hat, plan, retain)?;
    let (coefficients, w1) = assemble_from_first_layer(&layer, Some(&padded), plan, retain)?;
    Ok(ForwardPass {
        coefficients,
        retained: retain.then_some(Retained {
            z1: layer.z1,
            u1m: layer.u1m,
            u1_hat: layer.u1_hat,
            k1: layer.k1,
            w1,
        }),
    })
}

/// Drives the pipeline from externally supplied scalogram rows (each at its
/// native stride), with a zero zeroth order. Used to differentiate the loss
/// against first-layer entries.
pub(crate) fn forward_from_u1m(
    u1m: &[Vec<f64>],
    plan: &FilterbankPlan,
) -> Result<CoefficientSet> {
    if u1m.len() != plan.psi1.len() {
        return Err(Error::Size(format!(
            "expected {} scalogram rows, got {}",
            plan.psi1.len(),
            u1m.len()
        )));
    }
    let mut u1_hat = Vec::with_capacity(u1m.len());
    let mut k1 = Vec::with_capacity(u1m.len());
    for (n1, row) in u1m.iter().enumerate() {
        let k = plan.psi1[n1].spec.j.min(plan.params.log2_t);
        if row.len() != plan.n_padded >> k {
            return Err(Error::Size(format!(
                "scalogram row {n1} has length {}, expected {}",
                row.len(),
                plan.n_padded >> k
            )));
        }
        let mut hat = to_complex(row);
        dsp::fft_inplace(&mut hat);
        u1_hat.push(hat);
        k1.push(k);
    }
    let layer = FirstLayer {
        z1: Vec::new(),
        u1m: u1m.to_vec(),
        u1_hat,
        k1,
    };
    assemble_from_first_layer(&layer, None, plan, false).map(|(set, _)| set)
}

/// Full forward transform of an `n_input`-sample signal.
pub fn forward(x: &[f64], plan: &FilterbankPlan) -> Result<CoefficientSet> {
    forward_inner(x, plan, false).map(|f| f.coefficients)
}

/// Forward transform that retains the intermediates the backward pass needs.
pub fn forward_retained(x: &[f64], plan: &FilterbankPlan) -> Result<ForwardPass> {
    forward_inner(x, plan, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterbank::{build_plan, PlanParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk_params() -> PlanParams {
        PlanParams {
            j: 5,
            q1: 2,
            q2: 1,
            j_fr: 3,
            q_fr: 1,
            log2_t: 3,
            log2_f: 1,
            n_input: 1 << 10,
        }
    }

    fn random_signal(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn zero_signal_zero_everything() {
        let plan = build_plan(desk_params()).unwrap();
        let zeros = vec![0.0; plan.n_padded];
        let sc = compute_scalogram(&zeros, &plan).unwrap();
        assert!(sc.data.iter().all(|&v| v == 0.0));
        let ts = time_scattering_widthfirst(&zeros, &plan).unwrap();
        assert!(ts.s0.iter().all(|&v| v == 0.0));
        assert!(ts.s1.iter().all(|&v| v == 0.0));
        for block in &ts.y2 {
            assert!(block.coef.iter().all(|v| v.norm() == 0.0));
        }
        let set = forward(&vec![0.0; 1 << 10], &plan).unwrap();
        assert!(set.entries.values().all(|e| e.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sinusoid_lights_up_matching_row() {
        let plan = build_plan(desk_params()).unwrap();
        for k in [0usize, 2, 5] {
            let xi = plan.psi1[k].spec.xi;
            let x: Vec<f64> = (0..plan.n_padded)
                .map(|t| (2.0 * std::f64::consts::PI * xi * t as f64).sin())
                .collect();
            let sc = compute_scalogram(&x, &plan).unwrap();
            let means: Vec<f64> = sc
                .data
                .rows()
                .into_iter()
                .map(|r| r.iter().sum::<f64>() / r.len() as f64)
                .collect();
            let argmax = means
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, k, "xi={xi}");
        }
    }

    #[test]
    fn scalogram_energy_within_frame_bound() {
        let plan = build_plan(desk_params()).unwrap();
        let x = random_signal(plan.n_padded, 7);
        // Energy bound against the full-resolution first layer.
        let x_hat = dsp::rfft(&x).unwrap();
        let mut energy = 0.0;
        for psi in &plan.psi1 {
            let z = conv_sub_1d(&x_hat, psi.level(0), 0).unwrap();
            energy += z.iter().map(|v| v.norm_sqr()).sum::<f64>();
        }
        let input_energy: f64 = x.iter().map(|v| v * v).sum();
        let bound = plan.littlewood_paley().global_max;
        assert!(
            energy <= bound * input_energy * (1.0 + 1e-9),
            "{energy} vs {}",
            bound * input_energy
        );
    }

    #[test]
    fn widthfirst_block_count_and_admissibility() {
        let plan = build_plan(desk_params()).unwrap();
        let x = random_signal(plan.n_padded, 8);
        let ts = time_scattering_widthfirst(&x, &plan).unwrap();
        assert!(ts.y2.len() <= plan.psi2.len());
        for block in &ts.y2 {
            let j2 = plan.psi2[block.n2].spec.j;
            let admissible = plan.psi1.iter().filter(|f| f.spec.j < j2).count();
            assert_eq!(block.n1_max, admissible);
            assert!(admissible > 0);
        }
        // Blocks with no admissible first-layer path are omitted.
        for (n2, psi2) in plan.psi2.iter().enumerate() {
            let admissible = plan.psi1.iter().any(|f| f.spec.j < psi2.spec.j);
            assert_eq!(ts.y2.iter().any(|b| b.n2 == n2), admissible);
        }
    }

    #[test]
    fn am_sinusoid_peaks_at_matching_pair() {
        let plan = build_plan(desk_params()).unwrap();
        // Carrier on psi1[2], modulation rate on psi2[3].
        let carrier = plan.psi1[2].spec.xi;
        let rate = plan.psi2[3].spec.xi;
        let x: Vec<f64> = (0..plan.n_padded)
            .map(|t| {
                let t = t as f64;
                (1.0 + 0.8 * (2.0 * std::f64::consts::PI * rate * t).cos())
                    * (2.0 * std::f64::consts::PI * carrier * t).sin()
            })
            .collect();
        let ts = time_scattering_widthfirst(&x, &plan).unwrap();
        let mut best = (0usize, 0usize, 0.0f64);
        for block in &ts.y2 {
            for (r, row) in block.coef.rows().into_iter().enumerate() {
                let mean: f64 =
                    row.iter().map(|v| v.norm()).sum::<f64>() / row.len() as f64;
                if mean > best.2 {
                    best = (block.n2, r, mean);
                }
            }
        }
        assert_eq!(best.0, 3, "expected modulation to land on psi2[3]");
        assert_eq!(best.1, 2, "expected carrier to land on psi1[2]");
    }

    #[test]
    fn frequency_scattering_output_counts() {
        let plan = build_plan(desk_params()).unwrap();
        let rows = plan.psi1.len();
        let block = Array2::from_shape_fn((rows, 16), |(i, j)| {
            Complex64::new((i + 1) as f64, j as f64 * 0.1)
        });
        let spinned = frequency_scattering(&block, rows, &plan, true).unwrap();
        assert_eq!(spinned.len(), plan.psi_fr.len());
        let not_spinned = frequency_scattering(&block, rows, &plan, false).unwrap();
        assert_eq!(not_spinned.len(), plan.n_fr_positive() + 1);
        assert!(not_spinned.last().unwrap().lowpass);
        assert_eq!(not_spinned.last().unwrap().spin, 0);
        for fr in &not_spinned[..plan.n_fr_positive()] {
            assert_eq!(fr.spin, 1);
        }
        let spins: Vec<i8> = spinned.iter().map(|f| f.spin).collect();
        let half = plan.n_fr_positive();
        assert!(spins[..half].iter().all(|&s| s == 1));
        assert!(spins[half..].iter().all(|&s| s == -1));
    }

    #[test]
    fn constant_along_frequency_is_killed_by_bandpass() {
        let plan = build_plan(desk_params()).unwrap();
        // Fill the whole circular frequential axis so there is no pad edge.
        let rows = plan.n_fr_padded;
        let block = Array2::from_elem((rows, 8), Complex64::new(1.0, 0.0));
        let outs = frequency_scattering(&block, rows, &plan, false).unwrap();
        for fr in &outs {
            let peak = fr.coef.iter().map(|v| v.norm()).fold(0.0, f64::max);
            if fr.lowpass {
                // Unit-gain low-pass passes the constant through.
                assert!((peak - 1.0).abs() < 1e-10);
            } else {
                assert!(peak <= 1e-6, "n_fr={} peak={peak}", fr.n_fr);
            }
        }
    }

    #[test]
    fn forward_zero_and_shapes() {
        let plan = build_plan(desk_params()).unwrap();
        let set = forward(&vec![0.0; 1 << 10], &plan).unwrap();
        let frames = (1usize << 10) / (1 << 3);
        for (key, entry) in &set.entries {
            assert_eq!(entry.data.ncols(), frames, "{}", key.label());
            assert!(entry.data.iter().all(|&v| v == 0.0));
        }
        assert!(set.entries.len() > 1);
    }

    #[test]
    fn forward_is_deterministic() {
        let plan = build_plan(desk_params()).unwrap();
        let x = random_signal(1 << 10, 9);
        let a = forward(&x, &plan).unwrap();
        let b = forward(&x, &plan).unwrap();
        for (ea, eb) in a.entries.values().zip(b.entries.values()) {
            assert_eq!(ea.data, eb.data);
        }
    }

    #[test]
    fn forward_nonnegative_after_averaging() {
        // Orders 1 and 2 sit behind a modulus and nonnegative averaging
        // kernels; order 0 is the signed low-passed waveform and is exempt.
        let plan = build_plan(desk_params()).unwrap();
        let x = random_signal(1 << 10, 10);
        let set = forward(&x, &plan).unwrap();
        for (key, entry) in set.entries.iter().filter(|(k, _)| k.order > 0) {
            let min = entry.data.iter().cloned().fold(f64::INFINITY, f64::min);
            let peak = entry.data.iter().cloned().fold(0.0, f64::max);
            assert!(
                min >= -1e-9 * peak.max(1e-30),
                "{}: min {min}",
                key.label()
            );
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let plan = build_plan(desk_params()).unwrap();
        assert!(matches!(
            forward(&vec![0.0; 100], &plan),
            Err(Error::Size(_))
        ));
        let mut x = vec![0.0; 1 << 10];
        x[5] = f64::NAN;
        assert!(matches!(forward(&x, &plan), Err(Error::Numeric(_))));
    }

    #[test]
    fn perturbation_response_is_bounded() {
        let plan = build_plan(desk_params()).unwrap();
        let x = random_signal(1 << 10, 11);
        let sx = forward(&x, &plan).unwrap();
        let bound = plan.littlewood_paley().global_max.sqrt();
        let mut r = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..3 {
            let eps: Vec<f64> = (0..x.len()).map(|_| r.gen_range(-1e-3..1e-3)).collect();
            let y: Vec<f64> = x.iter().zip(&eps).map(|(a, b)| a + b).collect();
            let sy = forward(&y, &plan).unwrap();
            let mut dist_sqr = 0.0;
            for (ea, eb) in sx.entries.values().zip(sy.entries.values()) {
                dist_sqr += ea
                    .data
                    .iter()
                    .zip(eb.data.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            let eps_norm = eps.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                dist_sqr.sqrt() <= bound * eps_norm,
                "{} vs {}",
                dist_sqr.sqrt(),
                bound * eps_norm
            );
        }
    }

    #[test]
    fn averaging_preserves_column_means() {
        // Unit-DC-gain low-pass: interior column means survive averaging.
        let plan = build_plan(desk_params()).unwrap();
        let x = random_signal(1 << 10, 13);
        let padded = dsp::pad_time_with(&x, plan.n_padded, plan.pad_left).unwrap();
        let x_hat = dsp::rfft(&padded).unwrap();
        let layer = first_layer(&x_hat, &plan, false).unwrap();
        let s1 = s1_rows(&layer, &plan).unwrap();
        // Per-row means of |x * psi| at native stride vs of the averaged rows.
        for (n1, u1m) in layer.u1m.iter().enumerate() {
            let raw_mean: f64 = u1m.iter().sum::<f64>() / u1m.len() as f64;
            let row = s1.row(n1);
            let avg_mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
            if raw_mean > 1e-12 {
                assert!(
                    (avg_mean - raw_mean).abs() <= 0.01 * raw_mean,
                    "row {n1}: {avg_mean} vs {raw_mean}"
                );
            }
        }
    }

    #[test]
    fn doubling_log2_t_halves_frames() {
        let mut p = desk_params();
        let a = build_plan(p).unwrap();
        p.log2_t = 4;
        let b = build_plan(p).unwrap();
        let x = random_signal(1 << 10, 14);
        let fa = forward(&x, &a).unwrap();
        let fb = forward(&x, &b).unwrap();
        let ca = fa.entries.values().next().unwrap().data.ncols();
        let cb = fb.entries.values().next().unwrap().data.ncols();
        assert_eq!(ca, 2 * cb);
    }
}
