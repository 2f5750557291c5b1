//! Resolution-aware Fourier-domain plumbing shared by the forward and
//! adjoint scattering passes.
//!
//! Conventions, fixed here and relied on everywhere else:
//! - spectra are full length (both frequency signs), never half-spectra;
//! - `ifft` carries the 1/N factor, `fft` carries none, so `ifft(fft(x)) = x`;
//! - `subsample_fourier` includes a 1/k factor so that it equals the DFT of
//!   the stride-k time decimation, exactly;
//! - time padding is half-sample reflection: `x[-1-i] = x[i]`, `x[n+i] = x[n-1-i]`,
//!   extended periodically for pads longer than the signal;
//! - all arithmetic is in 64-bit floats.
//!
//! Every operation is a pure function of its inputs. The FFT plan cache is
//! behind a mutex and the plans themselves are shareable, so concurrent calls
//! on distinct data are safe.

use ndarray::Array2;
use num_complex::Complex64;
use once_cell::sync::Lazy;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

struct FftCache {
    planner: FftPlanner<f64>,
    forward: HashMap<usize, Arc<dyn Fft<f64>>>,
    inverse: HashMap<usize, Arc<dyn Fft<f64>>>,
}

static FFT_CACHE: Lazy<Mutex<FftCache>> = Lazy::new(|| {
    Mutex::new(FftCache {
        planner: FftPlanner::new(),
        forward: HashMap::new(),
        inverse: HashMap::new(),
    })
});

fn plan_forward(n: usize) -> Arc<dyn Fft<f64>> {
    let mut cache = FFT_CACHE.lock().unwrap();
    if let Some(p) = cache.forward.get(&n) {
        return Arc::clone(p);
    }
    let p = cache.planner.plan_fft_forward(n);
    cache.forward.insert(n, Arc::clone(&p));
    p
}

fn plan_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    let mut cache = FFT_CACHE.lock().unwrap();
    if let Some(p) = cache.inverse.get(&n) {
        return Arc::clone(p);
    }
    let p = cache.planner.plan_fft_inverse(n);
    cache.inverse.insert(n, Arc::clone(&p));
    p
}

/// Unnormalized DFT, in place.
pub fn fft_inplace(x: &mut [Complex64]) {
    plan_forward(x.len()).process(x);
}

/// Inverse DFT with 1/N normalization, in place, so `ifft(fft(x)) = x`.
pub fn ifft_inplace(x: &mut [Complex64]) {
    let n = x.len();
    plan_inverse(n).process(x);
    let scale = 1.0 / n as f64;
    for v in x.iter_mut() {
        *v *= scale;
    }
}

pub fn fft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    fft_inplace(&mut buf);
    buf
}

pub fn ifft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    ifft_inplace(&mut buf);
    buf
}

/// Full-length DFT of a real signal. The result is Hermitian-symmetric:
/// `bin[N-k] = conj(bin[k])`.
pub fn rfft(x: &[f64]) -> Result<Vec<Complex64>> {
    if !x.len().is_power_of_two() {
        return Err(Error::Size(format!(
            "rfft requires a power-of-two length, got {}",
            x.len()
        )));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_inplace(&mut buf);
    Ok(buf)
}

/// Elementwise complex product `X[k] * H[k]`.
pub fn cdgmm(x: &[Complex64], h: &[Complex64]) -> Result<Vec<Complex64>> {
    if x.len() != h.len() {
        return Err(Error::Size(format!(
            "cdgmm length mismatch: {} vs {}",
            x.len(),
            h.len()
        )));
    }
    Ok(x.iter().zip(h).map(|(&a, &b)| a * b).collect())
}

/// Fold-subsampling in the Fourier domain:
/// `out[j] = (1/k) * sum_b X[j + b*N/k]`.
///
/// Equals the DFT of the stride-k decimation of the inverse transform.
pub fn subsample_fourier(x: &[Complex64], k: usize) -> Result<Vec<Complex64>> {
    if k == 0 || !k.is_power_of_two() {
        return Err(Error::Size(format!(
            "subsampling factor must be a positive power of two, got {k}"
        )));
    }
    let n = x.len();
    if n % k != 0 {
        return Err(Error::Size(format!(
            "subsampling factor {k} does not divide length {n}"
        )));
    }
    if k == 1 {
        return Ok(x.to_vec());
    }
    let m = n / k;
    let scale = 1.0 / k as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    for b in 0..k {
        let off = b * m;
        for (j, o) in out.iter_mut().enumerate() {
            *o += x[off + j];
        }
    }
    for o in out.iter_mut() {
        *o *= scale;
    }
    Ok(out)
}

/// Adjoint of [`subsample_fourier`] under the real inner product: tiles the
/// spectrum k times and scales by 1/k.
pub fn upsample_fourier(x: &[Complex64], k: usize) -> Vec<Complex64> {
    if k == 1 {
        return x.to_vec();
    }
    let m = x.len();
    let scale = 1.0 / k as f64;
    let mut out = Vec::with_capacity(m * k);
    for _ in 0..k {
        out.extend(x.iter().map(|&v| v * scale));
    }
    out
}

/// Half-sample symmetric reflection of index `i` into `[0, n)`.
fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - 1 - j;
    }
    j as usize
}

/// Reflection-pads `x` to `target` samples with `pad_left` samples on the left.
pub fn pad_time_with(x: &[f64], target: usize, pad_left: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Size("cannot pad an empty signal".into()));
    }
    if target < n {
        return Err(Error::Size(format!(
            "pad target {target} is smaller than input length {n}"
        )));
    }
    if !target.is_power_of_two() {
        return Err(Error::Size(format!(
            "pad target must be a power of two, got {target}"
        )));
    }
    if pad_left > target - n {
        return Err(Error::Size(format!(
            "pad_left {pad_left} exceeds total padding {}",
            target - n
        )));
    }
    let mut out = Vec::with_capacity(target);
    for i in 0..target {
        let src = i as isize - pad_left as isize;
        out.push(x[reflect_index(src, n)]);
    }
    Ok(out)
}

/// Reflection-pads `x` to `target`, splitting the padding evenly
/// (left gets the floor when the total is odd).
pub fn pad_time(x: &[f64], target: usize) -> Result<Vec<f64>> {
    let pad_left = (target.saturating_sub(x.len())) / 2;
    pad_time_with(x, target, pad_left)
}

/// Returns the `[start, end)` slice; inverse of padding at the resolution
/// the bounds are expressed in.
pub fn unpad_time(x: &[f64], start: usize, end: usize) -> Result<Vec<f64>> {
    if start > end || end > x.len() {
        return Err(Error::Size(format!(
            "unpad bounds [{start}, {end}) invalid for length {}",
            x.len()
        )));
    }
    Ok(x[start..end].to_vec())
}

/// Adjoint of [`pad_time_with`]: accumulates padded-domain values back onto
/// their reflection sources.
pub fn adjoint_pad_time(padded_bar: &[f64], original_len: usize, pad_left: usize) -> Vec<f64> {
    let mut out = vec![0.0; original_len];
    for (i, &v) in padded_bar.iter().enumerate() {
        let src = i as isize - pad_left as isize;
        out[reflect_index(src, original_len)] += v;
    }
    out
}

/// Appends `pad_right` zero rows along the leading (log-frequency) axis.
pub fn pad_frequency<T: Clone + Default>(x: &Array2<T>, pad_right: usize) -> Array2<T> {
    let (rows, cols) = x.dim();
    let mut out = Array2::<T>::default((rows + pad_right, cols));
    out.slice_mut(ndarray::s![..rows, ..]).assign(x);
    out
}

/// Pointwise complex modulus.
pub fn modulus(x: &[Complex64]) -> Vec<f64> {
    x.iter().map(|v| v.norm()).collect()
}

pub fn modulus_2d(x: &Array2<Complex64>) -> Array2<f64> {
    x.mapv(|v| v.norm())
}

/// Matrix transpose (an involution), materialized in standard layout.
pub fn swap_time_frequency<T: Clone>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.t().to_owned();
    if !out.is_standard_layout() {
        out = Array2::from_shape_vec(out.dim(), out.iter().cloned().collect()).unwrap();
    }
    out
}

/// Unnormalized DFT of every row (the trailing axis).
pub fn fft_rows_inplace(a: &mut Array2<Complex64>) {
    let n = a.ncols();
    if n == 0 {
        return;
    }
    let plan = plan_forward(n);
    for mut row in a.rows_mut() {
        plan.process(row.as_slice_mut().expect("rows must be contiguous"));
    }
}

/// Normalized inverse DFT of every row.
pub fn ifft_rows_inplace(a: &mut Array2<Complex64>) {
    let n = a.ncols();
    if n == 0 {
        return;
    }
    let plan = plan_inverse(n);
    let scale = 1.0 / n as f64;
    for mut row in a.rows_mut() {
        let slice = row.as_slice_mut().expect("rows must be contiguous");
        plan.process(slice);
        for v in slice.iter_mut() {
            *v *= scale;
        }
    }
}

/// Multiplies every row by a real-valued frequency response.
pub fn cdgmm_rows_real_inplace(a: &mut Array2<Complex64>, h: &[f64]) -> Result<()> {
    if a.ncols() != h.len() {
        return Err(Error::Size(format!(
            "row length {} does not match filter length {}",
            a.ncols(),
            h.len()
        )));
    }
    for mut row in a.rows_mut() {
        for (v, &g) in row.iter_mut().zip(h) {
            *v *= g;
        }
    }
    Ok(())
}

/// Fold-subsampling of every row by `k` (see [`subsample_fourier`]).
pub fn subsample_fourier_rows(a: &Array2<Complex64>, k: usize) -> Result<Array2<Complex64>> {
    let (rows, cols) = a.dim();
    if k == 1 {
        return Ok(a.clone());
    }
    if cols % k != 0 {
        return Err(Error::Size(format!(
            "subsampling factor {k} does not divide row length {cols}"
        )));
    }
    let m = cols / k;
    let scale = 1.0 / k as f64;
    let mut out = Array2::<Complex64>::zeros((rows, m));
    for (src, mut dst) in a.rows().into_iter().zip(out.rows_mut()) {
        let src = src.as_slice().expect("rows must be contiguous");
        for b in 0..k {
            let off = b * m;
            for (j, o) in dst.iter_mut().enumerate() {
                *o += src[off + j];
            }
        }
        for o in dst.iter_mut() {
            *o *= scale;
        }
    }
    Ok(out)
}

/// Adjoint of [`subsample_fourier_rows`]: tiles each row k times, scaled by 1/k.
pub fn upsample_fourier_rows(a: &Array2<Complex64>, k: usize) -> Array2<Complex64> {
    let (rows, cols) = a.dim();
    if k == 1 {
        return a.clone();
    }
    let scale = 1.0 / k as f64;
    let mut out = Array2::<Complex64>::zeros((rows, cols * k));
    for (src, mut dst) in a.rows().into_iter().zip(out.rows_mut()) {
        for b in 0..k {
            for (j, &v) in src.iter().enumerate() {
                dst[b * cols + j] = v * scale;
            }
        }
    }
    out
}

/// Real inner product on real vectors.
pub fn inner_real(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Real inner product on complex vectors: `Re sum a[i] * conj(b[i])`.
pub fn inner_complex(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y.conj()).re).sum()
}

pub(crate) fn next_power_of_two(n: usize) -> usize {
    n.next_power_of_two()
}
