//! Patient-level intensity normalization: estimate a brain mask, histogram
//! the in-mask intensities, fit a Gaussian to the greatest peak, and divide
//! the whole volume by twice the fitted mean so the peak lands at 0.5.
//!
//! The masker is a deliberate simplification of surface-based brain
//! extraction: Otsu threshold, largest 26-connected component, morphological
//! closing (radius 2), hole fill. The mask's only job here is to select
//! histogram samples.

use crate::components::{connected_components, Connectivity};
use crate::error::{Error, Result};
use crate::morphology::{dilate, erode, fill_holes};
use crate::scalar::Real;
use crate::volume::{BinaryMask, Modality, MultiModalStudy, Volume3D};
use serde::{Deserialize, Serialize};

pub const DEFAULT_BINS: usize = 256;
const MIN_SAMPLES: usize = 100;
const MIN_BINS: usize = 16;
/// Bins at or above half the peak count needed for a closed-form fit.
const MIN_WINDOW: usize = 3;

/// Gaussian fitted to the greatest histogram peak.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianPeakFit {
    pub mean: f64,
    pub sigma: f64,
    pub amplitude: f64,
    pub bin_width: f64,
    /// Inclusive bin window the fit used.
    pub window: (usize, usize),
    /// Sum of squared log-count residuals over the window.
    pub residual: f64,
    /// True when the log-parabola fit was not possible and the peak bin
    /// center was used as the mean instead.
    pub fallback: bool,
}

/// Per-modality record of one normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub modality: Modality,
    pub divisor: f64,
    pub fit: GaussianPeakFit,
    pub mask_voxels: usize,
}

/// Otsu's threshold over a 256-bin histogram of all voxel values.
/// Returns the bin-boundary value maximizing between-class variance.
fn otsu_threshold(data: &[f32]) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    if !(hi > lo) {
        return Err(Error::EmptyVolume);
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut counts = [0usize; BINS];
    for &v in data {
        let b = (((v as f64 - lo) / width) as usize).min(BINS - 1);
        counts[b] += 1;
    }
    let total = data.len() as f64;
    let total_mean: f64 =
        counts.iter().enumerate().map(|(i, &c)| (i as f64 + 0.5) * c as f64).sum::<f64>() / total;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for t in 0..BINS - 1 {
        w0 += counts[t] as f64;
        sum0 += (t as f64 + 0.5) * counts[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (total_mean * total - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best.0 {
            best = (var, t);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return Err(Error::EmptyVolume);
    }
    Ok(lo + (best.1 as f64 + 1.0) * width)
}

/// Simplified brain masker: largest 26-connected supra-Otsu component,
/// closed (radius 2) and hole-filled.
pub fn compute_brain_mask(vol: &Volume3D) -> Result<BinaryMask> {
    if !vol.data.iter().any(|&v| v > 0.0) {
        return Err(Error::EmptyVolume);
    }
    let thr = otsu_threshold(&vol.data)?;
    let fg = BinaryMask::new(vol.geom.clone(), vol.data.iter().map(|&v| (v as f64) > thr).collect());
    if fg.is_empty() {
        return Err(Error::EmptyVolume);
    }
    let comps = connected_components(&fg, Connectivity::TwentySix);
    let largest = comps
        .sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u32 + 1)
        .expect("nonempty mask has a component");
    let keep = BinaryMask::new(
        vol.geom.clone(),
        comps.labels.iter().map(|&l| l == largest).collect(),
    );
    let closed = erode(&dilate(&keep, 2), 2);
    Ok(fill_holes(&closed))
}

/// Histogram the samples and fit a Gaussian to the greatest peak via a
/// least-squares parabola on log-counts over the half-peak window.
pub fn fit_gaussian_peak<T: Real>(samples: &[T], n_bins: usize) -> Result<GaussianPeakFit> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples { got: samples.len(), need: MIN_SAMPLES });
    }
    if n_bins < MIN_BINS {
        return Err(Error::TooFewBins { got: n_bins, need: MIN_BINS });
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in samples {
        let v = v.to_f64_lossy();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Err(Error::DegenerateDistribution);
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &v in samples {
        let b = (((v.to_f64_lossy() - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    // greatest peak; ties resolve to the lower intensity
    let peak = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("bins nonempty");
    let peak_count = counts[peak] as f64;
    let center = |b: usize| lo + (b as f64 + 0.5) * width;

    // contiguous window around the peak with counts >= half the peak count
    let half = peak_count / 2.0;
    let mut w_lo = peak;
    while w_lo > 0 && counts[w_lo - 1] as f64 >= half {
        w_lo -= 1;
    }
    let mut w_hi = peak;
    while w_hi + 1 < n_bins && counts[w_hi + 1] as f64 >= half {
        w_hi += 1;
    }

    let fallback_fit = |window: (usize, usize)| GaussianPeakFit {
        mean: center(peak),
        sigma: width.max(f64::MIN_POSITIVE),
        amplitude: peak_count,
        bin_width: width,
        window,
        residual: 0.0,
        fallback: true,
    };
    if w_hi - w_lo + 1 < MIN_WINDOW {
        return Ok(fallback_fit((w_lo, w_hi)));
    }

    // least-squares parabola ln(count) ~ a + b x + c x^2 on bin centers
    let pts: Vec<(f64, f64)> =
        (w_lo..=w_hi).map(|bin| (center(bin), (counts[bin] as f64).ln())).collect();
    let n = pts.len() as f64;
    let (mut sx, mut sx2, mut sx3, mut sx4) = (0.0, 0.0, 0.0, 0.0);
    let (mut sy, mut sxy, mut sx2y) = (0.0, 0.0, 0.0);
    for &(x, y) in &pts {
        let x2 = x * x;
        sx += x;
        sx2 += x2;
        sx3 += x2 * x;
        sx4 += x2 * x2;
        sy += y;
        sxy += x * y;
        sx2y += x2 * y;
    }
    // solve the 3x3 normal equations by Cramer's rule
    let det3 = |m: [[f64; 3]; 3]| -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let m = [[n, sx, sx2], [sx, sx2, sx3], [sx2, sx3, sx4]];
    let d = det3(m);
    if d.abs() < 1e-30 {
        return Ok(fallback_fit((w_lo, w_hi)));
    }
    let rhs = [sy, sxy, sx2y];
    let mut coef = [0.0f64; 3];
    for k in 0..3 {
        let mut mk = m;
        for r in 0..3 {
            mk[r][k] = rhs[r];
        }
        coef[k] = det3(mk) / d;
    }
    let (a, b, c) = (coef[0], coef[1], coef[2]);
    if !(c < 0.0) {
        return Ok(fallback_fit((w_lo, w_hi)));
    }
    let mean = -b / (2.0 * c);
    if !(lo..=hi).contains(&mean) {
        return Ok(fallback_fit((w_lo, w_hi)));
    }
    let sigma = (-1.0 / (2.0 * c)).sqrt();
    let amplitude = (a - b * b / (4.0 * c)).exp();
    let residual: f64 =
        pts.iter().map(|&(x, y)| (a + b * x + c * x * x - y).powi(2)).sum();
    Ok(GaussianPeakFit {
        mean,
        sigma,
        amplitude,
        bin_width: width,
        window: (w_lo, w_hi),
        residual,
        fallback: false,
    })
}

/// Normalize one volume: fit the in-mask peak and divide every voxel
/// (masked or not) by twice the fitted mean.
pub fn normalize_volume(
    vol: &Volume3D,
    n_bins: usize,
) -> Result<(Volume3D, GaussianPeakFit, usize)> {
    let mask = compute_brain_mask(vol)?;
    let samples: Vec<f32> = vol
        .data
        .iter()
        .zip(mask.data.iter())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    let fit = match fit_gaussian_peak(&samples, n_bins) {
        Ok(fit) => fit,
        // constant in-mask intensity: the peak is the constant itself
        Err(Error::DegenerateDistribution) => {
            let value = samples[0] as f64;
            GaussianPeakFit {
                mean: value,
                sigma: f64::MIN_POSITIVE,
                amplitude: samples.len() as f64,
                bin_width: 0.0,
                window: (0, 0),
                residual: 0.0,
                fallback: true,
            }
        }
        Err(e) => return Err(e),
    };
    let divisor = 2.0 * fit.mean;
    if !(divisor > 0.0) {
        return Err(Error::NonPositiveDivisor(divisor));
    }
    let data = vol.data.iter().map(|&v| (v as f64 / divisor) as f32).collect();
    Ok((Volume3D { geom: vol.geom.clone(), data }, fit, mask.count()))
}

/// Normalize all four modalities of a study independently.
pub fn normalize_study(
    study: &MultiModalStudy,
    n_bins: usize,
) -> Result<(MultiModalStudy, Vec<NormalizationRecord>)> {
    let mut out = study.clone();
    let mut records = Vec::with_capacity(4);
    for m in Modality::ALL {
        let (vol, fit, mask_voxels) =
            normalize_volume(study.volume(m), n_bins).map_err(|e| Error::Modality {
                modality: m.name(),
                source: Box::new(e),
            })?;
        records.push(NormalizationRecord {
            modality: m,
            divisor: 2.0 * fit.mean,
            fit,
            mask_voxels,
        });
        *out.volume_mut(m) = vol;
    }
    Ok((out, records))
}
