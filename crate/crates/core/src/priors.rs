//! Expert physical-prior features: fourth-order cycle spectrum, regularized
//! envelope, and Gramian angular fields.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::dft;
use crate::signal::IqFrame;

pub const EPS: f64 = 1e-8;

/// Default GAF side length after PAA.
pub const GAF_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct PriorFeatures {
    pub p4: Vec<f64>,
    pub e_reg: Vec<f64>,
    /// GASF/GADF of `p4` then `e_reg`, each `S×S` row-major.
    pub gaf: Option<[Vec<f64>; 4]>,
}

/// `P₄[k] = |DFT(x⁴)[k]| / (max_k |DFT(x⁴)| + ε)`.
pub fn cycle_spectrum_p4(x: &[Complex64]) -> Vec<f64> {
    let x4: Vec<Complex64> = x.iter().map(|c| c.powu(4)).collect();
    let mag: Vec<f64> = dft(&x4).iter().map(|c| c.norm()).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    mag.iter().map(|m| m / (max + EPS)).collect()
}

/// Amplitude normalized by the peak PSD of its zero-centered form, then
/// divided by its max absolute value.
pub fn regularized_envelope(x: &[Complex64]) -> Vec<f64> {
    let l = x.len() as f64;
    let r: Vec<f64> = x.iter().map(|c| c.norm()).collect();
    let mean = r.iter().sum::<f64>() / l;
    let dev = r.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    let rcn: Vec<Complex64> = r.iter().map(|v| Complex64::new((v - mean) / (dev + EPS), 0.0)).collect();
    let gamma = dft(&rcn).iter().map(|c| c.norm_sqr()).fold(0.0, f64::max) / l;
    let e: Vec<f64> = r.iter().map(|v| v / (gamma + EPS)).collect();
    maxabs_normalize(&e)
}

fn maxabs_normalize(v: &[f64]) -> Vec<f64> {
    let m = v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    v.iter().map(|x| x / (m + EPS)).collect()
}

/// Piecewise aggregate approximation: means of `L/S` consecutive samples.
pub fn downsample_paa(series: &[f64], s: usize) -> Result<Vec<f64>> {
    if s == 0 || series.len() % s != 0 {
        return Err(Error::invalid(format!("PAA size {} must divide series length {}", s, series.len())));
    }
    let w = series.len() / s;
    Ok(series.chunks(w).map(|c| c.iter().sum::<f64>() / w as f64).collect())
}

/// Min-max rescale to `[−1, 1]`; a constant series maps to zeros.
pub fn rescale_unit(series: &[f64]) -> Vec<f64> {
    let lo = series.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; series.len()];
    }
    series.iter().map(|v| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)).collect()
}

/// Gramian angular summation and difference fields of a series.
pub fn gaf(series: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let phi: Vec<f64> = rescale_unit(series).iter().map(|v| v.acos()).collect();
    let n = phi.len();
    let mut gasf = vec![0.0; n * n];
    let mut gadf = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gasf[i * n + j] = (phi[i] + phi[j]).cos();
            gadf[i * n + j] = (phi[i] - phi[j]).sin();
        }
    }
    (gasf, gadf)
}

/// Both 1D priors, plus the four GAF planes at side `gaf_size` if requested.
pub fn extract(frame: &IqFrame, gaf_size: Option<usize>) -> Result<PriorFeatures> {
    let x = frame.to_complex();
    let p4 = cycle_spectrum_p4(&x);
    let e_reg = regularized_envelope(&x);
    let gaf = match gaf_size {
        Some(s) => {
            let (a, b) = gaf(&downsample_paa(&p4, s)?);
            let (c, d) = gaf(&downsample_paa(&e_reg, s)?);
            Some([a, b, c, d])
        }
        None => None,
    };
    Ok(PriorFeatures { p4, e_reg, gaf })
}
