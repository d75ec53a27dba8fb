//! Synthetic baseband I/Q frames under a scalar-gain, CFO and AWGN channel.
//!
//! A frame is `x[n] = g·s[n]·e^{j(2π·cfo·n/L + φ₀)} + w[n]`, with `s` a
//! unit-power modulated waveform and `w` complex white Gaussian noise scaled
//! to hit the requested per-sample SNR against the faded signal power.

mod format;
mod modulation;

pub use format::{read_frames, read_frames_from, write_frames, write_frames_to, FrameFile};
pub use modulation::{baseband, Modulation, PulseShape, SAMPLES_PER_SYMBOL};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One labeled frame of `L` complex samples, stored as separate I and Q rails.
#[derive(Clone, Debug, PartialEq)]
pub struct IqFrame {
    pub i: Vec<f32>,
    pub q: Vec<f32>,
    pub label: u16,
    pub snr_db: i16,
}

impl IqFrame {
    pub fn from_complex(samples: &[Complex64], label: u16, snr_db: i16) -> Self {
        IqFrame {
            i: samples.iter().map(|c| c.re as f32).collect(),
            q: samples.iter().map(|c| c.im as f32).collect(),
            label,
            snr_db,
        }
    }

    pub fn len(&self) -> usize {
        self.i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i.is_empty()
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.i.iter().zip(&self.q).map(|(&i, &q)| Complex64::new(i as f64, q as f64)).collect()
    }

    /// `[2, L]` tensor with I on row 0 and Q on row 1.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.i.iter().chain(&self.q).map(|&v| v as f64).collect();
        Tensor::new(&[2, self.len()], data).expect("rails have equal length")
    }

    pub fn is_finite(&self) -> bool {
        self.i.iter().chain(&self.q).all(|v| v.is_finite())
    }
}

/// Stack frames into a `[B, 2, L]` batch.
pub fn batch_tensor(frames: &[&IqFrame]) -> Result<Tensor> {
    let l = frames.first().map(|f| f.len()).ok_or_else(|| Error::invalid("empty batch"))?;
    let mut data = Vec::with_capacity(frames.len() * 2 * l);
    for f in frames {
        if f.len() != l {
            return Err(Error::shape("batch", format!("frame length {} vs {}", f.len(), l)));
        }
        data.extend(f.i.iter().chain(&f.q).map(|&v| v as f64));
    }
    Tensor::new(&[frames.len(), 2, l], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    /// Carrier offset in cycles per frame.
    pub cfo_norm: f64,
    pub phase0: f64,
    pub fading_gain: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig { snr_db: 10.0, cfo_norm: 0.0, phase0: 0.0, fading_gain: 1.0 }
    }
}

impl ChannelConfig {
    fn validate(&self) -> Result<()> {
        if !(self.fading_gain > 0.0) {
            return Err(Error::invalid(format!("fading gain must be positive, got {}", self.fading_gain)));
        }
        if !(-20.0..=60.0).contains(&self.snr_db) {
            return Err(Error::invalid(format!("snr_db {} outside [-20, 60]", self.snr_db)));
        }
        Ok(())
    }
}

/// Apply gain, CFO, phase and AWGN to a clean waveform.
pub fn apply_channel<R: Rng + ?Sized>(s: &[Complex64], cfg: &ChannelConfig, rng: &mut R) -> Result<Vec<Complex64>> {
    cfg.validate()?;
    let l = s.len() as f64;
    let faded: Vec<Complex64> = s
        .iter()
        .enumerate()
        .map(|(n, &v)| {
            let ph = 2.0 * std::f64::consts::PI * cfg.cfo_norm * n as f64 / l + cfg.phase0;
            v * cfg.fading_gain * Complex64::from_polar(1.0, ph)
        })
        .collect();
    let p_s = faded.iter().map(|c| c.norm_sqr()).sum::<f64>() / l;
    let sigma = (p_s * 10f64.powf(-cfg.snr_db / 10.0) / 2.0).sqrt();
    Ok(faded
        .into_iter()
        .map(|v| {
            let ni: f64 = StandardNormal.sample(rng);
            let nq: f64 = StandardNormal.sample(rng);
            v + Complex64::new(sigma * ni, sigma * nq)
        })
        .collect())
}

/// One frame of `class` at length `len` through channel `cfg`.
pub fn synth_frame(class: Modulation, len: usize, cfg: &ChannelConfig, pulse: PulseShape, seed: u64) -> Result<IqFrame> {
    let mut rng = rng::named(seed, "synth_frame", 0);
    let s = baseband(class, len, pulse, &mut rng)?;
    let x = apply_channel(&s, cfg, &mut rng)?;
    Ok(IqFrame::from_complex(&x, class.id(), cfg.snr_db.round() as i16))
}

/// Counts and channel ranges for [`synth_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: Vec<Modulation>,
    pub snrs_db: Vec<i16>,
    /// Frames per (class, SNR) cell.
    pub per_cell: usize,
    pub length: usize,
    pub pulse: PulseShape,
    /// CFO drawn from `U(−cfo_max, cfo_max)` cycles per frame.
    pub cfo_max: f64,
    /// Phase drawn from `U(0, 2π)` when set, else zero.
    pub random_phase: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: Modulation::ALL.to_vec(),
            snrs_db: vec![0, 10, 18],
            per_cell: 10,
            length: 128,
            pulse: PulseShape::Rectangular,
            cfo_max: 0.5,
            random_phase: true,
        }
    }
}

/// Deterministic dataset: frame `k` (in class-major, SNR, index order) uses
/// stream `k` of the dataset seed.
pub fn synth_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<IqFrame>> {
    if spec.classes.is_empty() || spec.snrs_db.is_empty() || spec.per_cell == 0 {
        return Err(Error::invalid("dataset spec needs at least one class, one SNR and one frame per cell"));
    }
    if !spec.length.is_power_of_two() || spec.length < 8 {
        return Err(Error::invalid(format!("frame length {} must be a power of two ≥ 8", spec.length)));
    }
    let mut cells = Vec::new();
    for &c in &spec.classes {
        for &snr in &spec.snrs_db {
            for _ in 0..spec.per_cell {
                cells.push((c, snr));
            }
        }
    }
    cells
        .iter()
        .enumerate()
        .map(|(k, &(class, snr))| {
            let mut rng = rng::named(seed, "dataset", k as u64);
            let cfg = ChannelConfig {
                snr_db: snr as f64,
                cfo_norm: if spec.cfo_max > 0.0 { rng.gen_range(-spec.cfo_max..spec.cfo_max) } else { 0.0 },
                phase0: if spec.random_phase { rng.gen_range(0.0..2.0 * std::f64::consts::PI) } else { 0.0 },
                fading_gain: 1.0,
            };
            let s = baseband(class, spec.length, spec.pulse, &mut rng)?;
            let x = apply_channel(&s, &cfg, &mut rng)?;
            Ok(IqFrame::from_complex(&x, class.id(), snr))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_counts_and_labels() {
        let spec = DatasetSpec {
            classes: Modulation::ALL.to_vec(),
            snrs_db: vec![0, 10, 18],
            per_cell: 10,
            ..Default::default()
        };
        let frames = synth_dataset(&spec, 1).unwrap();
        assert_eq!(frames.len(), 240);
        for c in Modulation::ALL {
            assert_eq!(frames.iter().filter(|f| f.label == c.id()).count(), 30);
        }
        assert!(frames.iter().all(|f| f.is_finite() && f.len() == 128));
    }

    #[test]
    fn empty_spec_rejected() {
        let spec = DatasetSpec { classes: vec![], ..Default::default() };
        assert!(synth_dataset(&spec, 0).is_err());
    }

    #[test]
    fn nonpositive_gain_rejected() {
        let cfg = ChannelConfig { fading_gain: 0.0, ..Default::default() };
        assert!(synth_frame(Modulation::Qpsk, 128, &cfg, PulseShape::Rectangular, 0).is_err());
    }
}
