use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLES_PER_SYMBOL: usize = 8;
const RRC_ROLLOFF: f64 = 0.35;
const RRC_SPAN_SYMBOLS: usize = 8;

/// Modulation classes; the discriminant is the on-disk label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Modulation {
    Bpsk = 0,
    Qpsk = 1,
    Psk8 = 2,
    Qam16 = 3,
    Fsk2 = 4,
    Fsk4 = 5,
    AmDsb = 6,
    Tone = 7,
}

impl Modulation {
    pub const ALL: [Modulation; 8] = [
        Modulation::Bpsk,
        Modulation::Qpsk,
        Modulation::Psk8,
        Modulation::Qam16,
        Modulation::Fsk2,
        Modulation::Fsk4,
        Modulation::AmDsb,
        Modulation::Tone,
    ];

    pub fn id(self) -> u16 {
        self as u16
    }

    pub fn from_id(id: u16) -> Result<Self> {
        Self::ALL.get(id as usize).copied().ok_or_else(|| Error::invalid(format!("unknown class id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Psk8 => "8PSK",
            Modulation::Qam16 => "16QAM",
            Modulation::Fsk2 => "2FSK",
            Modulation::Fsk4 => "4FSK",
            Modulation::AmDsb => "AM-DSB",
            Modulation::Tone => "TONE",
        }
    }

    /// Class names in label order.
    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|m| m.name().to_string()).collect()
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase();
        let key = match key.as_str() {
            "CONSTANT-TONE" | "CW" => "TONE",
            "AMDSB" | "AM_DSB" => "AM-DSB",
            k => k,
        };
        Self::ALL.iter().copied().find(|m| m.name() == key).ok_or_else(|| {
            Error::invalid(format!("unknown modulation {s:?}; valid: {}", Self::names().join(", ")))
        })
    }
}

impl TryFrom<String> for Modulation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Modulation> for String {
    fn from(m: Modulation) -> String {
        m.name().to_string()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseShape {
    #[default]
    Rectangular,
    /// Root-raised-cosine, roll-off 0.35, span 8 symbols.
    RootRaisedCosine,
}

fn gray(i: usize) -> usize {
    i ^ (i >> 1)
}

/// Gray-coded unit-energy constellation point for symbol index `i`.
fn constellation(m: Modulation, i: usize) -> Complex64 {
    match m {
        Modulation::Bpsk => Complex64::new(if i == 0 { 1.0 } else { -1.0 }, 0.0),
        Modulation::Qpsk => Complex64::from_polar(1.0, PI / 4.0 + PI / 2.0 * gray(i) as f64),
        Modulation::Psk8 => Complex64::from_polar(1.0, PI / 4.0 * gray(i) as f64),
        Modulation::Qam16 => {
            let level = |b: usize| [-3.0, -1.0, 1.0, 3.0][gray(b)];
            Complex64::new(level(i & 3), level(i >> 2)) / 10f64.sqrt()
        }
        _ => unreachable!("not a linear modulation"),
    }
}

fn order(m: Modulation) -> usize {
    match m {
        Modulation::Bpsk | Modulation::Fsk2 => 2,
        Modulation::Qpsk | Modulation::Fsk4 => 4,
        Modulation::Psk8 => 8,
        Modulation::Qam16 => 16,
        Modulation::AmDsb | Modulation::Tone => 1,
    }
}

fn rrc_taps() -> Vec<f64> {
    let sps = SAMPLES_PER_SYMBOL as f64;
    let b = RRC_ROLLOFF;
    let half = (RRC_SPAN_SYMBOLS * SAMPLES_PER_SYMBOL / 2) as isize;
    (-half..=half)
        .map(|k| {
            let t = k as f64 / sps;
            if k == 0 {
                1.0 - b + 4.0 * b / PI
            } else if (4.0 * b * t).abs() == 1.0 {
                b / 2f64.sqrt() * ((1.0 + 2.0 / PI) * (PI / (4.0 * b)).sin() + (1.0 - 2.0 / PI) * (PI / (4.0 * b)).cos())
            } else {
                ((PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos())
                    / (PI * t * (1.0 - (4.0 * b * t).powi(2)))
            }
        })
        .collect()
}

fn shape_symbols(symbols: &[Complex64], len: usize, pulse: PulseShape) -> Vec<Complex64> {
    let sps = SAMPLES_PER_SYMBOL;
    match pulse {
        PulseShape::Rectangular => (0..len).map(|n| symbols[n / sps]).collect(),
        PulseShape::RootRaisedCosine => {
            let taps = rrc_taps();
            let delay = taps.len() / 2;
            (0..len)
                .map(|n| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (s, &sym) in symbols.iter().enumerate() {
                        let k = n as isize - (s * sps) as isize + delay as isize;
                        if k >= 0 && (k as usize) < taps.len() {
                            acc += sym * taps[k as usize];
                        }
                    }
                    acc
                })
                .collect()
        }
    }
}

/// Clean unit-power waveform of `len` samples.
///
/// Linear modulations are Gray-mapped and pulse-shaped at 8 samples/symbol.
/// FSK is continuous-phase with tone spacing `1/sps` cycles/sample. AM-DSB
/// carries a random three-tone message at modulation depth 0.5. The tone is
/// the DC carrier (the channel's CFO moves it).
pub fn baseband<R: Rng + ?Sized>(m: Modulation, len: usize, pulse: PulseShape, rng: &mut R) -> Result<Vec<Complex64>> {
    if len == 0 {
        return Err(Error::invalid("frame length must be positive"));
    }
    let sps = SAMPLES_PER_SYMBOL;
    let nsym = len.div_ceil(sps);
    let mut s: Vec<Complex64> = match m {
        Modulation::Bpsk | Modulation::Qpsk | Modulation::Psk8 | Modulation::Qam16 => {
            let symbols: Vec<Complex64> = (0..nsym).map(|_| constellation(m, rng.gen_range(0..order(m)))).collect();
            shape_symbols(&symbols, len, pulse)
        }
        Modulation::Fsk2 | Modulation::Fsk4 => {
            let k = order(m);
            let mut phase = 0.0;
            let mut out = Vec::with_capacity(len);
            let mut level = 0.0;
            for n in 0..len {
                if n % sps == 0 {
                    level = (2.0 * rng.gen_range(0..k) as f64 - (k as f64 - 1.0)) / (2.0 * sps as f64);
                }
                out.push(Complex64::from_polar(1.0, phase));
                phase += 2.0 * PI * level;
            }
            out
        }
        Modulation::AmDsb => {
            let tones: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| (rng.gen_range(1.0..6.0), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.3..1.0)))
                .collect();
            let wsum: f64 = tones.iter().map(|t| t.2).sum();
            (0..len)
                .map(|n| {
                    let msg: f64 = tones
                        .iter()
                        .map(|&(f, ph, w)| w * (2.0 * PI * f * n as f64 / len as f64 + ph).cos())
                        .sum::<f64>()
                        / wsum;
                    Complex64::new(1.0 + 0.5 * msg, 0.0)
                })
                .collect()
        }
        Modulation::Tone => vec![Complex64::new(1.0, 0.0); len],
    };
    let power = s.iter().map(|c| c.norm_sqr()).sum::<f64>() / len as f64;
    if power > 0.0 {
        let k = power.sqrt().recip();
        s.iter_mut().for_each(|c| *c *= k);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn qpsk_points_are_unit_energy_diagonals() {
        for i in 0..4 {
            let p = constellation(Modulation::Qpsk, i);
            assert!((p.re.abs() - FRAC_1_SQRT_2).abs() < 1e-15);
            assert!((p.im.abs() - FRAC_1_SQRT_2).abs() < 1e-15);
        }
    }

    #[test]
    fn constellations_have_unit_average_energy() {
        for m in [Modulation::Bpsk, Modulation::Qpsk, Modulation::Psk8, Modulation::Qam16] {
            let n = order(m);
            let e: f64 = (0..n).map(|i| constellation(m, i).norm_sqr()).sum::<f64>() / n as f64;
            assert!((e - 1.0).abs() < 1e-12, "{m}");
        }
    }

    #[test]
    fn class_names_roundtrip() {
        for m in Modulation::ALL {
            assert_eq!(m.name().parse::<Modulation>().unwrap(), m);
            assert_eq!(Modulation::from_id(m.id()).unwrap(), m);
        }
        assert_eq!("qpsk".parse::<Modulation>().unwrap(), Modulation::Qpsk);
        assert!("ofdm".parse::<Modulation>().is_err());
    }

    #[test]
    fn rrc_waveform_is_unit_power() {
        let mut r = rng::stream(3, 0);
        let s = baseband(Modulation::Qam16, 256, PulseShape::RootRaisedCosine, &mut r).unwrap();
        let p = s.iter().map(|c| c.norm_sqr()).sum::<f64>() / 256.0;
        assert!((p - 1.0).abs() < 1e-9);
    }
}
