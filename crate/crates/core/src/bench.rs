//! Wall-clock micro-benchmarks of the numeric kernels.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{init_attention, window_attention};
use crate::error::{Error, Result};
use crate::fft::dft;
use crate::nn::ParamStore;
use crate::rng;
use crate::tensor::{traced, Tape, Tensor};
use crate::theory::{spectral_norm, TinyNet, TinyNetSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Fft,
    Conv1d,
    WindowAttention,
    SpectralNorm,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::Fft, Kernel::Conv1d, Kernel::WindowAttention, Kernel::SpectralNorm];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Fft => "fft",
            Kernel::Conv1d => "conv1d",
            Kernel::WindowAttention => "window_attention",
            Kernel::SpectralNorm => "spectral_norm",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Kernel::ALL.iter().map(|k| k.name()).collect();
            Error::invalid(format!("unknown kernel {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub kernel: Kernel,
    pub size: usize,
    pub reps: usize,
    pub median_s: f64,
    pub p95_s: f64,
    /// Seconds per repetition, in run order.
    pub samples: Vec<f64>,
}

/// Nearest-rank percentile of an unsorted sample, `q` in (0, 1].
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

/// Time `reps` runs of `kernel` at problem size `size`.
///
/// Sizes: transform length for `fft`, frame length for `conv1d` (2 → 16
/// channels, kernel 7), token count for `window_attention` (D = 64, 4 heads,
/// M = 8) and input dimension for `spectral_norm` (20 power steps on a tiny net).
pub fn bench(kernel: Kernel, size: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    if reps == 0 || size == 0 {
        return Err(Error::invalid("benchmarks need size ≥ 1 and reps ≥ 1"));
    }
    let mut r = rng::named(seed, "bench", 0);
    let mut run: Box<dyn FnMut() -> Result<()>> = match kernel {
        Kernel::Fft => {
            let x: Vec<Complex64> = (0..size).map(|_| Complex64::new(r.gen(), r.gen())).collect();
            Box::new(move || {
                std::hint::black_box(dft(&x));
                Ok(())
            })
        }
        Kernel::Conv1d => {
            let x = Tensor::randn(&[1, 2, size], &mut r);
            let w = Tensor::randn(&[16, 2, 7], &mut r);
            Box::new(move || {
                let tape = Tape::new();
                let y = tape.constant(x.clone()).conv1d(&tape.constant(w.clone()), None, 1, 3)?;
                std::hint::black_box(y.value().numel());
                Ok(())
            })
        }
        Kernel::WindowAttention => {
            if size % 8 != 0 {
                return Err(Error::invalid("window_attention size must be a multiple of 8"));
            }
            let mut p = ParamStore::new();
            init_attention(&mut p, "attn", 64, 4, 8, &mut r);
            let x = Tensor::randn(&[1, size, 64], &mut r);
            Box::new(move || {
                let tape = Tape::new();
                let y = window_attention(&p.bind(&tape, false), "attn", tape.constant(x.clone()), 4, 8)?;
                std::hint::black_box(y.value().numel());
                Ok(())
            })
        }
        Kernel::SpectralNorm => {
            let spec = TinyNetSpec { input_dim: size, hidden: 32, out_dim: 16, ..TinyNetSpec::default() };
            let net = TinyNet::new(&spec, &mut r);
            let x = Tensor::randn(&[1, size], &mut r);
            Box::new(move || {
                let f = traced(|tape, x| net.encode(tape, x));
                std::hint::black_box(spectral_norm(f, &x, 20, 0.0, seed)?.sigma);
                Ok(())
            })
        }
    };
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        run()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    Ok(BenchReport { kernel, size, reps, median_s: percentile(&samples, 0.5), p95_s: percentile(&samples, 0.95), samples })
}

pub const CSV_HEADER: &str = "kernel,size,reps,median_s,p95_s";

pub fn to_csv(reports: &[BenchReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        s.push_str(&format!("{},{},{},{:e},{:e}\n", r.kernel, r.size, r.reps, r.median_s, r.p95_s));
    }
    s
}
