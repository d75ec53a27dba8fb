//! Discrete Fourier transforms.

use num_complex::Complex64;
use std::f64::consts::PI;

/// Forward DFT, `X[k] = Σ x[n]·e^{−j2πkn/N}`, unnormalized.
///
/// Radix-2 iterative Cooley-Tukey when `N` is a power of two, direct
/// summation otherwise.
pub fn dft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    if buf.len().is_power_of_two() {
        fft_in_place(&mut buf);
        buf
    } else {
        direct(x)
    }
}

/// In-place radix-2 transform; panics if the length is not a power of two.
pub fn fft_in_place(x: &mut [Complex64]) {
    let n = x.len();
    if n <= 1 {
        return;
    }
    assert!(n.is_power_of_two(), "radix-2 FFT needs a power-of-two length, got {n}");
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            x.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        // exact angle per twiddle rather than repeated multiplication, to avoid drift
        let tw: Vec<Complex64> =
            (0..half).map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / len as f64)).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = x[start + k];
                let b = x[start + k + half] * tw[k];
                x[start + k] = a + b;
                x[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn direct(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| v * Complex64::from_polar(1.0, -2.0 * PI * ((k * t) % n) as f64 / n as f64))
                .sum()
        })
        .collect()
}
