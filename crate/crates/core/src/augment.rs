//! Physical augmentations producing the weak view of a frame.
//!
//! Each transform is a pure function of the frame and its parameters;
//! [`apply_policy`] draws gates and parameters from a caller-supplied stream.

use std::f64::consts::PI;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::IqFrame;

fn map_complex(frame: &IqFrame, mut f: impl FnMut(usize, Complex64) -> Complex64) -> IqFrame {
    let x: Vec<Complex64> = frame.to_complex().into_iter().enumerate().map(|(n, c)| f(n, c)).collect();
    IqFrame::from_complex(&x, frame.label, frame.snr_db)
}

/// `s'[n] = s[n]·e^{jθ}`.
pub fn rotate(frame: &IqFrame, theta: f64) -> IqFrame {
    let w = Complex64::from_polar(1.0, theta);
    map_complex(frame, |_, c| c * w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipMode {
    I,
    Q,
    Both,
}

impl FromStr for FlipMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "i" => Ok(FlipMode::I),
            "q" => Ok(FlipMode::Q),
            "both" => Ok(FlipMode::Both),
            _ => Err(Error::invalid(format!("unknown flip mode {s:?}; valid: I, Q, Both"))),
        }
    }
}

/// Negate the I rail, the Q rail, or both. Exact in `f32`.
pub fn iq_flip(frame: &IqFrame, mode: FlipMode) -> IqFrame {
    let (si, sq) = match mode {
        FlipMode::I => (-1.0, 1.0),
        FlipMode::Q => (1.0, -1.0),
        FlipMode::Both => (-1.0, -1.0),
    };
    IqFrame {
        i: frame.i.iter().map(|v| si * v).collect(),
        q: frame.q.iter().map(|v| sq * v).collect(),
        ..frame.clone()
    }
}

/// Cyclic delay, `s'[n] = s[(n − δ) mod L]`.
pub fn time_shift(frame: &IqFrame, delta: usize) -> IqFrame {
    let l = frame.len();
    let mut out = frame.clone();
    if l > 0 {
        out.i.rotate_right(delta % l);
        out.q.rotate_right(delta % l);
    }
    out
}

/// Add `CN(0, σ²)` noise: each rail gets `N(0, σ²/2)`.
pub fn awgn<R: Rng + ?Sized>(frame: &IqFrame, sigma: f64, rng: &mut R) -> IqFrame {
    if sigma == 0.0 {
        return frame.clone();
    }
    let s = sigma / 2f64.sqrt();
    map_complex(frame, |_, c| {
        let ni: f64 = StandardNormal.sample(rng);
        let nq: f64 = StandardNormal.sample(rng);
        c + Complex64::new(s * ni, s * nq)
    })
}

/// Linear phase ramp, `s'[n] = s[n]·e^{j2πΔf·n/L}`.
pub fn freq_offset(frame: &IqFrame, df: f64) -> IqFrame {
    let l = frame.len() as f64;
    map_complex(frame, |n, c| c * Complex64::from_polar(1.0, 2.0 * PI * df * n as f64 / l))
}

pub fn amp_scale(frame: &IqFrame, alpha: f64) -> IqFrame {
    map_complex(frame, |_, c| c * alpha)
}

/// Gate probabilities and parameter ranges of the weak-view pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub p_rotate: f64,
    pub p_flip: f64,
    pub p_shift: f64,
    pub p_awgn: f64,
    pub p_cfo: f64,
    pub p_scale: f64,
    pub theta_max: f64,
    pub sigma_range: (f64, f64),
    pub cfo_range: (f64, f64),
    pub alpha_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_rotate: 0.5,
            p_flip: 0.5,
            p_shift: 0.5,
            p_awgn: 0.5,
            p_cfo: 0.5,
            p_scale: 0.5,
            theta_max: PI,
            sigma_range: (0.01, 0.04),
            cfo_range: (-1.0, 1.0),
            alpha_range: (0.8, 1.2),
        }
    }
}

impl AugmentPolicy {
    pub fn with_probability(p: f64) -> Self {
        AugmentPolicy { p_rotate: p, p_flip: p, p_shift: p, p_awgn: p, p_cfo: p, p_scale: p, ..Default::default() }
    }

    /// Probabilities in `[0, 1]` and every range inside the default bounds.
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_rotate, self.p_flip, self.p_shift, self.p_awgn, self.p_cfo, self.p_scale];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("augmentation probabilities must lie in [0, 1]"));
        }
        let inside = |(lo, hi): (f64, f64), (blo, bhi): (f64, f64)| lo <= hi && lo >= blo && hi <= bhi;
        if !(0.0..=PI).contains(&self.theta_max)
            || !inside(self.sigma_range, (0.01, 0.04))
            || !inside(self.cfo_range, (-1.0, 1.0))
            || !inside(self.alpha_range, (0.8, 1.2))
        {
            return Err(Error::invalid("augmentation range outside the physical bounds"));
        }
        Ok(())
    }
}

/// One draw of the pipeline's gates and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub rotate: Option<f64>,
    pub flip: Option<FlipMode>,
    pub shift: Option<usize>,
    pub awgn: Option<f64>,
    pub cfo: Option<f64>,
    pub scale: Option<f64>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Draw gates and parameters; every Bernoulli gate is consumed whether or not it fires.
pub fn draw<R: Rng + ?Sized>(policy: &AugmentPolicy, len: usize, rng: &mut R) -> AugmentDraw {
    let gate = |p: f64, rng: &mut R| rng.gen::<f64>() < p;
    let rotate = gate(policy.p_rotate, rng).then(|| uniform(rng, (0.0, policy.theta_max)));
    let flip = gate(policy.p_flip, rng).then(|| [FlipMode::I, FlipMode::Q, FlipMode::Both][rng.gen_range(0..3)]);
    let shift = gate(policy.p_shift, rng).then(|| rng.gen_range(1..=(len / 16).max(1)));
    let awgn = gate(policy.p_awgn, rng).then(|| uniform(rng, policy.sigma_range));
    let cfo = gate(policy.p_cfo, rng).then(|| uniform(rng, policy.cfo_range));
    let scale = gate(policy.p_scale, rng).then(|| uniform(rng, policy.alpha_range));
    AugmentDraw { rotate, flip, shift, awgn, cfo, scale }
}

/// Apply a draw in the fixed order rotate → flip → shift → awgn → cfo → scale.
pub fn apply_draw<R: Rng + ?Sized>(frame: &IqFrame, d: &AugmentDraw, rng: &mut R) -> IqFrame {
    let mut x = frame.clone();
    if let Some(t) = d.rotate {
        x = rotate(&x, t);
    }
    if let Some(m) = d.flip {
        x = iq_flip(&x, m);
    }
    if let Some(s) = d.shift {
        x = time_shift(&x, s);
    }
    if let Some(s) = d.awgn {
        x = awgn(&x, s, rng);
    }
    if let Some(f) = d.cfo {
        x = freq_offset(&x, f);
    }
    if let Some(a) = d.scale {
        x = amp_scale(&x, a);
    }
    x
}

pub fn apply_policy<R: Rng + ?Sized>(frame: &IqFrame, policy: &AugmentPolicy, rng: &mut R) -> IqFrame {
    let d = draw(policy, frame.len(), rng);
    apply_draw(frame, &d, rng)
}
