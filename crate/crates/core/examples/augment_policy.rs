//! Physical augmentations: each primitive on its own, then a random policy.

use dyco::augment::{amp_scale, apply_policy, awgn, freq_offset, iq_flip, rotate, time_shift, AugmentPolicy, FlipMode};
use dyco::rng;
use dyco::signal::{synth_frame, ChannelConfig, Modulation, PulseShape};

fn power(f: &dyco::signal::IqFrame) -> f64 {
    f.to_complex().iter().map(|s| s.norm_sqr()).sum::<f64>() / f.len() as f64
}

fn main() -> dyco::Result<()> {
    let cfg = ChannelConfig { snr_db: 60.0, ..ChannelConfig::default() };
    let x = synth_frame(Modulation::Qpsk, 128, &cfg, PulseShape::Rectangular, 3)?;
    let mut r = rng::stream(3, 0);

    println!("original        power {:.4}", power(&x));
    println!("rotate(pi/3)    power {:.4}", power(&rotate(&x, std::f64::consts::FRAC_PI_3)));
    println!("flip(Q)         power {:.4}", power(&iq_flip(&x, FlipMode::Q)));
    println!("shift(5)        power {:.4}", power(&time_shift(&x, 5)));
    println!("cfo(0.5)        power {:.4}", power(&freq_offset(&x, 0.5)));
    println!("scale(1.2)      power {:.4}", power(&amp_scale(&x, 1.2)));
    println!("awgn(0.1)       power {:.4}", power(&awgn(&x, 0.1, &mut r)));

    let policy = AugmentPolicy::default();
    for i in 0..4 {
        let y = apply_policy(&x, &policy, &mut rng::stream(3, 1 + i));
        println!("policy draw {i}   power {:.4}", power(&y));
    }
    Ok(())
}
