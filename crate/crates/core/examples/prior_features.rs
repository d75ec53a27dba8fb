//! Expert priors for one frame: fourth-order cycle spectrum, regularized
//! envelope and the four Gramian angular fields.

use dyco::priors::{extract, GAF_SIZE};
use dyco::signal::{synth_frame, ChannelConfig, Modulation, PulseShape};

fn main() -> dyco::Result<()> {
    let cfg = ChannelConfig { snr_db: 30.0, ..ChannelConfig::default() };
    for m in [Modulation::Bpsk, Modulation::Qpsk, Modulation::Qam16, Modulation::Tone] {
        let frame = synth_frame(m, 128, &cfg, PulseShape::Rectangular, 11)?;
        let p = extract(&frame, Some(GAF_SIZE))?;
        let (peak, _) = p.p4.iter().enumerate().fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let env_spread = p.e_reg.iter().cloned().fold(f64::MIN, f64::max) - p.e_reg.iter().cloned().fold(f64::MAX, f64::min);
        let gaf = p.gaf.as_ref().expect("requested");
        println!(
            "{:>6}: P4 peak bin {peak:>3}, envelope spread {env_spread:.3}, GAF planes {} x {}x{}",
            m.name(),
            gaf.len(),
            GAF_SIZE,
            GAF_SIZE
        );
    }
    Ok(())
}
