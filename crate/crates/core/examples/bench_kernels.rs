//! Median and p95 timings of the numeric kernels at a few sizes, as CSV.
//!
//! cargo run --release --example bench_kernels -- [out.csv]

use dyco::bench::{bench, to_csv, Kernel};

fn main() -> dyco::Result<()> {
    let plan: [(Kernel, &[usize]); 4] = [
        (Kernel::Fft, &[128, 1024, 4096]),
        (Kernel::Conv1d, &[128, 1024]),
        (Kernel::WindowAttention, &[16, 64, 256]),
        (Kernel::SpectralNorm, &[8, 32]),
    ];
    let mut reports = Vec::new();
    for (kernel, sizes) in plan {
        for &size in sizes {
            reports.push(bench(kernel, size, 20, 0)?);
        }
    }
    let csv = to_csv(&reports);
    match std::env::args().nth(1) {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
