//! Reverse-mode gradients of a small network checked against central differences.

use dyco::nn::{init_linear, ParamStore};
use dyco::rng;
use dyco::{Tape, Tensor};

fn loss(params: &ParamStore, x: &Tensor) -> dyco::Result<f64> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let h = p.linear("fc1", tape.constant(x.clone()))?.gelu();
    Ok(p.linear("fc2", h)?.softmax(1)?.square().sum_all().item())
}

fn main() -> dyco::Result<()> {
    let mut r = rng::stream(5, 0);
    let mut params = ParamStore::new();
    init_linear(&mut params, "fc1", 6, 12, &mut r);
    init_linear(&mut params, "fc2", 12, 4, &mut r);
    let x = Tensor::randn(&[3, 6], &mut r);

    let tape = Tape::new();
    let p = params.bind(&tape, true);
    let h = p.linear("fc1", tape.constant(x.clone()))?.gelu();
    let out = p.linear("fc2", h)?.softmax(1)?.square().sum_all();
    let grads = p.grads(&tape.backward(out)?);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, g) in grads.iter() {
        for i in 0..g.numel() {
            let mut plus = params.clone();
            plus.get_mut(name)?.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name)?.data_mut()[i] -= h;
            let fd = (loss(&plus, &x)? - loss(&minus, &x)?) / (2.0 * h);
            let err = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    println!("checked {} parameters, worst relative error {worst:.2e}", params.num_scalars());
    Ok(())
}
