mod common;

use common::{gradcheck_seeds, primitives};
use dyco::tensor::{jvp, traced, vjp};
use dyco::{Error, Tape, Tensor};

#[test]
fn every_primitive_matches_central_differences() {
    let mut failures = Vec::new();
    for prim in primitives() {
        let worst = gradcheck_seeds(&prim, 20).unwrap();
        println!("{:<20} worst rel err {:.2e} (tol {:.0e})", prim.name, worst, prim.tolerance);
        if !(worst < prim.tolerance) {
            failures.push(format!("{}: {worst:e}", prim.name));
        }
    }
    assert!(failures.is_empty(), "gradient check failures: {failures:?}");
}

#[test]
fn matmul_shape_algebra() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 4]));
    assert_eq!(a.matmul(&b).unwrap().shape(), vec![2, 4]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let s = tape.constant(Tensor::zeros(&[3])).softmax(0).unwrap().tensor();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn stop_gradient_is_identity_forward_and_blocks_backward() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let w = tape.param(Tensor::from_vec(vec![0.5, 0.5, 2.0]));
    let sg = x.stop_gradient();
    assert_eq!(sg.tensor(), x.tensor());
    let y = sg.mul(&w).unwrap().sum_all();
    let g = tape.backward(y).unwrap();
    assert!(g.get(x).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
    assert_eq!(g.wrt(w).data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn quadratic_gradient() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let y = x.mul(&x).unwrap().sum_all();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn fan_out_accumulates() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![2.0]));
    let y = x.mul(&x).unwrap().add(&x.mul_scalar(3.0)).unwrap().sum_all();
    assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[7.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(tape.backward(x.mul_scalar(2.0)).is_err());
}

#[test]
fn shape_mismatch_names_the_op() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(&b).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let err = a.add(&tape.constant(Tensor::zeros(&[4]))).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn jvp_identity_and_linear() {
    let x = Tensor::from_vec(vec![0.3, -1.0, 2.0]);
    let v = Tensor::from_vec(vec![1.0, 2.0, -0.5]);
    let id = jvp(traced(|_, x| Ok(x)), &x, &v).unwrap();
    assert!(common::max_abs_diff(id.data(), v.data()) < 1e-9);

    let a = Tensor::new(&[3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, 0.0]).unwrap();
    let lin = traced(|tape, x| x.reshape(&[1, 3])?.matmul(&tape.constant(a.clone()))?.reshape(&[2]));
    let got = jvp(&lin, &x, &v).unwrap();
    let want = [1.0 * 1.0 + 2.0 * -1.0 + -0.5 * 3.0, 1.0 * 2.0 + 2.0 * 0.5];
    assert!(common::max_abs_diff(got.data(), &want) < 1e-9);
}

#[test]
fn vjp_of_linear_is_transpose() {
    let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
    let f = traced(|tape, x| x.reshape(&[1, 2])?.matmul(&tape.constant(a.clone()))?.reshape(&[3]));
    let (_, g) = vjp(&f, &Tensor::from_vec(vec![0.1, 0.2]), &Tensor::from_vec(vec![1.0, 0.0, -1.0])).unwrap();
    assert_eq!(g.data(), &[1.0 - 3.0, -1.0 - 4.0]);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let prim = primitives().into_iter().find(|p| p.name == "conv1d").unwrap();
        let mut r = dyco::rng::stream(9, 0);
        let xs: Vec<Tensor> = prim.inputs.iter().map(|(s, d)| common::draw_input(s, *d, &mut r)).collect();
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = (prim.build)(&tape, &vars).unwrap();
        let g = tape.backward(out.square().sum_all()).unwrap();
        (out.tensor(), vars.iter().map(|v| g.wrt(*v).clone()).collect::<Vec<_>>())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    for (x, y) in ga.iter().zip(&gb) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn backward_is_linear_in_the_root() {
    let x0 = Tensor::from_vec(vec![0.4, -1.2, 0.9, 2.0]);
    let grad = |a: f64, b: f64| {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let f = x.tanh().sum_all();
        let g = x.square().exp().mean_all();
        let root = f.mul_scalar(a).add(&g.mul_scalar(b)).unwrap();
        tape.backward(root).unwrap().wrt(x).clone()
    };
    let (gf, gg, mix) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(2.5, -0.7));
    for i in 0..4 {
        let want = 2.5 * gf.data()[i] - 0.7 * gg.data()[i];
        assert!((mix.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn input_leaves_receive_gradients() {
    let tape = Tape::new();
    let x = tape.param(Tensor::randn(&[1, 2, 16], &mut dyco::rng::stream(1, 0)));
    let w = tape.constant(Tensor::randn(&[4, 2, 3], &mut dyco::rng::stream(1, 1)));
    let y = x.conv1d(&w, None, 1, 1).unwrap().gelu().sum_all();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).shape(), &[1, 2, 16]);
    assert!(g.wrt(x).norm() > 0.0);
}
