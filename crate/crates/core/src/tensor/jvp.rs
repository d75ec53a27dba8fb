use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used by [`jvp`] (applied along the unit direction).
pub const JVP_STEP: f64 = 1e-5;

/// Jacobian-vector product `J_f(x)·v` by central finite differences.
///
/// The tape has no second-order support, so forward-mode products are taken
/// as `(f(x + h·u) − f(x − h·u)) / 2h · ‖v‖` with `u = v/‖v‖` and
/// `h = JVP_STEP`. Every spectral estimate in the crate goes through here.
pub fn jvp<F>(f: F, x: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if x.shape() != v.shape() {
        return Err(Error::shape("jvp", format!("x {:?} vs v {:?}", x.shape(), v.shape())));
    }
    let nv = v.norm();
    if nv == 0.0 {
        let y = eval(&f, x)?;
        return Ok(Tensor::zeros(y.shape()));
    }
    let step = JVP_STEP / nv;
    let plus = eval(&f, &x.axpy(step, v)?)?;
    let minus = eval(&f, &x.axpy(-step, v)?)?;
    Ok(plus.axpy(-1.0, &minus)?.scale(nv / (2.0 * JVP_STEP)))
}

/// Vector-Jacobian product: returns `(f(x), J_f(x)ᵀ·u)`.
pub fn vjp<F>(f: F, x: &Tensor, u: &Tensor) -> Result<(Tensor, Tensor)>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&tape, xv)?;
    if y.value().shape() != u.shape() {
        return Err(Error::shape("vjp", format!("output {:?} vs cotangent {:?}", y.shape(), u.shape())));
    }
    let uv = tape.constant(u.clone());
    let root = y.mul(&uv)?.sum_all();
    let grads = tape.backward(root)?;
    Ok((y.tensor(), grads.wrt(xv).clone()))
}

/// Forward evaluation of a traced function on a throwaway tape.
pub fn eval<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    Ok(f(&tape, xv)?.tensor())
}

/// Identity that pins a closure to the higher-ranked traced-function signature,
/// so `|tape, x| ...` closures can be stored before being passed on.
pub fn traced<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    f
}
