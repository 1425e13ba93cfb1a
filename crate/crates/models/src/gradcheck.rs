//! Finite-difference gradient checks at double precision.

use candle_core::{Device, Result, Tensor, Var};

/// Worst relative error between autograd and central differences of the
/// scalar function `f` at `x`.
pub fn fd_check(x: &[f64], f: &dyn Fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let dev = Device::Cpu;
    let v = Var::new(x, &dev)?;
    let grads = f(v.as_tensor())?.backward()?;
    let g = match grads.get(v.as_tensor()) {
        Some(g) => g.to_vec1::<f64>()?,
        None => vec![0.0; x.len()],
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut p = x.to_vec();
            p[i] += delta;
            f(&Tensor::new(p.as_slice(), &dev)?)?.to_scalar::<f64>()
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
