//! Reverse-mode gradients, gradients of gradients, and a finite-difference
//! check of a small network.

use tsmd::autodiff::{finite_diff_check, grad, Graph, Tensor};
use tsmd::losses::cross_entropy_sum;
use tsmd::nets::{apply, init_params, NetworkSpec};

fn main() -> tsmd::Result<()> {
    let g = Graph::new();
    let x = g.param(Tensor::new(vec![3], vec![0.5, -1.0, 2.0])?)?;
    // f(x) = Σ exp(x) · x
    let f = x.exp()?.mul(&x)?.sum()?;
    let df = &grad(&f, std::slice::from_ref(&x), true)?[0];
    println!("f       = {:.6}", f.value().item()?);
    println!("df/dx   = {:?}", df.value().data());
    // Differentiate the gradient again: d/dx Σ (df/dx) = Σ (x + 2) exp(x).
    let d2 = &grad(&df.sum()?, &[x], false)?[0];
    println!("d2f/dx2 = {:?}", d2.value().data());

    let spec = NetworkSpec::mlp(4, &[8], 3);
    let params = init_params(&spec, 0)?;
    let inputs = Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let labels = [0, 1, 2, 1, 0];
    let report = finite_diff_check(
        |g, p| cross_entropy_sum(&apply(&spec, p, &g.constant(inputs.clone())?)?.logits, &labels),
        &params,
        1e-5,
        1e-4,
    )?;
    println!(
        "mlp gradient vs central differences: max rel err {:.2e} over {} coordinates, passed {}",
        report.max_rel_err(),
        params.num_scalars(),
        report.passed()
    );
    Ok(())
}
