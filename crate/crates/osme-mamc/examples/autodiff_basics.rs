//! Reverse-mode differentiation on a hand-built expression, checked against
//! the central finite-difference oracle.

use osme_mamc::tensor::{grad_check, Tensor, TensorError, DEFAULT_STEP};

fn main() {
    let w = Tensor::param(vec![2, 3], vec![0.4, -0.2, 0.7, 0.1, 0.5, -0.6]).unwrap();
    let x = Tensor::vector(vec![0.3, -0.8, 0.5]).unwrap();

    let loss = w.matmul(&x).unwrap().sigmoid().unwrap().reduce_sum().unwrap();
    loss.backward().unwrap();
    println!("loss = {:.6}", loss.item());
    println!("dloss/dw = {:?}", w.grad().unwrap());

    // The oracle nudges every coordinate of every listed parameter and
    // compares against the recorded backward pass.
    let params = vec![("w".to_string(), w.clone())];
    let report = grad_check::<_, TensorError>(
        || Ok(w.matmul(&x)?.sigmoid()?.reduce_sum()?),
        &params,
        DEFAULT_STEP,
    )
    .unwrap();
    println!(
        "finite differences: {} coordinates, max relative error {:.2e}",
        report.entries.len(),
        report.max_rel_error
    );

    let again = loss.replay().unwrap();
    assert_eq!(again[0].to_bits(), loss.item().to_bits());
    println!("replay reproduced the loss bit for bit");
}
