//! Reverse-mode gradients of a tiny two-layer net checked against central
//! differences.

use prefnet::autodiff::{Tape, Tensor};
use prefnet::Result;

fn loss(w1: &Tensor, w2: &Tensor, x: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let h = tape.constant(x.clone()).matmul(tape.constant(w1.clone()))?.tanh();
    Ok(h.matmul(tape.constant(w2.clone()))?.sigmoid().sum().value().item())
}

fn main() -> Result<()> {
    let x = Tensor::new(vec![4, 3], (0..12).map(|k| (k as f64 * 0.37).sin()).collect())?;
    let w1 = Tensor::new(vec![3, 5], (0..15).map(|k| (k as f64 * 0.91).cos() * 0.5).collect())?;
    let w2 = Tensor::new(vec![5, 1], (0..5).map(|k| 0.2 * k as f64 - 0.4).collect())?;

    let tape = Tape::new();
    let p1 = tape.param(w1.clone());
    let p2 = tape.param(w2.clone());
    let h = tape.constant(x.clone()).matmul(p1)?.tanh();
    let out = h.matmul(p2)?.sigmoid().sum();
    let grads = tape.backward(out)?;
    let g1 = grads.get_or_zeros(p1);

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..w1.numel() {
        let mut plus = w1.clone();
        let mut minus = w1.clone();
        plus.data_mut()[k] += eps;
        minus.data_mut()[k] -= eps;
        let fd = (loss(&plus, &w2, &x)? - loss(&minus, &w2, &x)?) / (2.0 * eps);
        let ad = g1.data()[k];
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
        worst = worst.max(rel);
        println!("w1[{k:>2}]  autodiff {ad:+.8}  finite diff {fd:+.8}");
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
