//! Reverse-mode gradients of a small two-layer computation.

use sfslots::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]])?, true);
    let w = g.leaf(Tensor::from_rows(&[vec![0.3, -0.2, 0.1], vec![0.0, 0.4, -0.5]])?, true);
    let h = g.matmul(x, w)?;
    let p = g.softmax(h, 1)?;
    let loss = g.cross_entropy(h, &[2, 0])?;
    g.backward(loss)?;

    println!("softmax rows: {:?}", g.value(p).data());
    println!("loss: {:.6}", g.value(loss).data()[0]);
    println!("dloss/dx: {:?}", g.grad(x).data());
    println!("dloss/dw: {:?}", g.grad(w).data());

    // gradients accumulate until cleared
    g.backward(loss)?;
    println!("after a second backward: {:?}", g.grad(x).data());
    g.zero_grad();
    println!("after zero_grad: {:?}", g.grad(x).data());
    Ok(())
}
