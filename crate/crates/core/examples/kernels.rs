//! Tensor kernels on small inputs: matmul with MAC counting, softmax,
//! layer norm, GELU and patchify.

use litetrack::tensor::{gelu, layer_norm, matmul, patchify, softmax_rows, unpatchify, MacCounter};
use litetrack::Tensor;

fn main() -> litetrack::Result<()> {
    let a = Tensor::from_fn([2, 3], |i| i as f32);
    let b = Tensor::identity(3);
    let mut macs = MacCounter::enabled();
    let c = matmul(&a, &b, &mut macs)?;
    println!("a @ I = {:?} ({} MACs)", c.data(), macs.total());

    let p = softmax_rows(&Tensor::new([1, 4], vec![1.0, 2.0, 3.0, 1000.0])?)?;
    println!("softmax with a large logit: {:?}", p.data());

    let x = Tensor::new([1, 4], vec![1.0, 2.0, 3.0, 4.0])?;
    let y = layer_norm(&x, &Tensor::full([4], 1.0), &Tensor::zeros([4]), 1e-5)?;
    println!("layer norm: {:?}", y.data());

    let g = gelu(&Tensor::new([3], vec![-3.0, 0.0, 3.0])?);
    println!("gelu(-3, 0, 3) = {:?}", g.data());

    let img = Tensor::from_fn([3, 32, 32], |i| (i % 255) as f32);
    let patches = patchify(&img, 16)?;
    println!("patchify 3x32x32 / 16 -> {:?}", patches.shape());
    assert_eq!(unpatchify(&patches, 3, 32, 32, 16)?, img);
    Ok(())
}
