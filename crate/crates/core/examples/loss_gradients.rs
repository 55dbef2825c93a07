//! Loss terms on random score maps and a finite-difference spot check of
//! the analytic gradient.

use litetrack::head::{BBox, ScoreMaps};
use litetrack::objective::{giou, loss_grad, total_loss, LossConfig};
use litetrack::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> litetrack::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = 8;
    let mut map = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.1f32..0.9));
    let maps = ScoreMaps::new(map(&[s, s]), map(&[2, s, s]), map(&[2, s, s]))?;
    let gt = BBox::new(0.43, 0.58, 0.27, 0.19);
    let config = LossConfig::default();

    let loss = total_loss(&maps, &gt, &config)?;
    println!("{loss:?}");
    println!("giou(gt, gt) = {}", giou(&gt, &gt)?);

    let grad = loss_grad(&maps, &gt, &config)?;
    let i = 27;
    let h = 1e-3;
    let at = |d: f32| -> litetrack::Result<f64> {
        let mut v = maps.center.to_vec();
        v[i] += d;
        let m = ScoreMaps::new(Tensor::new([s, s], v)?, maps.offset.clone(), maps.size.clone())?;
        Ok(total_loss(&m, &gt, &config)?.total)
    };
    let numeric = (at(h)? - at(-h)?) / (2.0 * h as f64);
    println!("d loss / d center[{i}]: analytic {:.6e} numeric {numeric:.6e}", grad.center.data()[i]);
    Ok(())
}
