//! The Gaussian two-point rule: third factor signs on constructed pairs and
//! the equivalence of a batch of two with one pair update.
//!
//! cargo run --release --example two_point_rule

use phsic::network::layer_forward;
use phsic::rules::{layer_gradient, two_point_update};
use phsic::{KernelFamily, KernelSpec, LabelKernel, Matrix, Rng};

fn main() -> phsic::Result<()> {
    let sigma = 1.0;
    let spec = KernelSpec::plain(KernelFamily::gaussian(sigma)?);
    let w = Matrix::identity(3);
    let mut rng = Rng::new(0);
    let n_classes = 10;
    let ky = LabelKernel::Balanced;

    let pairs = [
        ("same label, distant activity", [1.0, 0.0, 0.0], [0.0, 2.0, 1.0], 0, 0),
        ("different label, near-identical activity", [1.0, 0.5, 0.2], [1.05, 0.5, 0.2], 0, 1),
        ("same label, near-identical activity", [1.0, 0.5, 0.2], [1.05, 0.5, 0.2], 3, 3),
    ];
    for (name, a, b, la, lb) in pairs {
        let x = Matrix::from_rows(&[a, b])?;
        let cache = layer_forward(&w, None, 0.01, 0.0, &x, &mut rng)?;
        let k_y = ky.eval(la, lb, n_classes)?;
        // centering with the two-sample means
        let kym = ky.matrix(&[la, lb], n_classes)?;
        let kzm = spec.family.matrix(cache.features())?;
        let (dw, tf) = two_point_update(&spec, &cache, 0, 1, k_y, 2.0, kym.mean, kzm.mean, 0.01)?;
        println!(
            "{name:<42} k_z {:.3}  M {:+.4} ({})  |dW| {:.4}",
            tf.kernel,
            tf.m,
            if tf.m < 0.0 { "anti-Hebbian" } else { "Hebbian" },
            dw.frobenius_sq().sqrt()
        );
    }

    // a batch of two gives -gradient = dW / 2
    let x = Matrix::from_fn(2, 5, |_, _| rng.normal());
    let w = Matrix::from_fn(4, 5, |_, _| 0.5 * rng.normal());
    let cache = layer_forward(&w, None, 0.01, 0.0, &x, &mut rng)?;
    let kym = ky.matrix(&[2, 7], n_classes)?;
    let kzm = spec.family.matrix(cache.features())?;
    let (grad, _) = layer_gradient(&spec, &cache, &kym, 2.0, 0.01)?;
    let (dw, _) = two_point_update(&spec, &cache, 0, 1, kym.values.get(0, 1), 2.0, kym.mean, kzm.mean, 0.01)?;
    let gap = grad.data().iter().zip(dw.data()).map(|(g, d)| (-g - 0.5 * d).abs()).fold(0.0, f64::max);
    println!("batch of two vs pair rule: max |(-grad) - dW/2| = {gap:.2e}");
    Ok(())
}
