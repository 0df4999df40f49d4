//! pHSIC and HSIC between a signal and a dependent, a noisy and an
//! independent copy under each kernel family.
//!
//! cargo run --release --example estimators

use phsic::kernels::{hsic_estimate, phsic_estimate};
use phsic::{KernelFamily, LabelKernel, Matrix, Rng};

fn main() -> phsic::Result<()> {
    let mut rng = Rng::new(7);
    let m = 64;
    let x = Matrix::from_fn(m, 3, |_, _| rng.normal());
    let dependent = Matrix::from_fn(m, 3, |i, j| x.get(i, j).powi(2));
    let noisy = Matrix::from_fn(m, 3, |i, j| x.get(i, j) + rng.normal());
    let independent = Matrix::from_fn(m, 3, |_, _| rng.normal());

    for family in [KernelFamily::Linear, KernelFamily::CosineSimilarity, KernelFamily::gaussian(1.0)?] {
        let kx = family.matrix(&x)?;
        println!("{family:?}");
        for (name, other) in [("x^2", &dependent), ("x+noise", &noisy), ("independent", &independent)] {
            let ko = family.matrix(other)?;
            println!("  {name:<12} phsic {:>9.5}  hsic {:>9.5}", phsic_estimate(&kx, &ko)?, hsic_estimate(&kx, &ko)?);
        }
        // pHSIC(X,X) upper-bounds HSIC(X,X)
        println!("  self         phsic {:>9.5}  hsic {:>9.5}", phsic_estimate(&kx, &kx)?, hsic_estimate(&kx, &kx)?);
    }

    let labels: Vec<usize> = (0..10).map(|i| i % 4).collect();
    let ky = LabelKernel::Balanced.matrix(&labels, 4)?;
    println!("label kernel for 4 classes: same {:.4}, different {:.4}", ky.values.get(0, 4), ky.values.get(0, 1));
    Ok(())
}
