//! Grouping and divisive normalization of one layer's activity: group
//! variances `u`, the centered summary `v` the kernel sees, and the
//! normalized output handed to the next layer.
//!
//! cargo run --release --example divisive_normalization

use phsic::network::{group_response, layer_forward};
use phsic::{GroupingSpec, Matrix, Rng};

fn main() -> phsic::Result<()> {
    let spec = GroupingSpec::new(3, 0.2, 1.0, true)?;
    let z = [0.1, 0.3, 0.2, 2.0, -0.5, 1.5, 0.0, 0.0, 0.0];
    let g = group_response(&z, &spec)?;
    println!("z          {z:?}");
    println!("centered   {:?}", round(&g.centered));
    println!("u          {:?}", round(&g.u));
    println!("v          {:?}  (sum {:.1e})", round(&g.v), g.v.iter().sum::<f64>());
    println!("normalized {:?}", round(&g.normalized(spec.p)));

    // a whole layer: large-variance groups are damped relative to quiet ones
    let mut rng = Rng::new(2);
    let w = Matrix::from_fn(6, 4, |_, _| rng.normal());
    let x = Matrix::from_fn(3, 4, |_, _| 3.0 * rng.normal());
    let cache = layer_forward(&w, Some(&GroupingSpec::new(2, 0.2, 1.0, true)?), 0.01, 0.0, &x, &mut rng)?;
    for s in 0..3 {
        println!("sample {s}: z {:?} -> output {:?}, v {:?}", round(cache.z.row(s)), round(cache.output.row(s)), round(cache.features().row(s)));
    }
    Ok(())
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
