//! Applies the training augmentation chain (flip, affine, elastic, bias
//! field) to one positive patch and reports what changed.

use lesionseg::data::augment::augment;
use lesionseg::data::{extract_subvolumes, generate_phantom, AugmentConfig, PhantomSpec};
use lesionseg::rng::rng_from_seed;

fn main() -> lesionseg::Result<()> {
    let s = generate_phantom(&PhantomSpec {
        seed: 2,
        ..Default::default()
    })?;
    let patches = extract_subvolumes(&s, 32, 32)?;
    let p = patches
        .iter()
        .find(|p| p.positive)
        .expect("phantom has new lesions");
    let cfg = AugmentConfig::default();
    let mut rng = rng_from_seed(7);
    println!(
        "patch at {:?}: target mass {:.1}",
        p.origin,
        p.target.iter().sum::<f32>()
    );
    for i in 0..5 {
        let a = augment(p, &cfg, &mut rng);
        let diff = p
            .followup()
            .iter()
            .zip(a.followup())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        println!(
            "draw {i}: target mass {:.1}, positive {}, max |followup change| {diff:.3}",
            a.target.iter().sum::<f32>(),
            a.positive
        );
    }
    Ok(())
}
