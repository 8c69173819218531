//! Resamples an anisotropic phantom to 1 mm, crops it to a fixed grid and
//! z-normalizes both timepoints.

use lesionseg::data::{
    generate_phantom, preprocess::preprocess_sample, PhantomSpec, PreprocessConfig,
};

fn main() -> lesionseg::Result<()> {
    let spec = PhantomSpec {
        dims: [40, 64, 64],
        spacing: [1.5, 1.0, 1.0],
        seed: 4,
        ..Default::default()
    };
    let raw = generate_phantom(&spec)?;
    let cfg = PreprocessConfig {
        target_spacing: Some([1.0; 3]),
        target_dims: Some([64; 3]),
        ..Default::default()
    };
    let s = preprocess_sample(&raw, &cfg)?;
    for (name, v) in [("baseline", &s.baseline), ("followup", &s.followup)] {
        let n = v.len() as f64;
        let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v
            .data()
            .iter()
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        println!(
            "{name}: {:?} @ {:?} mm  mean {mean:+.2e} std {:.4}",
            v.dims(),
            v.spacing(),
            var.sqrt()
        );
    }
    println!(
        "reference mask sum {:.1} -> {:.1}",
        raw.gt_soft.data().iter().sum::<f32>(),
        s.gt_soft.data().iter().sum::<f32>()
    );
    Ok(())
}
