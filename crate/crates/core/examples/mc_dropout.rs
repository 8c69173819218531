//! Monte-Carlo dropout on one attention network: the mean of T stochastic
//! passes, and how its spread across seeds shrinks as T grows.

use lesionseg::rng::rng_from_seed;
use lesionseg::tensor::Tensor;
use lesionseg::unet::{mc_dropout_forward, Model, ModelConfig};
use rand::Rng;

fn main() -> lesionseg::Result<()> {
    let model = Model::<f32>::build(ModelConfig {
        base_filters: 4,
        attention: true,
        dropout_p: 0.2,
        seed: 3,
        ..Default::default()
    })?;
    let mut rng = rng_from_seed(9);
    let x = Tensor::from_fn(&[1, 2, 16, 16, 16], |_| rng.random_range(-1.0f32..1.0));

    let out = mc_dropout_forward(&model, &x, 8, 1, true)?;
    let samples = out.samples.expect("samples kept");
    let voxel_std: f64 = (0..x.len() / 2)
        .map(|i| {
            let vals: Vec<f64> = samples.iter().map(|s| s.data()[i] as f64).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
        })
        .sum::<f64>()
        / (x.len() / 2) as f64;
    println!(
        "T=8: mean prediction sum {:.2}, mean per-voxel std {voxel_std:.4}",
        out.mean.sum()
    );

    for t in [1, 4, 16] {
        let means: Vec<Tensor> = (0..8)
            .map(|seed| mc_dropout_forward(&model, &x, t, seed, false).map(|o| o.mean))
            .collect::<Result<_, _>>()?;
        let n = means.len() as f64;
        let var: f64 = (0..means[0].len())
            .map(|i| {
                let m = means.iter().map(|o| o.data()[i] as f64).sum::<f64>() / n;
                means
                    .iter()
                    .map(|o| (o.data()[i] as f64 - m).powi(2))
                    .sum::<f64>()
                    / n
            })
            .sum::<f64>()
            / means[0].len() as f64;
        println!("T={t:>2}: across-seed variance of the mean {var:.3e}");
    }
    Ok(())
}
