//! Trains a small 4-member ensemble (the last member gated by attention), each
//! member on its own patch split, and soft-averages their whole-volume
//! predictions.
//!
//! cargo run --release --example ensemble -- [epochs]

use lesionseg::data::{extract_subvolumes, generate_phantom, AugmentConfig, PhantomSpec};
use lesionseg::inference::{ensemble_predict, predict_volume};
use lesionseg::metrics::voxel_metrics;
use lesionseg::trainer::{train_ensemble, TrainConfig};
use lesionseg::unet::{Model, ModelConfig};

fn main() -> lesionseg::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let subjects = [11, 12]
        .into_iter()
        .map(|seed| {
            generate_phantom(&PhantomSpec {
                dims: [32; 3],
                new_radius: [3.0, 4.0],
                seed,
                ..Default::default()
            })
        })
        .collect::<lesionseg::Result<Vec<_>>>()?;
    let mut patches = Vec::new();
    for s in &subjects {
        patches.extend(extract_subvolumes(s, 16, 16)?);
    }
    let model_cfg = ModelConfig {
        base_filters: 4,
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs,
        batch_size: 4,
        patch_size: 16,
        stride: 16,
        augment: AugmentConfig::disabled(),
        ..Default::default()
    };
    let members = train_ensemble(4, &patches, &model_cfg, &cfg)?;

    let models: Vec<Model<f32>> = members
        .iter()
        .map(|m| m.outcome.best.model.clone())
        .collect();
    let sample = &subjects[0];
    for (k, m) in models.iter().enumerate() {
        let v = predict_volume(m, sample, 16, 16, 0, 0)?;
        let d = voxel_metrics(&v, &sample.gt_soft, 0.5)?.soft_dice;
        println!(
            "member {} attention={:<5} val split {:?}  soft Dice {d:.3}",
            k + 1,
            m.config().attention,
            members[k].split.val
        );
    }
    let avg = ensemble_predict(&models, sample, 16, 16, 0, 0)?;
    println!(
        "ensemble soft Dice {:.3}",
        voxel_metrics(&avg, &sample.gt_soft, 0.5)?.soft_dice
    );
    Ok(())
}
