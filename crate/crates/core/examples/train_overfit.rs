//! Overfits a base-8 U-Net to the 32³ patches of a single phantom, then
//! predicts the whole volume back with a sliding window.
//!
//! cargo run --release --example train_overfit -- [epochs]

use lesionseg::data::{extract_subvolumes, generate_phantom, AugmentConfig, PhantomSpec};
use lesionseg::inference::predict_volume;
use lesionseg::metrics::voxel_metrics;
use lesionseg::trainer::{train, TrainConfig};
use lesionseg::unet::{Model, ModelConfig};

fn main() -> lesionseg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(150);

    let sample = generate_phantom(&PhantomSpec {
        seed: 1,
        new_radius: [5.0, 7.0],
        ..Default::default()
    })?;
    let patches = extract_subvolumes(&sample, 32, 32)?;
    let positives = patches.iter().filter(|p| p.positive).count();
    println!("{} patches, {positives} positive", patches.len());

    let model = Model::build(ModelConfig {
        base_filters: 8,
        dropout_p: 0.0,
        seed: 1,
        ..Default::default()
    })?;
    let mut cfg = TrainConfig {
        epochs,
        augment: AugmentConfig::disabled(),
        patch_size: 32,
        stride: 32,
        ..Default::default()
    };
    cfg.optimizer.learning_rate = 2e-3;
    let out = train(model, &patches, &patches, &cfg)?;
    println!(
        "best epoch {} (validation soft Dice {:.4})",
        out.best.meta.epoch, out.best.meta.val_soft_dice
    );

    // at R = S the windows tile the volume, so this is also the soft Dice
    // pooled over the training patches
    let pred = predict_volume(&out.best.model, &sample, 32, 32, 0, 0)?;
    let m = voxel_metrics(&pred, &sample.gt_soft, 0.5)?;
    println!(
        "whole volume: soft Dice {:.4}, hard Dice {:.4}, Jaccard {:.4}, PPV {:.4}",
        m.soft_dice, m.hard_dice, m.jaccard, m.ppv
    );
    Ok(())
}
