//! Generates a synthetic baseline/follow-up pair and writes it as NIfTI.
//!
//! cargo run --release --example phantom -- [seed] [out_dir]

use lesionseg::cli::save_subject;
use lesionseg::data::{generate_phantom, PhantomSpec};
use lesionseg::metrics::{connected_components_3d, Connectivity};

fn main() -> lesionseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.next().unwrap_or_else(|| "phantom-out".into());

    let spec = PhantomSpec {
        seed,
        ..Default::default()
    };
    let s = generate_phantom(&spec)?;
    let gt_voxels = s.gt_soft.data().iter().filter(|&&v| v >= 0.5).count();
    let lesions = connected_components_3d(
        &s.gt_soft.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        Connectivity::TwentySix,
    )?;
    println!(
        "{}: dims {:?}, {} new-lesion voxels in {} components",
        s.subject_id,
        s.dims(),
        gt_voxels,
        lesions.n_components
    );

    let mean = |d: &[f32]| d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
    println!(
        "mean intensity baseline {:.4}, follow-up {:.4}",
        mean(s.baseline.data()),
        mean(s.followup.data())
    );

    let dir = std::path::Path::new(&out).join(&s.subject_id);
    save_subject(&s, &dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}
