//! Scores a shifted copy of a phantom's reference mask: voxel overlap,
//! lesion-wise detection and surface distances.

use lesionseg::data::{generate_phantom, PhantomSpec, Volume};
use lesionseg::metrics::{evaluate, reports_to_csv, EvalConfig};

fn main() -> lesionseg::Result<()> {
    let s = generate_phantom(&PhantomSpec {
        seed: 5,
        ..Default::default()
    })?;
    let gt = &s.gt_soft;
    let mut reports = Vec::new();
    for shift in [0usize, 1, 2, 4] {
        let pred = Volume::from_fn(gt.dims(), gt.spacing(), |z, y, x| {
            if x >= shift {
                gt.get(z, y, x - shift)
            } else {
                0.0
            }
        })?;
        reports.push(evaluate(
            &format!("shift-{shift}"),
            &pred,
            gt,
            &EvalConfig::default(),
        )?);
    }
    print!("{}", reports_to_csv(&reports)?);
    Ok(())
}
