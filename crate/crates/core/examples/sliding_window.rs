//! Overlapping sliding-window stitching with a stub predictor that returns
//! each patch's origin depth, so the stitched value is a visible average.

use lesionseg::data::{generate_phantom, Patch, PhantomSpec};
use lesionseg::inference::{sliding_window_predict, PatchPredictor};
use lesionseg::tensor::Tensor;

struct OriginDepth;

impl PatchPredictor for OriginDepth {
    fn predict_patch(&self, patch: &Patch, _index: usize) -> lesionseg::Result<Tensor> {
        let s = patch.size;
        Ok(Tensor::full(&[1, 1, s, s, s], patch.origin[0] as f32))
    }
}

fn main() -> lesionseg::Result<()> {
    let s = generate_phantom(&PhantomSpec {
        dims: [48, 32, 32],
        seed: 1,
        ..Default::default()
    })?;
    for stride in [32, 16, 8] {
        let v = sliding_window_predict(&OriginDepth, &s, 32, stride)?;
        let column: Vec<String> = (0..48)
            .step_by(4)
            .map(|z| format!("{:.0}", v.get(z, 0, 0)))
            .collect();
        println!("stride {stride:>2}: value along z = [{}]", column.join(" "));
    }
    Ok(())
}
