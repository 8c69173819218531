//! Round-trips a volume through NIfTI and a model through the checkpoint
//! format, then shows the structured error for a corrupted checkpoint.

use lesionseg::data::{generate_phantom, PhantomSpec};
use lesionseg::unet::{Model, ModelConfig};
use lesionseg::volume_io::{
    decode_checkpoint, encode_checkpoint, read_volume, write_volume, CheckpointMeta,
};

fn main() -> lesionseg::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| lesionseg::Error::io(std::env::temp_dir(), e))?;
    let s = generate_phantom(&PhantomSpec::default())?;
    let path = dir.path().join("followup.nii");
    write_volume(&s.followup, &path)?;
    let back = read_volume(&path)?;
    println!("volume round trip bit-exact: {}", back == s.followup);

    let model = Model::<f32>::build(ModelConfig {
        base_filters: 4,
        attention: true,
        ..Default::default()
    })?;
    let meta = CheckpointMeta {
        epoch: 3,
        val_soft_dice: 0.5,
        rng_cursor: 12,
        extra: String::new(),
    };
    let mut bytes = encode_checkpoint(&model, &meta);
    println!(
        "checkpoint: {} bytes, {} parameters",
        bytes.len(),
        model.num_parameters()
    );
    let (restored, _) = decode_checkpoint(&bytes)?;
    println!(
        "checkpoint round trip bit-exact: {}",
        restored.params() == model.params()
    );

    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    match decode_checkpoint(&bytes) {
        Err(e) => println!("corrupted checkpoint: {e}"),
        Ok(_) => println!("corruption went unnoticed"),
    }
    Ok(())
}
