//! Image in, mask out: writes a synthetic P6 image, segments it with the
//! tiny model after a short training run, and writes the P5 mask.

use hardnet_mseg::decoder::{build_mseg, segment_image};
use hardnet_mseg::io::preprocess::binary_to_mask;
use hardnet_mseg::io::{write_image, write_mask};
use hardnet_mseg::metrics::{binarize, evaluate_image};
use hardnet_mseg::preset;
use hardnet_mseg::train::{gen_blobs, train_toy, Policy, TrainOptions};

fn main() -> hardnet_mseg::Result<()> {
    let model = build_mseg(&preset::builtin("tiny")?)?;
    let data = gen_blobs(3, 200, 64)?;
    let mut opts = TrainOptions::new(Policy::AdamPolicy);
    opts.epochs = 4;
    opts.lr = Some(1e-3);
    let (weights, _) = train_toy(&model, &model.init_weights(3), &data, &opts, |_, _| {})?;
    let params = model.params::<f32>(&weights)?;

    let sample = &gen_blobs(1234, 1, 96)?.samples[0];
    let dir = std::env::temp_dir();
    std::fs::write(dir.join("blob.ppm"), write_image(&sample.image))?;
    let prob = segment_image(&model, &params, &sample.image, 64)?;
    let bin = binarize(&prob, 0.5)?;
    std::fs::write(dir.join("blob_mask.pgm"), write_mask(&binary_to_mask(&bin)))?;
    let rec = evaluate_image("blob", &prob, &sample.mask_tensor(), 0.5)?;
    println!("mask {} written to {}; dice {:.4}", bin.shape(), dir.display(), rec.metrics.dice);
    Ok(())
}
