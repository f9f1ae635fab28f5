//! Trains the tiny model on synthetic blobs and reports held-out metrics.

use hardnet_mseg::decoder::build_mseg;
use hardnet_mseg::preset;
use hardnet_mseg::train::{gen_blobs, train_toy, Policy, TrainOptions};

fn main() -> hardnet_mseg::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let model = build_mseg(&preset::builtin("tiny")?)?;
    let data = gen_blobs(11, 500, 64)?;
    let mut opts = TrainOptions::new(Policy::AdamPolicy);
    opts.epochs = epochs;
    opts.seed = 11;
    let (_, report) = train_toy(&model, &model.init_weights(11), &data, &opts, |e, loss| {
        println!("epoch {:>2} loss {loss:.4}", e + 1)
    })?;
    let a = report.held_out.aggregate;
    println!("held-out ({} images): mDice {:.4} mIoU {:.4} MAE {:.4}", report.held_out_samples, a.mdice, a.miou, a.mae);
    Ok(())
}
