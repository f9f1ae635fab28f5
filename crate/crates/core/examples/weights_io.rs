//! MSEG-W1 save/load, batch-norm folding, and a manifest check.

use hardnet_mseg::decoder::{build_mseg, forward_mseg};
use hardnet_mseg::preset;
use hardnet_mseg::tensor::{max_rel_err, Shape4, Tensor4};
use hardnet_mseg::io::WeightStore;

fn main() -> hardnet_mseg::Result<()> {
    let model = build_mseg(&preset::builtin("hardnet68-mseg")?)?;
    let store = model.init_weights(4);
    let path = std::env::temp_dir().join("hardnet68-mseg.w1");
    store.write_file(&path)?;
    let back = WeightStore::read_file(&path)?;
    println!(
        "{} tensors, {} values, {} bytes; identical bytes after reload: {}",
        back.len(),
        back.element_count(),
        std::fs::metadata(&path)?.len(),
        back.to_bytes() == store.to_bytes()
    );
    println!("manifest diffs: {:?}", model.graph.check_manifest(&back));

    let (graph, folded) = model.graph.fold_batchnorm(&back)?;
    let folded_model = hardnet_mseg::decoder::MsegModel { cfg: model.cfg.clone(), graph };
    let x = Tensor4::<f32>::full(Shape4::new(1, 3, 128, 128), 0.25);
    let a = forward_mseg(&model, &model.params(&back)?, &x)?;
    let b = forward_mseg(&folded_model, &folded_model.params(&folded)?, &x)?;
    println!("folded {} nodes -> {}, output rel diff {:.2e}", model.graph.len(), folded_model.graph.len(), max_rel_err(&a, &b));
    Ok(())
}
