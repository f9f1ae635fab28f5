//! Full HarDNet-MSEG forward pass with random weights: taps and output mask.

use std::sync::Arc;

use hardnet_mseg::decoder::build_mseg;
use hardnet_mseg::graph::{run, Eager};
use hardnet_mseg::preset;
use hardnet_mseg::tensor::{Shape4, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hardnet_mseg::Result<()> {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(352);
    let model = build_mseg(&preset::builtin("hardnet68-mseg")?)?;
    let params = model.params::<f32>(&model.init_weights(0))?;
    let x = Tensor4::<f32>::randn(Shape4::new(1, 3, size, size), 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let t = std::time::Instant::now();
    let outs = run(&model.graph, &mut Eager::new(&params), Arc::new(x))?;
    println!("{} nodes, forward {:.2?}", model.graph.len(), t.elapsed());
    for (name, v) in &outs {
        println!("{name:>7}: {}", v.shape());
    }
    Ok(())
}
