//! Latency of the forward pass at two input sizes.

use hardnet_mseg::analyzer::bench;
use hardnet_mseg::decoder::build_mseg;
use hardnet_mseg::preset;
use hardnet_mseg::tensor::Shape4;

fn main() -> hardnet_mseg::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "tiny".into());
    let model = build_mseg(&preset::load(&name)?)?;
    let w = model.init_weights(0);
    for size in [256, 352] {
        let r = bench(&model, &w, Shape4::new(1, 3, size, size), 2, 10, 1, 0)?;
        print!("{}", r.to_table());
    }
    Ok(())
}
