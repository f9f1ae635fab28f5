//! Per-layer parameter, MAC and traffic accounting.

use hardnet_mseg::analyzer::summarize;
use hardnet_mseg::decoder::build_mseg;
use hardnet_mseg::preset;
use hardnet_mseg::tensor::Shape4;

fn main() -> hardnet_mseg::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "tiny".into());
    let model = build_mseg(&preset::load(&name)?)?;
    let s = summarize(&model.graph, Shape4::new(1, 3, 352, 352))?;
    let mut convs: Vec<_> = s.layers.iter().filter(|l| l.op == "conv").collect();
    convs.sort_by_key(|l| std::cmp::Reverse(l.macs));
    println!("heaviest convs:");
    for l in convs.iter().take(5) {
        println!("  {:<32} {:>14} {:>12} MACs", l.node, l.output_shape.to_string(), l.macs);
    }
    println!(
        "params {}  MACs {}  traffic {} bytes  (weights hold {} elements)",
        s.totals.params,
        s.totals.macs,
        s.totals.traffic_bytes,
        model.init_weights(0).element_count()
    );
    Ok(())
}
