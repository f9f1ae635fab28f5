//! Harmonic links, layer widths, and concat traffic against a dense block.

use hardnet_mseg::analyzer::hardblock_concat_traffic;
use hardnet_mseg::hardnet::{hard_links, HarDBlockCfg};

fn main() -> hardnet_mseg::Result<()> {
    for l in 1..=8 {
        let (links, width) = hard_links(l, 14, 1.7)?;
        println!("layer {l}: links {links:?} width {width}");
    }
    for n in [8, 16] {
        let cfg = HarDBlockCfg::new(n, 16, 1.7, 128);
        let sparse = hardblock_concat_traffic(&cfg, 44)?;
        let dense = hardblock_concat_traffic(&cfg.dense(), 44)?;
        println!(
            "n={n}: out_ch {} connections {} vs {}; concat reads {} vs {} bytes",
            cfg.out_ch()?,
            cfg.connection_count()?,
            cfg.dense().connection_count()?,
            sparse,
            dense
        );
    }
    Ok(())
}
