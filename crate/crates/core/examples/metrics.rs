//! Confusion counts, the six scalar metrics, and a dataset report.

use hardnet_mseg::metrics::{evaluate_dataset, scalar_metrics, ConfusionCounts};
use hardnet_mseg::tensor::{Shape4, Tensor4};

fn disc(r: f32, cx: f32) -> Tensor4<f32> {
    Tensor4::from_fn(Shape4::new(1, 1, 32, 32), |_, _, y, x| {
        let (dx, dy) = (x as f32 - cx, y as f32 - 16.0);
        if dx * dx + dy * dy < r * r { 0.9 } else { 0.1 }
    })
}

fn main() -> hardnet_mseg::Result<()> {
    let m = scalar_metrics(&ConfusionCounts::new(80, 20, 10, 890));
    println!("{m:?}");
    let gt = |r, cx| disc(r, cx).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let preds = vec![("a".to_string(), disc(8.0, 16.0)), ("b".to_string(), disc(8.0, 19.0))];
    let gts = vec![("a".to_string(), gt(8.0, 16.0)), ("b".to_string(), gt(9.0, 16.0))];
    let report = evaluate_dataset(&preds, &gts, 0.5)?;
    print!("{}", report.to_table());
    println!("pooled: {:?}", report.pooled());
    Ok(())
}
