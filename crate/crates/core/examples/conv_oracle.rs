//! im2col convolution against the direct seven-loop reference.

use hardnet_mseg::tensor::{conv2d, conv2d_naive, max_rel_err, ConvSpec, Shape4, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hardnet_mseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let specs = [
        ConvSpec::new(8, 16, 3).same_padding(),
        ConvSpec::new(8, 8, 3).dilation(3).padding(3),
        ConvSpec::new(8, 8, 1).kernel2(1, 7).padding2(0, 3),
        ConvSpec::new(8, 12, 3).stride(2).padding(1).groups(4).bias(true),
    ];
    let x = Tensor4::<f32>::randn(Shape4::new(2, 8, 23, 19), 1.0, &mut rng);
    for spec in specs {
        let w = Tensor4::randn(spec.weight_shape(), 0.5, &mut rng);
        let b = vec![0.1f32; spec.out_ch];
        let bias = spec.has_bias.then_some(&b[..]);
        let fast = conv2d(&x, &w, bias, &spec)?;
        let slow = conv2d_naive(&x, &w, bias, &spec)?;
        println!(
            "k {:?} s {:?} p {:?} d {:?} g {} -> {}  max rel err {:.2e}",
            spec.kernel,
            spec.stride,
            spec.padding,
            spec.dilation,
            spec.groups,
            fast.shape(),
            max_rel_err(&fast, &slow)
        );
    }
    Ok(())
}
