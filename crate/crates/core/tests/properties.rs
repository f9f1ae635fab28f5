use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hardnet_mseg::io::pnm::{read_any, write_image};
use hardnet_mseg::io::{ImageBuffer, StoredTensor, WeightStore};
use hardnet_mseg::metrics::{scalar_metrics, ConfusionCounts};
use hardnet_mseg::tensor::{conv2d, conv2d_naive, max_rel_err, ConvSpec, Shape4, Tensor4};

fn store_strategy() -> impl Strategy<Value = Vec<(String, Vec<usize>, Vec<u32>)>> {
    prop::collection::vec(
        ("[a-z][a-z0-9_.]{0,24}", prop::collection::vec(1usize..4, 1..4)).prop_flat_map(|(name, shape)| {
            let n: usize = shape.iter().product();
            (Just(name), Just(shape), prop::collection::vec(any::<u32>(), n))
        }),
        0..6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_store_round_trips_bits(entries in store_strategy()) {
        let mut store = WeightStore::new();
        for (name, shape, bits) in &entries {
            let data = bits.iter().map(|b| f32::from_bits(*b)).collect();
            store.insert(name.clone(), StoredTensor::new(shape.clone(), data).unwrap());
        }
        let bytes = store.to_bytes();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        for ((na, a), (nb, b)) in store.iter().zip(back.iter()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(&a.shape, &b.shape);
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncated_store_never_panics(cut in 0usize..200) {
        let mut store = WeightStore::new();
        store.insert("w", StoredTensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let bytes = store.to_bytes();
        let _ = WeightStore::from_bytes(&bytes[..cut.min(bytes.len())]);
    }

    #[test]
    fn conv_matches_naive(
        seed in any::<u64>(),
        g in 1usize..3, ci in 1usize..4, co in 1usize..4,
        k in 1usize..4, s in 1usize..3, p in 0usize..3, d in 1usize..3,
        h in 4usize..14, w in 4usize..14,
    ) {
        let spec = ConvSpec::new(g * ci, g * co, k).stride(s).padding(p).dilation(d).groups(g).bias(true);
        let xs = Shape4::new(1, g * ci, h, w);
        prop_assume!(spec.output_shape(xs).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor4::<f64>::randn(xs, 1.0, &mut rng);
        let wt = Tensor4::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
        let b = vec![0.5; g * co];
        let fast = conv2d(&x, &wt, Some(&b), &spec).unwrap();
        let slow = conv2d_naive(&x, &wt, Some(&b), &spec).unwrap();
        prop_assert!(max_rel_err(&fast, &slow) < 1e-12);
    }

    #[test]
    fn dice_iou_identity(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000, tn in 0u64..10_000) {
        let m = scalar_metrics(&ConfusionCounts::new(tp, fp, fn_, tn));
        prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        for v in [m.dice, m.iou, m.precision, m.recall, m.f2, m.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pnm_round_trip(w in 1usize..9, h in 1usize..9, gray in any::<bool>(), seed in any::<u8>()) {
        let c = if gray { 1 } else { 3 };
        let samples = (0..w * h * c).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let img = ImageBuffer::new(w, h, c, samples).unwrap();
        prop_assert_eq!(read_any(&write_image(&img)).unwrap(), img);
    }
}
