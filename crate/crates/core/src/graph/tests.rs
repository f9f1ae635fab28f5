use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Activation;

fn small_graph() -> Graph {
    let (mut b, x) = GraphBuilder::new(2);
    let c = b.conv("c", x, ConvSpec::new(2, 3, 3).padding(1).bias(false)).unwrap();
    let n = b.batchnorm("bn", c, 1e-5).unwrap();
    let a = b.activation("act", n, Activation::Relu6).unwrap();
    let p = b.maxpool("pool", a, 2, 2, 0).unwrap();
    let u = b.resize_like("up", p, a, false).unwrap();
    let m = b.mul("mul", u, a).unwrap();
    let cat = b.concat("cat", &[m, a]).unwrap();
    b.mark_output("out", cat);
    b.mark_output("pooled", p);
    b.finish()
}

fn randomized_store(g: &Graph, seed: u64) -> WeightStore {
    let mut store = g.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in g.params() {
        let t = store.get_mut(&p.name).unwrap();
        let noise = Tensor4::<f32>::uniform(Shape4::new(1, 1, 1, t.numel()), 0.5, 1.5, &mut rng);
        for (v, n) in t.data.iter_mut().zip(noise.data()) {
            *v = *v * 0.5 + n;
        }
    }
    store
}

#[test]
fn shapes_and_strides() {
    let g = small_graph();
    let shapes = g.infer_shapes(Shape4::new(1, 2, 9, 8)).unwrap();
    assert_eq!(shapes[g.output("pooled").unwrap().0], Shape4::new(1, 3, 4, 4));
    assert_eq!(shapes[g.output("out").unwrap().0], Shape4::new(1, 6, 9, 8));
}

#[test]
fn builder_rejects_channel_mismatch_and_duplicates() {
    let (mut b, x) = GraphBuilder::new(2);
    assert!(b.conv("c", x, ConvSpec::new(3, 4, 1)).is_err());
    b.activation("a", x, Activation::Relu).unwrap();
    assert!(b.activation("a", x, Activation::Relu).is_err());
}

#[test]
fn missing_weight_names_the_node() {
    let g = small_graph();
    let mut store = g.init_params(1);
    let mut pruned = WeightStore::new();
    for (k, v) in store.iter() {
        if k != "bn.running_var" {
            pruned.insert(k, v.clone());
        }
    }
    store = pruned;
    let err = params_for::<f32>(&g, &store).unwrap_err().to_string();
    assert!(err.contains("bn") && err.contains("running_var"), "{err}");
    assert_eq!(g.check_manifest(&store).len(), 1);
}

#[test]
fn eager_and_tape_agree() {
    let g = small_graph();
    let store = randomized_store(&g, 5);
    let params: ParamMap<f64> = store.to_params().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor4::<f64>::randn(Shape4::new(2, 2, 7, 6), 1.0, &mut rng);
    let eager = run(&g, &mut Eager::new(&params), Arc::new(x.clone())).unwrap();
    let mut tape = crate::autodiff::Tape::new();
    let xv = tape.constant(x);
    let outs = {
        let mut be = TapeBackend::new(&mut tape, &g, &params);
        run(&g, &mut be, xv).unwrap()
    };
    for (k, v) in &eager {
        assert!(tape.value(outs[k]).data() == v.data(), "{k}");
    }
}

#[test]
fn permuted_orders_give_identical_results() {
    let g = small_graph();
    let store = randomized_store(&g, 2);
    let params: ParamMap<f64> = store.to_params().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Arc::new(Tensor4::<f64>::randn(Shape4::new(1, 2, 8, 8), 1.0, &mut rng));
    let base = run(&g, &mut Eager::new(&params), x.clone()).unwrap();
    for _ in 0..5 {
        let order = g.random_topo_order(&mut rng);
        let a = run_with_order(&g, &mut Eager::new(&params), x.clone(), &order).unwrap();
        let pg = g.permuted(&order).unwrap();
        let b = run(&pg, &mut Eager::new(&params), x.clone()).unwrap();
        for (k, v) in &base {
            assert_eq!(a[k].data(), v.data());
            assert_eq!(b[k].data(), v.data());
        }
    }
    let mut bad: Vec<NodeId> = (0..g.len()).map(NodeId).collect();
    bad.swap(1, 2);
    assert!(g.permuted(&bad).is_err());
}

#[test]
fn nan_is_reported_at_its_node() {
    let (mut b, x) = GraphBuilder::new(1);
    let c = b.conv("blowup", x, ConvSpec::new(1, 1, 1)).unwrap();
    b.mark_output("y", c);
    let g = b.finish();
    let mut store = g.init_params(0);
    store.get_mut("blowup.weight").unwrap().data[0] = f32::NAN;
    let params: ParamMap<f32> = store.to_params().unwrap();
    let x = Arc::new(Tensor4::ones(Shape4::new(1, 1, 2, 2)));
    let err = run(&g, &mut Eager::new(&params), x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { ref node } if node == "blowup"));
}

#[test]
fn folding_batchnorm_preserves_outputs() {
    let g = small_graph();
    let store = randomized_store(&g, 11);
    let (fg, fstore) = g.fold_batchnorm(&store).unwrap();
    assert!(fg.nodes().iter().all(|n| !matches!(n.op, OpKind::BatchNorm(_))));
    assert!(fg.check_manifest(&fstore).is_empty());
    let p: ParamMap<f32> = store.to_params().unwrap();
    let fp: ParamMap<f32> = fstore.to_params().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Arc::new(Tensor4::<f32>::randn(Shape4::new(1, 2, 6, 6), 1.0, &mut rng));
    let a = run(&g, &mut Eager::new(&p), x.clone()).unwrap();
    let b = run(&fg, &mut Eager::new(&fp), x).unwrap();
    for (k, v) in &a {
        assert!(crate::tensor::max_rel_err(v, &b[k]) < 1e-5, "{k}");
    }
}
