//! Acceptance suite: one PASS/FAIL line per criterion, SKIP for checks that
//! need external data. Exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hardnet_mseg::analyzer::{bench, hardblock_concat_traffic, summarize};
use hardnet_mseg::autodiff::{gradcheck_suite, GRADCHECK_TOLERANCE};
use hardnet_mseg::decoder::{build_mseg, segment_image, MsegModel};
use hardnet_mseg::graph::{run, Eager};
use hardnet_mseg::hardnet::{hard_links, hardblock_graph, ConvStyle, HarDBlockCfg};
use hardnet_mseg::io::pnm::read_file;
use hardnet_mseg::io::preprocess::mask_to_tensor;
use hardnet_mseg::io::{StoredTensor, WeightStore};
use hardnet_mseg::metrics::{evaluate_dataset, scalar_metrics, ConfusionCounts};
use hardnet_mseg::tensor::{conv2d, conv2d_naive, max_rel_err, Activation, ConvSpec, Shape4, Tensor4};
use hardnet_mseg::train::{gen_blobs, memorize, train_toy, Policy, TrainOptions};
use hardnet_mseg::preset;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(t: Duration, limit_s: u64, detail: String) -> Outcome {
    check(
        t <= Duration::from_secs(limit_s),
        format!("{detail}; {:.1} s (limit {limit_s} s)", t.as_secs_f64()),
    )
}

fn conv_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 200 {
        let groups = [1, 1, 1, 2, 3][rng.random_range(0..5)];
        let cin = groups * rng.random_range(1..=4);
        let cout = groups * rng.random_range(1..=4);
        let (kh, kw) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let spec = ConvSpec::new(cin, cout, 1)
            .kernel2(kh, kw)
            .stride(rng.random_range(1..=3))
            .padding2(rng.random_range(0..=3), rng.random_range(0..=3))
            .dilation(rng.random_range(1..=3))
            .groups(groups)
            .bias(rng.random_bool(0.5));
        let xs = Shape4::new(rng.random_range(1..=2), cin, rng.random_range(3..=20), rng.random_range(3..=20));
        if spec.output_shape(xs).is_err() {
            continue;
        }
        let x = Tensor4::<f32>::randn(xs, 1.0, &mut rng);
        let w = Tensor4::<f32>::randn(spec.weight_shape(), 1.0, &mut rng);
        let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = spec.has_bias.then_some(&b[..]);
        let fast = conv2d(&x, &w, bias, &spec).map_err(|e| e.to_string())?;
        let slow = conv2d_naive(&x, &w, bias, &spec).map_err(|e| e.to_string())?;
        worst = worst.max(max_rel_err(&fast, &slow));
        cases += 1;
    }
    let ok = worst < 1e-5;
    within(t.elapsed(), 60, format!("{cases} cases, max rel err {worst:.2e} (< 1e-5)"))
        .and_then(|d| check(ok, d))
}

fn gradcheck() -> Outcome {
    let t = Instant::now();
    let results = gradcheck_suite(7).map_err(|e| e.to_string())?;
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let required = [
        "conv", "batchnorm", "relu", "relu6", "sigmoid", "maxpool", "resize", "mul", "add",
        "concat", "seg_loss", "rfb_composite", "aggregation_composite",
    ];
    let missing: Vec<_> = required
        .iter()
        .filter(|k| !results.iter().any(|r| r.name.starts_with(*k)))
        .collect();
    let d = format!(
        "{} cases, max rel err {worst:.2e} (< {GRADCHECK_TOLERANCE:e}), failed {failed:?}, uncovered {missing:?}",
        results.len()
    );
    within(t.elapsed(), 120, d).and_then(|d| check(failed.is_empty() && missing.is_empty(), d))
}

fn hardblock_links() -> Outcome {
    let mut mismatches = 0;
    let mut checked = 0;
    for k in [8, 14, 16] {
        for m in [1.6, 1.7] {
            for l in 1..=64usize {
                let (links, width) = hard_links(l, k, m).map_err(|e| e.to_string())?;
                let brute: Vec<usize> = (0..l)
                    .filter(|&j| {
                        let d = l - j;
                        d.is_power_of_two() && l % d == 0
                    })
                    .collect();
                let mut v = 0;
                while l % (1 << (v + 1)) == 0 {
                    v += 1;
                }
                let t = (k as f64 * m.powi(v)).floor() as usize;
                let brute_w = if t % 2 == 1 { t + 1 } else { t };
                if links != brute || width != brute_w {
                    mismatches += 1;
                }
                checked += 1;
            }
            for n in 1..=64usize {
                let count = HarDBlockCfg::new(n, k, m, 32).connection_count().map_err(|e| e.to_string())?;
                let expect: usize = (1..=n).map(|l| l.trailing_zeros() as usize + 1).sum();
                if count != expect {
                    mismatches += 1;
                }
                checked += 1;
            }
        }
    }
    check(mismatches == 0, format!("{checked} link sets and block counts, {mismatches} mismatches"))
}

fn shape_contract() -> Outcome {
    let model = build_mseg(&preset::builtin("hardnet68-mseg").map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let params = model.params::<f32>(&model.init_weights(5)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut notes = Vec::new();
    let mut ok = true;
    for h in [256, 312, 352, 512] {
        let x = Tensor4::<f32>::randn(Shape4::new(1, 3, h, h), 1.0, &mut rng);
        let outs = run(&model.graph, &mut Eager::new(&params), std::sync::Arc::new(x))
            .map_err(|e| e.to_string())?;
        let prob = outs["prob"].shape();
        ok &= prob == Shape4::new(1, 1, h, h);
        if h % 32 == 0 {
            for (tap, s) in [("f8", 8), ("f16", 16), ("f32", 32)] {
                let ts = outs[tap].shape();
                ok &= (ts.h, ts.w) == (h / s, h / s);
            }
        }
        notes.push(format!("{h}->{prob}"));
    }
    check(ok, notes.join(", "))
}

fn metric_formulas() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut identity = 0.0f64;
    for i in 0..1000 {
        // a few degenerate sets, then random ones
        let c = match i {
            0 => ConfusionCounts::new(0, 0, 0, 100),
            1 => ConfusionCounts::new(0, 5, 0, 10),
            2 => ConfusionCounts::new(0, 0, 7, 10),
            3 => ConfusionCounts::new(9, 0, 0, 0),
            _ => ConfusionCounts::new(
                rng.random_range(0..5000),
                rng.random_range(0..5000),
                rng.random_range(0..5000),
                rng.random_range(0..50000),
            ),
        };
        let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
        let empty = c.tp + c.fp + c.fn_ == 0;
        let div = |a: f64, b: f64| if b == 0.0 { if empty { 1.0 } else { 0.0 } } else { a / b };
        let p = div(tp, tp + fp);
        let r = div(tp, tp + fn_);
        let want = [
            div(2.0 * tp, 2.0 * tp + fp + fn_),
            div(tp, tp + fp + fn_),
            p,
            r,
            div(5.0 * p * r, 4.0 * p + r),
            div(tp + tn, tp + tn + fp + fn_),
        ];
        let m = scalar_metrics(&c);
        let got = [m.dice, m.iou, m.precision, m.recall, m.f2, m.accuracy];
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        identity = identity.max((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs());
    }
    check(
        worst <= 1e-12 && identity <= 1e-12,
        format!("1000 count sets, max abs diff {worst:.1e}, dice/iou identity residual {identity:.1e}"),
    )
}

fn analyzer_consistency() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for name in preset::PRESET_NAMES {
        let model = build_mseg(&preset::builtin(name).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let store = model.init_weights(1);
        let s = summarize(&model.graph, Shape4::new(1, 3, 256, 256)).map_err(|e| e.to_string())?;
        ok &= s.totals.params == store.element_count() as u64;
        let (folded_graph, folded) = model.graph.fold_batchnorm(&store).map_err(|e| e.to_string())?;
        let sf = summarize(&folded_graph, Shape4::new(1, 3, 256, 256)).map_err(|e| e.to_string())?;
        ok &= sf.totals.params == folded.element_count() as u64;
        notes.push(format!("{name} {} / folded {}", s.totals.params, sf.totals.params));
    }
    let style = ConvStyle {
        norm: true,
        bn_eps: 1e-5,
        activation: Some(Activation::Relu6),
    };
    for cfg in [HarDBlockCfg::new(16, 20, 1.7, 320), HarDBlockCfg::new(8, 14, 1.6, 64).dense()] {
        let (g, _) = hardblock_graph(&cfg, style).map_err(|e| e.to_string())?;
        let s = summarize(&g, Shape4::new(1, cfg.base_ch, 16, 16)).map_err(|e| e.to_string())?;
        ok &= s.totals.params == g.init_params(0).element_count() as u64;
    }
    check(ok, notes.join(", ") + "; plus 2 standalone blocks")
}

fn sparse_vs_dense() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (n, k, base) in [(8, 14, 64), (16, 16, 128)] {
        let cfg = HarDBlockCfg::new(n, k, 1.7, base);
        let sparse = hardblock_concat_traffic(&cfg, 56).map_err(|e| e.to_string())?;
        let dense = hardblock_concat_traffic(&cfg.dense(), 56).map_err(|e| e.to_string())?;
        ok &= sparse < dense;
        notes.push(format!("n={n}: {sparse} < {dense} bytes ({:.2}x)", dense as f64 / sparse as f64));
    }
    check(ok, notes.join(", "))
}

fn toy_training() -> Outcome {
    const SEED: u64 = 11;
    let t = Instant::now();
    let model = build_mseg(&preset::builtin("tiny").map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let init = model.init_weights(SEED);
    let data = gen_blobs(SEED, 500, 64).map_err(|e| e.to_string())?;
    let mut opts = TrainOptions::new(Policy::AdamPolicy);
    opts.epochs = 30;
    opts.seed = SEED;
    let (_, report) = train_toy(&model, &init, &data, &opts, |_, _| {}).map_err(|e| e.to_string())?;
    let mdice = report.held_out.aggregate.mdice;
    let mem = memorize(&model, &init, &data.samples[0], 200, Policy::AdamPolicy.optim(), 1e-3)
        .map_err(|e| e.to_string())?;
    let d = format!(
        "held-out mDice {mdice:.4} (>= 0.90) after {} epochs; single-sample Dice {:.4} (>= 0.99) after 200 steps",
        report.epochs, mem.dice
    );
    within(t.elapsed(), 900, d).and_then(|d| check(mdice >= 0.90 && mem.dice >= 0.99, d))
}

fn bench_property() -> Outcome {
    let model = build_mseg(&preset::builtin("hardnet68-mseg").map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let w = model.init_weights(3);
    let mut medians = Vec::new();
    let mut ok = true;
    for h in [256, 512] {
        let r = bench(&model, &w, Shape4::new(1, 3, h, h), 1, 10, 1, 3).map_err(|e| e.to_string())?;
        ok &= r.latencies_ms.len() >= 10
            && r.measured_iters == r.latencies_ms.len()
            && r.latencies_ms.iter().all(|v| v.is_finite() && *v > 0.0)
            && r.p95_ms >= r.median_ms
            && r.fps > 0.0
            && !r.platform.is_empty();
        medians.push(r.median_ms);
    }
    check(
        ok && medians[0] < medians[1],
        format!("median {:.1} ms @256 < {:.1} ms @512, 10 samples each", medians[0], medians[1]),
    )
}

fn weights_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let specials = [0.0f32, -0.0, f32::INFINITY, f32::NEG_INFINITY, f32::MIN_POSITIVE / 4.0, f32::MAX];
    let mut bad = 0;
    for case in 0..100 {
        let mut store = WeightStore::new();
        for t in 0..rng.random_range(0..8) {
            let rank = rng.random_range(1..=4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=5)).collect();
            let n = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|_| match rng.random_range(0..10) {
                    0 => specials[rng.random_range(0..specials.len())],
                    1 => f32::from_bits(0x7fc0_0000 | rng.random_range(0..0x3f_ffff)),
                    _ => f32::from_bits(rng.random()),
                })
                .collect();
            let name = format!("case{case}.t{t}.{}", "x".repeat(rng.random_range(0..20)));
            store.insert(name, StoredTensor::new(shape, data).map_err(|e| e.to_string())?);
        }
        let bytes = store.to_bytes();
        let back = WeightStore::from_bytes(&bytes).map_err(|e| e.to_string())?;
        let same = back.len() == store.len()
            && store.iter().zip(back.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape == b.shape
                    && a.data.iter().map(|v| v.to_bits()).eq(b.data.iter().map(|v| v.to_bits()))
            })
            && back.to_bytes() == bytes;
        bad += usize::from(!same);
    }
    check(bad == 0, format!("100 random stores, {bad} not bit-exact"))
}

/// Images `images/*.ppm` with masks `masks/*.pgm` of the same stem.
fn kvasir_eval(dir: &Path, weights: &Path, preset_name: &str) -> Result<(f64, f64, f64), String> {
    let cfg = preset::load(preset_name).map_err(|e| e.to_string())?;
    let model: MsegModel = build_mseg(&cfg).map_err(|e| e.to_string())?;
    let store = WeightStore::read_file(weights).map_err(|e| e.to_string())?;
    let diff = model.graph.check_manifest(&store);
    if !diff.is_empty() {
        return Err(format!("weights do not match preset: {}", diff.join("; ")));
    }
    let params = model.params::<f32>(&store).map_err(|e| e.to_string())?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir.join("images"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    entries.sort();
    for p in entries {
        let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let img = read_file(&p).map_err(|e| e.to_string())?;
        let gt = read_file(dir.join("masks").join(format!("{id}.pgm"))).map_err(|e| e.to_string())?;
        preds.push((id.clone(), segment_image(&model, &params, &img, 352).map_err(|e| e.to_string())?));
        gts.push((id, mask_to_tensor(&gt)));
    }
    let r = evaluate_dataset(&preds, &gts, 0.5).map_err(|e| e.to_string())?;
    Ok((r.aggregate.mdice, r.aggregate.miou, r.aggregate.mae))
}

fn asset_gated(name: &str, weights_var: &str, targets: &[(&str, f64, f64)]) -> Option<Outcome> {
    let dir = std::env::var_os("MSEG_KVASIR_DIR")?;
    let weights = std::env::var_os(weights_var)?;
    let preset_name = std::env::var("MSEG_PRESET").unwrap_or_else(|_| "hardnet68-mseg".into());
    Some((|| {
        let (mdice, miou, mae) = kvasir_eval(Path::new(&dir), Path::new(&weights), &preset_name)?;
        let mut ok = true;
        let mut notes = Vec::new();
        for &(metric, target, tol) in targets {
            let v = match metric {
                "mdice" => mdice,
                "miou" => miou,
                _ => mae,
            };
            ok &= (v - target).abs() <= tol;
            notes.push(format!("{metric} {v:.4} (target {target} ± {tol})"));
        }
        check(ok, format!("{name}: {}", notes.join(", ")))
    })())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("conv oracle", conv_oracle),
        ("gradcheck suite", gradcheck),
        ("hardblock connectivity", hardblock_links),
        ("shape contract", shape_contract),
        ("metric formulas", metric_formulas),
        ("analyzer consistency", analyzer_consistency),
        ("sparse vs dense traffic", sparse_vs_dense),
        ("toy training", toy_training),
        ("bench property", bench_property),
        ("MSEG-W1 round trip", weights_round_trip),
    ];
    let mut failed = 0;
    let mut gated_failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS [{:>2}] {name}: {d} ({secs:.1} s)", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {d} ({secs:.1} s)", i + 1);
            }
        }
    }
    let gated = [
        (
            "kvasir 880/120 split",
            "MSEG_WEIGHTS",
            vec![("mdice", 0.904, 0.02), ("miou", 0.848, 0.02)],
        ),
        (
            "kvasir with PraNet-split weights",
            "MSEG_PRANET_WEIGHTS",
            vec![("mdice", 0.912, 0.02), ("mae", 0.025, 0.01)],
        ),
    ];
    for (name, var, targets) in gated {
        match asset_gated(name, var, &targets) {
            None => println!("SKIP [--] {name}: set MSEG_KVASIR_DIR and {var} to run"),
            Some(Ok(d)) => println!("PASS [--] {d}"),
            Some(Err(d)) => {
                gated_failed += 1;
                println!("FAIL [--] {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed + gated_failed > 0 {
        std::process::exit(1);
    }
}
