use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use hardnet_mseg::analyzer::{bench, summarize};
use hardnet_mseg::autodiff::{gradcheck_suite, GRADCHECK_TOLERANCE};
use hardnet_mseg::decoder::{build_mseg, segment_image, MsegModel};
use hardnet_mseg::io::pnm::read_file;
use hardnet_mseg::io::preprocess::{binary_to_mask, image_to_prob, mask_to_tensor};
use hardnet_mseg::io::{write_mask, WeightStore};
use hardnet_mseg::metrics::{binarize, evaluate_dataset};
use hardnet_mseg::tensor::{Shape4, Tensor4};
use hardnet_mseg::train::{gen_blobs, train_toy, Policy, TrainOptions};
use hardnet_mseg::{preset, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mseg", version, about = "HarDNet-MSEG segmentation engine")]
struct Cli {
    /// Output style for results on stdout.
    #[arg(long, value_enum, default_value_t = Format::Table, global = true)]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Table,
    Json,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Cmd {
    /// Per-layer parameters, MACs and memory traffic.
    Summary {
        /// Built-in preset name or TOML file.
        #[arg(long, default_value = "hardnet68-mseg")]
        preset: String,
        #[arg(long, default_value_t = 352)]
        size: usize,
    },
    /// Segment one P6 image into a P5 mask of the same size.
    Infer {
        #[arg(long, default_value = "hardnet68-mseg")]
        preset: String,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Network input side length.
        #[arg(long, default_value_t = 352)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        thresh: f64,
    },
    /// Score P5 probability maps against P5 masks with matching file names.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        thresh: f64,
        /// Also write the JSON report here.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Forward-pass latency on a random input.
    Bench {
        #[arg(long, default_value = "hardnet68-mseg")]
        preset: String,
        /// Random weights from `--seed` when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 352)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train on synthetic blobs and report held-out metrics.
    TrainToy {
        #[arg(long, default_value = "adam")]
        policy: String,
        /// `tiny` or `small`.
        #[arg(long, default_value = "tiny")]
        scale: String,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        /// Image side length.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        /// Overrides the policy's learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Trained weights (MSEG-W1).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Curves and report as JSON.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            msg: e.to_string(),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Node { source, .. } => exit_code(source),
        Error::NonFinite { .. } | Error::Diverged { .. } => EXIT_NUMERIC,
        Error::Invalid { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: msg.into(),
    }
}

fn data(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_DATA,
        msg: msg.into(),
    }
}

/// Collects stdout text (table) or a JSON document.
struct Out {
    format: Format,
    doc: serde_json::Map<String, Value>,
}

impl Out {
    fn new(format: Format, config: &Cmd) -> Self {
        let cfg = serde_json::to_value(config).expect("config serializes");
        if let Format::Table = format {
            println!("# config");
            if let Value::Object(m) = &cfg {
                for (k, v) in m {
                    println!("#   {k} = {v}");
                }
            }
        }
        let mut doc = serde_json::Map::new();
        doc.insert("config".into(), cfg);
        Out { format, doc }
    }

    fn emit(&mut self, key: &str, value: Value, table: impl FnOnce() -> String) {
        match self.format {
            Format::Table => print!("{}", table()),
            Format::Json => {
                self.doc.insert(key.into(), value);
            }
        }
    }

    fn finish(self) {
        if let Format::Json = self.format {
            println!(
                "{}",
                serde_json::to_string_pretty(&Value::Object(self.doc)).expect("json")
            );
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("result serializes")
}

fn model(preset_name: &str) -> Result<MsegModel, Failure> {
    let cfg = preset::load(preset_name)?;
    Ok(build_mseg(&cfg)?)
}

fn load_weights(model: &MsegModel, path: &Path) -> Result<WeightStore, Failure> {
    let store = WeightStore::read_file(path)
        .map_err(|e| data(format!("{}: {e}", path.display())))?;
    let diff = model.graph.check_manifest(&store);
    if !diff.is_empty() {
        return Err(data(format!(
            "{} does not match preset `{}`: {}",
            path.display(),
            model.cfg.name,
            diff.join("; ")
        )));
    }
    Ok(store)
}

fn check_size(size: usize) -> Result<(), Failure> {
    if size < 64 {
        return Err(usage(format!("--size must be ≥ 64, got {size}")));
    }
    Ok(())
}

fn check_thresh(t: f64) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&t) {
        return Err(usage(format!("--thresh must lie in [0, 1], got {t}")));
    }
    Ok(())
}

fn pgm_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    let rd = std::fs::read_dir(dir).map_err(|e| data(format!("{}: {e}", dir.display())))?;
    let mut v = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| data(e.to_string()))?.path();
        if p.extension().is_some_and(|e| e == "pgm") {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            v.push((id, p));
        }
    }
    v.sort();
    Ok(v)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut out = Out::new(cli.format, &cli.cmd);
    match &cli.cmd {
        Cmd::Summary { preset, size } => {
            check_size(*size)?;
            let m = model(preset)?;
            let s = summarize(&m.graph, Shape4::new(1, 3, *size, *size))?;
            out.emit("summary", to_value(&s), || s.to_table());
        }
        Cmd::Infer {
            preset,
            weights,
            input,
            out: out_path,
            size,
            thresh,
        } => {
            check_size(*size)?;
            check_thresh(*thresh)?;
            let m = model(preset)?;
            let store = load_weights(&m, weights)?;
            let img = read_file(input).map_err(|e| data(format!("{}: {e}", input.display())))?;
            let (graph, folded) = m.graph.fold_batchnorm(&store)?;
            let folded_model = MsegModel {
                cfg: m.cfg.clone(),
                graph,
            };
            let params = folded_model.params::<f32>(&folded)?;
            let t = Instant::now();
            let prob = segment_image(&folded_model, &params, &img, *size)?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            let bin = binarize(&prob, *thresh)?;
            std::fs::write(out_path, write_mask(&binary_to_mask(&bin)))
                .map_err(|e| data(format!("{}: {e}", out_path.display())))?;
            let d = prob.data();
            let (lo, hi) = d.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
            let fg = bin.data().iter().filter(|&&v| v > 0.5).count() as f64 / d.len() as f64;
            let stats = json!({
                "width": img.width, "height": img.height,
                "prob_min": lo, "prob_mean": mean, "prob_max": hi,
                "foreground_fraction": fg, "segment_ms": ms,
                "mask": out_path.display().to_string(),
            });
            out.emit("infer", stats, || {
                format!(
                    "mask {}x{} -> {}\nprob min {lo:.4} mean {mean:.4} max {hi:.4}  foreground {fg:.4}  segment {ms:.1} ms\n",
                    img.width,
                    img.height,
                    out_path.display()
                )
            });
        }
        Cmd::Eval {
            pred,
            gt,
            thresh,
            json_out,
        } => {
            check_thresh(*thresh)?;
            let load = |files: Vec<(String, PathBuf)>, as_mask: bool| {
                files
                    .into_iter()
                    .map(|(id, p)| {
                        let img = read_file(&p).map_err(|e| data(format!("{}: {e}", p.display())))?;
                        let t: Tensor4<f32> = if as_mask {
                            mask_to_tensor(&img)
                        } else {
                            image_to_prob(&img)
                        };
                        Ok((id, t))
                    })
                    .collect::<Result<Vec<_>, Failure>>()
            };
            let preds = load(pgm_files(pred)?, false)?;
            let gts = load(pgm_files(gt)?, true)?;
            if gts.is_empty() {
                return Err(data(format!("no .pgm masks in {}", gt.display())));
            }
            let report = evaluate_dataset(&preds, &gts, *thresh)?;
            if let Some(p) = json_out {
                std::fs::write(p, report.to_json())
                    .map_err(|e| data(format!("{}: {e}", p.display())))?;
            }
            out.emit("report", to_value(&report), || report.to_table());
        }
        Cmd::Bench {
            preset,
            weights,
            size,
            warmup,
            iters,
            threads,
            seed,
        } => {
            check_size(*size)?;
            let m = model(preset)?;
            let store = match weights {
                Some(p) => load_weights(&m, p)?,
                None => m.init_weights(*seed),
            };
            let r = bench(
                &m,
                &store,
                Shape4::new(1, 3, *size, *size),
                *warmup,
                *iters,
                *threads,
                *seed,
            )?;
            out.emit("bench", to_value(&r), || r.to_table());
        }
        Cmd::Gradcheck { seed } => {
            let results = gradcheck_suite(*seed)?;
            let failed = results.iter().filter(|r| !r.passed).count();
            out.emit("gradcheck", to_value(&results), || {
                let mut s = String::new();
                for r in &results {
                    s += &format!(
                        "{:<28} {:>10.3e} {:>7} {}\n",
                        r.name,
                        r.max_rel_err,
                        r.checked,
                        if r.passed { "pass" } else { "FAIL" }
                    );
                }
                s + &format!(
                    "{} of {} passed at rel err < {GRADCHECK_TOLERANCE:e}\n",
                    results.len() - failed,
                    results.len()
                )
            });
            out.finish();
            if failed > 0 {
                return Err(Failure {
                    code: EXIT_NUMERIC,
                    msg: format!("{failed} gradient check(s) failed"),
                });
            }
            return Ok(());
        }
        Cmd::TrainToy {
            policy,
            scale,
            samples,
            size,
            epochs,
            batch_size,
            lr,
            seed,
            out: weights_out,
            json_out,
        } => {
            let policy = Policy::parse(policy).map_err(|e| usage(e.to_string()))?;
            if !matches!(scale.as_str(), "tiny" | "small") {
                return Err(usage(format!("--scale must be tiny or small, got `{scale}`")));
            }
            check_size(*size)?;
            let m = model(scale)?;
            let data_set = gen_blobs(*seed, *samples, *size)?;
            let init = m.init_weights(*seed);
            let mut opts = TrainOptions::new(policy);
            opts.epochs = *epochs;
            opts.batch_size = *batch_size;
            opts.lr = *lr;
            opts.seed = *seed;
            let table = matches!(out.format, Format::Table);
            let (w, report) = train_toy(&m, &init, &data_set, &opts, |e, l| {
                if table {
                    println!("epoch {:>3}  loss {l:.5}", e + 1);
                }
            })?;
            if let Some(p) = weights_out {
                w.write_file(p).map_err(|e| data(format!("{}: {e}", p.display())))?;
            }
            if let Some(p) = json_out {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(p, text).map_err(|e| data(format!("{}: {e}", p.display())))?;
            }
            out.emit("train", to_value(&report), || {
                format!(
                    "{} lr {} steps {} train {} held-out {}\n{}",
                    report.policy.name(),
                    report.learning_rate,
                    report.steps,
                    report.train_samples,
                    report.held_out_samples,
                    report.held_out.to_table()
                )
            });
        }
    }
    out.finish();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
