//! cadm: train, compress, tune, infer, and benchmark compressed models.
//! Data goes to stdout or files; diagnostics go to stderr; exit code 0 only
//! on success.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod bench;
mod compress_cmd;
mod util;

use cadm_core::autotune::{graph_shape_keys, tune_layer, KernelId, ShapeKey, TuneCache, TunerOptions};
use cadm_core::compress::{export_compressed, train_dense, SgdOptions, TrainableNet};
use cadm_core::engine::{execute_graph, execute_graph_profiled, ExecOptions};
use cadm_core::mnist::load_single_image;
use cadm_core::model::{load_model, save_model};
use cadm_core::tensor::{Layout, Tensor};
use cadm_core::Error;

#[derive(Parser)]
#[command(name = "cadm", about = "Compressed-DNN toolchain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DatasetArgs {
    /// Training images (IDX format)
    #[arg(long)]
    train_images: PathBuf,
    /// Training labels (IDX format)
    #[arg(long)]
    train_labels: PathBuf,
    /// Held-out images (IDX format)
    #[arg(long)]
    test_images: PathBuf,
    /// Held-out labels (IDX format)
    #[arg(long)]
    test_labels: PathBuf,
    /// Use only the first N training samples
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense lenet_300_100 baseline and write it as a CADM model
    Train {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f32,
        #[arg(long, default_value_t = 0.9)]
        momentum: f32,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output model path
        #[arg(long)]
        output: PathBuf,
    },
    /// ADMM-compress a trained model per a JSON config
    Compress {
        /// Baseline CADM model
        #[arg(long)]
        model: PathBuf,
        /// Compression config (JSON)
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DatasetArgs,
        /// Overrides the seed in the config
        #[arg(long)]
        seed: Option<u64>,
        /// Output model path
        #[arg(long)]
        output: PathBuf,
        /// History CSV path (iteration,loss,residual,accuracy)
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Tune kernel configs for a model's shapes (or one explicit shape)
    Tune {
        /// Tune every kernel shape this model dispatches
        #[arg(long, conflicts_with = "shape")]
        model: Option<PathBuf>,
        /// Explicit shape M,N,K
        #[arg(long, value_parser = parse_shape)]
        shape: Option<(usize, usize, usize)>,
        /// Weight sparsity for --shape (selects the SpMM kernel when > 0)
        #[arg(long, default_value_t = 0.0)]
        sparsity: f64,
        /// Tune cache JSON, updated in place
        #[arg(long)]
        tune_cache: PathBuf,
        /// Max candidates measured per shape
        #[arg(long, default_value_t = 64)]
        budget: usize,
        /// Timing repeats per candidate (median is kept)
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Run one image through a model and print the predicted class
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// IDX image file
        #[arg(long)]
        input: PathBuf,
        /// Image index within the IDX file
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        tune_cache: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Print per-layer profile rows to stderr
        #[arg(long)]
        profile: bool,
    },
    /// Benchmark {dense,sparse} x {unfused,fused} x {default,tuned}
    Bench {
        /// CADM model to benchmark
        #[arg(long, conflicts_with = "reference")]
        model: Option<PathBuf>,
        /// Reference model name (mobilenet_v1, lenet5, lenet_300_100)
        #[arg(long)]
        reference: Option<String>,
        /// Timed runs per variant (median is reported)
        #[arg(long, default_value_t = 7)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Tune cache JSON; created or updated for the tuned variants
        #[arg(long)]
        tune_cache: Option<PathBuf>,
        /// Weight fraction retained when deriving the sparse variant
        #[arg(long, default_value_t = 0.1)]
        sparsify: f64,
        /// Max candidates measured per shape while tuning
        #[arg(long, default_value_t = 32)]
        budget: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("shape must be M,N,K".into());
    }
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    Ok((dims[0], dims[1], dims[2]))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> cadm_core::Result<()> {
    match cmd {
        Command::Train { data, epochs, lr, momentum, batch, seed, output } => {
            let (train, test) = util::load_datasets(&data)?;
            let mut net = TrainableNet::lenet_300_100(seed);
            let opts = SgdOptions { lr, momentum, batch };
            let acc = train_dense(&mut net, &train, &test, epochs, &opts, seed)?;
            let graph = export_compressed(&net, None)?;
            save_model(&graph, &output)?;
            println!("accuracy\t{:.4}", acc);
            println!("model\t{}", output.display());
            Ok(())
        }
        Command::Compress { model, config, data, seed, output, history } => {
            compress_cmd::run(&model, &config, &data, seed, &output, history.as_deref())
        }
        Command::Tune { model, shape, sparsity, tune_cache, budget, repeats } => {
            let mut cache = if tune_cache.exists() {
                TuneCache::load(&tune_cache)?
            } else {
                TuneCache::default()
            };
            let keys: Vec<ShapeKey> = match (model, shape) {
                (Some(path), None) => graph_shape_keys(&load_model(&path)?)?,
                (None, Some((m, n, k))) => {
                    let kind = if sparsity > 0.0 { KernelId::SpmmCsr } else { KernelId::GemmDense };
                    vec![ShapeKey {
                        kind,
                        m,
                        n,
                        k,
                        sparsity_bucket: cadm_core::autotune::bucket_of(sparsity),
                    }]
                }
                _ => {
                    return Err(Error::Parameter(
                        "tune needs exactly one of --model or --shape".into(),
                    ))
                }
            };
            let opts = TunerOptions { repeats, ..TunerOptions::default() };
            for key in &keys {
                let cfg = tune_layer(key, budget, &mut cache, &opts)?;
                eprintln!(
                    "tuned {:?} {}x{}x{} bucket {} -> tiles {}/{}/{} unroll {} order {}",
                    key.kind, key.m, key.n, key.k, key.sparsity_bucket,
                    cfg.tile_m, cfg.tile_n, cfg.tile_k, cfg.unroll, cfg.loop_order.as_str()
                );
            }
            cache.save(&tune_cache)?;
            println!("cache\t{}\t{} entries", tune_cache.display(), cache.len());
            Ok(())
        }
        Command::Infer { model, input, index, tune_cache, threads, profile } => {
            let graph = load_model(&model)?;
            let cache = tune_cache.map(|p| TuneCache::load(&p)).transpose()?;
            let dims = util::graph_input_dims(&graph)?;
            let pixels = load_single_image(&input, index)?;
            let x = Tensor::new(dims, Layout::Nchw, pixels)?;
            let opts = ExecOptions { workers: threads, profile };
            let logits = if profile {
                let (out, rows) = execute_graph_profiled(&graph, &x, cache.as_ref(), &opts)?;
                eprintln!("node\tkind\tmicros\tweight_loads");
                for r in &rows {
                    eprintln!("{}", r.to_line());
                }
                out
            } else {
                execute_graph(&graph, &x, cache.as_ref(), &opts)?
            };
            let class = logits
                .data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            println!("class\t{}", class);
            Ok(())
        }
        Command::Bench {
            model,
            reference,
            runs,
            threads,
            tune_cache,
            sparsify,
            budget,
            seed,
        } => {
            let graph = match (model, reference) {
                (Some(path), None) => load_model(&path)?,
                (None, Some(name)) => cadm_core::reference::build_reference_graph(
                    cadm_core::reference::ReferenceModel::parse(&name)?,
                )?,
                _ => {
                    return Err(Error::Parameter(
                        "bench needs exactly one of --model or --reference".into(),
                    ))
                }
            };
            bench::run(&graph, runs, threads, tune_cache.as_deref(), sparsify, budget, seed)
        }
    }
}
