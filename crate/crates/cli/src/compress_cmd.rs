//! `cadm compress`: load a baseline model, run progressive ADMM pruning (and
//! optional quantization) per a JSON config, write the compressed model and
//! an iteration-history CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use cadm_core::compress::{
    admm_compress, export_compressed, masked_retrain, net_from_graph, progressive_compress,
    AdmmSchedule, ConstraintSpec, HistoryEntry, PruneSpec, QuantSpec, SgdOptions,
};
use cadm_core::model::{load_model, save_model};
use cadm_core::{Error, Result};

use crate::util;
use crate::DatasetArgs;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressConfig {
    /// Progressive pruning stages, tightest last.
    pub stages: Vec<StageConfig>,
    /// Quantize after pruning when set (2..=8 bits).
    #[serde(default)]
    pub quant_bits: Option<u8>,
    #[serde(default = "d_rho0")]
    pub rho0: f32,
    #[serde(default = "d_rho_factor")]
    pub rho_factor: f32,
    #[serde(default = "d_rho_stages")]
    pub rho_stages: usize,
    #[serde(default = "d_one")]
    pub iters_per_stage: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_retrain")]
    pub retrain_epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f32,
    #[serde(default = "d_momentum")]
    pub momentum: f32,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Explicit per-layer retain counts; mutually exclusive with keep_fraction.
    #[serde(default)]
    pub retain_k: Option<Vec<usize>>,
    /// Uniform nonzero fraction across layers.
    #[serde(default)]
    pub keep_fraction: Option<f32>,
}

fn d_rho0() -> f32 {
    1e-3
}
fn d_rho_factor() -> f32 {
    10.0
}
fn d_rho_stages() -> usize {
    3
}
fn d_one() -> usize {
    1
}
fn d_epochs() -> usize {
    5
}
fn d_retrain() -> usize {
    4
}
fn d_lr() -> f32 {
    0.05
}
fn d_momentum() -> f32 {
    0.9
}
fn d_batch() -> usize {
    64
}

pub fn run(
    model: &Path,
    config: &Path,
    data: &DatasetArgs,
    seed_override: Option<u64>,
    output: &Path,
    history_path: Option<&Path>,
) -> Result<()> {
    let text = fs::read_to_string(config)?;
    let mut cfg: CompressConfig = serde_json::from_str(&text)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    if cfg.stages.is_empty() && cfg.quant_bits.is_none() {
        return Err(Error::Parameter("config has neither stages nor quant_bits".into()));
    }

    let (train, test) = util::load_datasets(data)?;
    let graph = load_model(model)?;
    let mut net = net_from_graph(&graph, 10)?;

    let schedule = AdmmSchedule {
        rho0: cfg.rho0,
        rho_factor: cfg.rho_factor,
        stages: cfg.rho_stages,
        iters_per_stage: cfg.iters_per_stage,
        epochs: cfg.epochs,
        sgd: SgdOptions { lr: cfg.lr, momentum: cfg.momentum, batch: cfg.batch },
        seed: cfg.seed,
    };

    let stages: Vec<PruneSpec> = cfg
        .stages
        .iter()
        .map(|s| match (&s.retain_k, s.keep_fraction) {
            (Some(k), None) => Ok(PruneSpec { retain_k: k.clone() }),
            (None, Some(f)) => PruneSpec::uniform(&net, f),
            _ => Err(Error::Parameter(
                "each stage needs exactly one of retain_k or keep_fraction".into(),
            )),
        })
        .collect::<Result<_>>()?;

    let mut history: Vec<HistoryEntry> = Vec::new();
    let final_spec = stages.last().cloned();
    if !stages.is_empty() {
        let per_stage = progressive_compress(
            &mut net,
            &stages,
            &train,
            &schedule,
            cfg.retrain_epochs,
            Some(&test),
        )?;
        for h in per_stage {
            history.extend(h);
        }
    }

    if let Some(bits) = cfg.quant_bits {
        let spec = ConstraintSpec::Quant(QuantSpec::uniform(&net, bits)?);
        let (state, h) = admm_compress(&mut net, &spec, &train, &schedule, Some(&test))?;
        masked_retrain(&mut net, &state, &spec, &train, cfg.retrain_epochs, &schedule.sgd, cfg.seed)?;
        history.extend(h);
    }

    let acc = cadm_core::compress::accuracy(&net, &test)?;
    let compressed = export_compressed(&net, final_spec.as_ref())?;
    save_model(&compressed, output)?;

    if let Some(path) = history_path {
        let mut f = fs::File::create(path)?;
        writeln!(f, "iteration,loss,residual,accuracy")?;
        for (i, e) in history.iter().enumerate() {
            let acc = e.accuracy.map(|a| format!("{:.4}", a)).unwrap_or_default();
            writeln!(f, "{},{:.6},{:.6},{}", i, e.loss, e.residual, acc)?;
        }
    }

    println!("accuracy\t{:.4}", acc);
    println!(
        "nonzeros\t{}/{}",
        net.nonzero_weight_count(),
        net.param_count()
    );
    println!("model\t{}", output.display());
    Ok(())
}
