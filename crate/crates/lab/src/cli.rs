//! Command-line harness.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use seqens_core::analysis::{four_case_table, parameter_similarity_matrix, prediction_similarity_matrix};
use seqens_core::calibration::{calibrated_combine, confidence_histogram, ensemble_temperature_sweep, CalibrationConfig};
use seqens_core::data::Dataset;
use seqens_core::ensembling::{chain_final, prepare_generation, train_generalized, Chain, ChainSource, CombineStrategy};
use seqens_core::nets::{predict_chunked, Generation, PredictionBundle};
use seqens_core::training::{train_generation, ConditionSource, InitStrategy};
use seqens_core::{LabelMap, ProbabilityMap};

use crate::checkpoint::{load_checkpoint, load_generation, save_generation};
use crate::config::{EnsembleMode, RunConfig};
use crate::error::{usage, LabError, Result};
use crate::io::{read_split, write_dataset};
use crate::pnm::encode_pgm_raw;
use crate::recipes::{recipe_names, reproduce_figure};
use crate::report::*;

const CHUNK: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "seqens", version, about = "Sequential ensembles of segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset (PPM images, PGM labels, manifest.csv).
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one generation; `--condition` checkpoints supply its input maps.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Previous generations (with --chain) or a pool of first generations.
        #[arg(long, num_args = 1..)]
        condition: Vec<PathBuf>,
        /// Treat the --condition checkpoints as one chain, in order.
        #[arg(long)]
        chain: bool,
    },
    /// Metrics of each checkpoint, or of every stage of a chain.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        chain: bool,
        #[arg(long, default_value_t = 0)]
        self_loops: usize,
        #[command(flatten)]
        common: EvalArgs,
        /// Write predicted label maps here as PGM files.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Metrics of a simple (sim) or sequential (seq) ensemble.
    Ensemble {
        #[arg(long)]
        mode: EnsembleMode,
        #[arg(long, default_value = "uniform")]
        strategy: CombineStrategy,
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        self_loops: usize,
        /// Softmax temperature applied to sim members before combining.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// ECE over a temperature grid (members are averaged; --chain uses the chain output).
    Calibrate {
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4,8")]
        grid: Vec<f64>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        chain: bool,
        /// Also write correct/incorrect confidence histograms at T = 1.
        #[arg(long)]
        histogram: Option<PathBuf>,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Pairwise prediction and parameter cosine similarity.
    Diversity {
        #[arg(long, required = true, num_args = 2..)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Correctness transitions between a first and second model.
    Fourcase {
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Run a named experiment recipe and write its reports.
    Reproduce {
        #[arg(long)]
        recipe: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides applied on top of the recipe's own config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value = "run")]
    run_id: String,
    #[arg(long, default_value_t = 255)]
    ignore_label: u16,
}

impl EvalArgs {
    fn ignore(&self) -> Option<u8> {
        u8::try_from(self.ignore_label).ok()
    }
}

/// Parses `argv` (including the program name) and runs it; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{}", e);
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: {}", first);
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, out } => write_dataset(&out, &RunConfig::load(&spec)?),
        Command::Train { config, out, condition, chain } => train(&config, &out, &condition, chain),
        Command::Eval { ckpt, data, report, chain, self_loops, common, dump } => eval(&ckpt, &data, &report, chain, self_loops, &common, dump.as_deref()),
        Command::Ensemble { mode, strategy, ckpt, data, report, self_loops, temperature, common } => {
            ensemble(mode, strategy, &ckpt, &data, &report, self_loops, temperature, &common)
        }
        Command::Calibrate { ckpt, data, grid, report, bins, chain, histogram, common } => {
            calibrate(&ckpt, &data, grid, &report, bins, chain, histogram.as_deref(), &common)
        }
        Command::Diversity { ckpt, data, report, common } => diversity(&ckpt, &data, &report, &common),
        Command::Fourcase { ckpt, data, report, common } => fourcase(&ckpt, &data, &report, &common),
        Command::Reproduce { recipe, out, config } => {
            if !recipe_names().contains(&recipe.as_str()) {
                return Err(usage(format!("unknown recipe '{}' (known: {})", recipe, recipe_names().join(", "))));
            }
            let text = config.as_ref().map(|p| std::fs::read_to_string(p).map_err(LabError::io(p))).transpose()?;
            let overrides = text.as_deref().zip(config.as_deref());
            for path in reproduce_figure(&recipe, &out, overrides)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Generation>> {
    paths.iter().map(|p| load_generation(p)).collect()
}

fn train(config: &Path, out: &Path, condition: &[PathBuf], as_chain: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (train, val) = crate::io::load_splits(&cfg)?;
    let tcfg = cfg.train.clone();
    let warm = match (&tcfg.init_strategy, &tcfg.warmstart_checkpoint) {
        (InitStrategy::Warmstart, Some(p)) => {
            let ckpt = load_checkpoint(Path::new(p))?;
            Some(ckpt.tensors.into_iter().collect::<std::collections::BTreeMap<_, _>>())
        }
        (InitStrategy::Warmstart, None) => return Err(usage("train.init_strategy = warmstart needs train.warmstart_checkpoint")),
        _ => None,
    };
    let conditioners = load_all(condition)?;
    let (g, history) = if conditioners.is_empty() {
        let mut g = prepare_generation(&cfg.base_arch(), &tcfg, 0, warm.as_ref())?;
        let h = train_generation(&mut g, &train, Some(&val), &tcfg, None)?;
        (g, h)
    } else if as_chain {
        let prefix = Chain::new(conditioners, 0)?;
        let mut g = prepare_generation(&cfg.conditioned_arch(), &tcfg, prefix.len(), warm.as_ref())?;
        let source = ChainSource::new(&prefix);
        let cond: Option<&dyn ConditionSource> = g.conditioning().needs_input().then_some(&source as _);
        let h = train_generation(&mut g, &train, Some(&val), &tcfg, cond)?;
        (g, h)
    } else {
        if warm.is_some() {
            return Err(usage("warm-starting a pool-conditioned generation is not supported"));
        }
        train_generalized(&conditioners, &train, Some(&val), &tcfg, &cfg.conditioned_arch())?
    };
    std::fs::create_dir_all(out).map_err(LabError::io(out))?;
    save_generation(&out.join("model.sqen"), &g, tcfg.seed)?;
    let resolved = out.join("config.cfg");
    std::fs::write(&resolved, cfg.to_text()).map_err(LabError::io(resolved))?;
    let mut t = history_table();
    push_history(&mut t, &format!("generation{}", g.index()), &history);
    t.write(&out.join("history.csv"))
}

fn split(data: &Path, common: &EvalArgs) -> Result<Dataset> {
    match common.split.as_str() {
        "train" | "val" => read_split(data, &common.split),
        other => Err(usage(format!("unknown split '{}'", other))),
    }
}

fn chain_bundles(chain: &Chain, ds: &Dataset) -> Result<Vec<PredictionBundle>> {
    let images = ds.all_images()?;
    let mut parts: Vec<Vec<PredictionBundle>> = Vec::new();
    let n = ds.len();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let img = seqens_core::nets::slice_batch(&images, start, end)?;
        parts.push(seqens_core::ensembling::chain_predict(chain, &img)?);
        start = end;
    }
    let stages = parts.first().map_or(0, Vec::len);
    (0..stages)
        .map(|s| {
            let logits: Vec<&seqens_core::Tensor<f32>> = parts.iter().map(|p| &p[s].logits).collect();
            Ok(PredictionBundle::from_logits(seqens_core::Tensor::cat_batch(&logits)?)?)
        })
        .collect()
}

fn metrics_for(labels: &[LabelMap], ds: &Dataset, common: &EvalArgs) -> Result<seqens_core::analysis::MetricsReport> {
    Ok(seqens_core::analysis::segmentation_metrics(labels, &ds.labels(), ds.num_classes(), common.ignore())?)
}

fn eval(ckpt: &[PathBuf], data: &Path, report: &Path, as_chain: bool, self_loops: usize, common: &EvalArgs, dump: Option<&Path>) -> Result<()> {
    let ds = split(data, common)?;
    let gens = load_all(ckpt)?;
    let mut t = metrics_table(ds.num_classes());
    let mut dumps: Vec<(String, Vec<LabelMap>)> = Vec::new();
    if as_chain {
        let chain = Chain::new(gens, self_loops)?;
        let n = chain.len();
        for (i, b) in chain_bundles(&chain, &ds)?.into_iter().enumerate() {
            let member = if i < n { i.to_string() } else { format!("{}+loop{}", n - 1, i + 1 - n) };
            let key = MetricsKey { run_id: &common.run_id, mode: "seq", member: member.clone(), n: (i + 1).min(n), strategy: "none", temperature: 1.0 };
            push_metrics(&mut t, key, &metrics_for(&b.labels, &ds, common)?);
            dumps.push((member, b.labels));
        }
    } else {
        if self_loops > 0 {
            return Err(usage("--self-loops requires --chain"));
        }
        let images = ds.all_images()?;
        for (i, g) in gens.iter().enumerate() {
            if g.conditioning().needs_input() {
                return Err(usage(format!("{} is a conditioned generation; evaluate it with --chain", ckpt[i].display())));
            }
            let b = predict_chunked(g, &images, None, CHUNK)?;
            let key = MetricsKey { run_id: &common.run_id, mode: "single", member: i.to_string(), n: 1, strategy: "none", temperature: 1.0 };
            push_metrics(&mut t, key, &metrics_for(&b.labels, &ds, common)?);
            dumps.push((i.to_string(), b.labels));
        }
    }
    t.write(report)?;
    if let Some(dir) = dump {
        write_dumps(dir, &dumps, ds.num_classes())?;
    }
    Ok(())
}

/// Label maps as PGM files with gray value `class * floor(255 / (C - 1))`.
fn write_dumps(dir: &Path, dumps: &[(String, Vec<LabelMap>)], num_classes: usize) -> Result<()> {
    let scale = (255 / (num_classes.max(2) - 1)) as u8;
    for (name, maps) in dumps {
        let sub = dir.join(name.replace('+', "_"));
        std::fs::create_dir_all(&sub).map_err(LabError::io(&sub))?;
        for (i, m) in maps.iter().enumerate() {
            let px: Vec<u8> = m.data().iter().map(|&c| c.saturating_mul(scale)).collect();
            let path = sub.join(format!("{:05}.pgm", i));
            std::fs::write(&path, encode_pgm_raw(m.height(), m.width(), &px)).map_err(LabError::io(path))?;
        }
    }
    Ok(())
}

fn member_logits(gens: &[Generation], ds: &Dataset) -> Result<Vec<seqens_core::Tensor<f32>>> {
    let images = ds.all_images()?;
    gens.iter()
        .map(|g| {
            if g.conditioning().needs_input() {
                return Err(usage("simple-ensemble members must be unconditioned; use --chain or --mode seq"));
            }
            Ok(predict_chunked(g, &images, None, CHUNK)?.logits)
        })
        .collect()
}

fn ensemble(
    mode: EnsembleMode,
    strategy: CombineStrategy,
    ckpt: &[PathBuf],
    data: &Path,
    report: &Path,
    self_loops: usize,
    temperature: f64,
    common: &EvalArgs,
) -> Result<()> {
    let ds = split(data, common)?;
    let gens = load_all(ckpt)?;
    let n = gens.len();
    let mut t = metrics_table(ds.num_classes());
    let (labels, strategy_name, temp) = match mode {
        EnsembleMode::Sim => {
            if self_loops > 0 {
                return Err(usage("--self-loops applies to --mode seq"));
            }
            let p = calibrated_combine(&member_logits(&gens, &ds)?, temperature, strategy)?;
            (p.argmax_labels(), strategy.name(), temperature)
        }
        EnsembleMode::Seq => {
            let chain = Chain::new(gens, self_loops)?;
            (chain_final(&chain, &ds.all_images()?, CHUNK)?.labels, "none", 1.0)
        }
    };
    let key = MetricsKey { run_id: &common.run_id, mode: mode.name(), member: "ensemble".into(), n, strategy: strategy_name, temperature: temp };
    push_metrics(&mut t, key, &metrics_for(&labels, &ds, common)?);
    t.write(report)
}

fn calibrate(
    ckpt: &[PathBuf],
    data: &Path,
    grid: Vec<f64>,
    report: &Path,
    bins: usize,
    as_chain: bool,
    histogram: Option<&Path>,
    common: &EvalArgs,
) -> Result<()> {
    let ds = split(data, common)?;
    let gens = load_all(ckpt)?;
    let cfg = CalibrationConfig { num_bins: bins, temperature_grid: grid, ignore_label: common.ignore() };
    let logits = if as_chain {
        vec![chain_final(&Chain::new(gens, 0)?, &ds.all_images()?, CHUNK)?.logits]
    } else {
        member_logits(&gens, &ds)?
    };
    let labels = ds.labels();
    let r = ensemble_temperature_sweep(&logits, &labels, &cfg, CombineStrategy::Uniform)?;
    calibration_table(&r, bins).write(report)?;
    println!("best_T={}", num(r.best_t));
    if let Some(path) = histogram {
        let probs = calibrated_combine(&logits, 1.0, CombineStrategy::Uniform)?;
        let (ok, bad) = confidence_histogram(&[probs], &labels, &cfg)?;
        let mut t = histogram_table();
        push_histogram(&mut t, &common.run_id, &ok, &bad);
        t.write(path)?;
    }
    Ok(())
}

fn diversity(ckpt: &[PathBuf], data: &Path, report: &Path, common: &EvalArgs) -> Result<()> {
    let ds = split(data, common)?;
    let gens = load_all(ckpt)?;
    let maps: Vec<Vec<ProbabilityMap>> = member_logits(&gens, &ds)?
        .iter()
        .map(|l| Ok(vec![seqens_core::tensor::channel_softmax(l)?]))
        .collect::<Result<_>>()?;
    let pred = prediction_similarity_matrix(&maps)?;
    let param = parameter_similarity_matrix(&gens).ok();
    diversity_table(&pred, param.as_ref()).write(report)
}

fn fourcase(ckpt: &[PathBuf], data: &Path, report: &Path, common: &EvalArgs) -> Result<()> {
    if ckpt.len() != 2 {
        return Err(usage(format!("fourcase takes exactly two --ckpt values, got {}", ckpt.len())));
    }
    let ds = split(data, common)?;
    let gens = load_all(ckpt)?;
    let images = ds.all_images()?;
    let first = predict_chunked(&gens[0], &images, None, CHUNK)?;
    let second = if gens[1].conditioning().needs_input() {
        chain_final(&Chain::new(gens.clone(), 0)?, &images, CHUNK)?
    } else {
        predict_chunked(&gens[1], &images, None, CHUNK)?
    };
    let f = four_case_table(&first.labels, &second.labels, &ds.labels(), common.ignore())?;
    let mut t = fourcase_table();
    push_fourcase(&mut t, &common.run_id, &f);
    t.write(report)
}
