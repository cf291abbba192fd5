//! `gqa` command-line interface.
//!
//! Every command writes its artifacts plus a `manifest.json` into
//! `--out-dir`. `gqa replay <manifest>` reruns a command from its manifest
//! and checks that every output file hashes identically.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or configuration error,
//! 3 checkpoint error, 4 search failure, 5 replay mismatch.

mod compare;
mod manifest;

pub use compare::{compare_metrics, CompareConfig, CompareOutcome, CompareRow, StepRecord, PipelineRecord};
pub use manifest::{sha256_file, FileDigest, RunManifest, SearchSummary, MANIFEST_FORMAT_VERSION};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::costmodel::{cost_curve, CostRow};
use crate::error::GqaError;
use crate::grouping::SearchConfig;
use crate::merge::{group_and_convert, ConvertConfig, Strategy};
use crate::model::{init_model, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
use crate::similarity::SimilarityMetric;
use crate::tasks::{evaluate, finetune, gen_dataset, train, Dataset, Split, TaskSpec, TrainConfig, FINETUNE_EPOCHS};

pub const RUN_CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] GqaError),
    #[error("replay mismatch: {0:?}")]
    ReplayMismatch(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ReplayMismatch(_) => 5,
            CliError::Core(e) => match e {
                GqaError::Config(_) | GqaError::Input(_) => 2,
                GqaError::Checkpoint(_) => 3,
                GqaError::Grouping(_)
                | GqaError::Plan(_)
                | GqaError::EmptyCandidates
                | GqaError::Oracle(_)
                | GqaError::Budget { .. } => 4,
                _ => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Training run description read by `gqa train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: u32,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub data_seed: u64,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GqaError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| GqaError::Config(format!("malformed config {}: {e}", path.display())))?;
        if cfg.format_version != RUN_CONFIG_FORMAT_VERSION {
            return Err(GqaError::Config(format!(
                "config {}: unsupported format_version {}",
                path.display(),
                cfg.format_version
            )));
        }
        cfg.model.validate()?;
        cfg.task.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Parser, Clone, Debug, Serialize, Deserialize)]
#[command(name = "gqa", version, about = "Convert multi-head attention into grouped-query attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the dataset and train a fresh MHA model.
    Train(TrainArgs),
    /// Group heads layer by layer and merge key/value projections.
    Convert(ConvertArgs),
    /// Recovery fine-tuning of a (converted) checkpoint.
    Finetune(FinetuneArgs),
    /// Accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Attention parameter and FLOP counts per group size.
    Cost(CostArgs),
    /// Weight- vs activation-informed symmetric search against brute force.
    CompareMetrics(CompareArgs),
    /// Rerun a command from its manifest and verify the output hashes.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Convert(_) => "convert",
            Command::Finetune(_) => "finetune",
            Command::Eval(_) => "eval",
            Command::Cost(_) => "cost",
            Command::CompareMetrics(_) => "compare-metrics",
            Command::Replay(_) => "replay",
        }
    }

    fn out_dir_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            Command::Train(a) => Some(&mut a.out_dir),
            Command::Convert(a) => Some(&mut a.out_dir),
            Command::Finetune(a) => Some(&mut a.out_dir),
            Command::Eval(a) => Some(&mut a.out_dir),
            Command::Cost(a) => Some(&mut a.out_dir),
            Command::CompareMetrics(a) => Some(&mut a.out_dir),
            Command::Replay(_) => None,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 3)]
    pub topk: usize,
    #[arg(long, default_value_t = 0.1)]
    pub p_acc: f64,
    #[arg(long, default_value_t = 0.1)]
    pub p_reset: f64,
    #[arg(long, default_value_t = 0.2)]
    pub p_preserve: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sequences from the train split used for activation similarity.
    #[arg(long, default_value_t = 8)]
    pub calibration_size: usize,
}

impl SearchArgs {
    fn search_config(&self, group_size: usize) -> SearchConfig {
        SearchConfig {
            n_iters: self.iters,
            group_size,
            top_k: self.topk,
            p_acc: self.p_acc,
            p_reset: self.p_reset,
            p_preserve: self.p_preserve,
            seed: self.seed,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ConvertArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// ng, sg, ag or brute.
    #[arg(long)]
    pub strategy: Strategy,
    #[arg(long)]
    pub group_size: usize,
    /// Dataset JSON; required by every strategy except ng.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// activation or weight.
    #[arg(long, default_value = "activation")]
    pub metric: SimilarityMetric,
    /// Recompute similarity at every search iteration.
    #[arg(long)]
    pub per_iteration_similarity: bool,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Shuffle seed; separate from the search `--seed`.
    #[arg(long = "train-seed", id = "train_seed", default_value_t = 0)]
    pub seed: u64,
}

impl TrainFlags {
    fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = FINETUNE_EPOCHS)]
    pub epochs: usize,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val, test or oracle.
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct CostArgs {
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 8)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 12)]
    pub seq_len: usize,
    /// Comma-separated group sizes.
    #[arg(long, default_value = "1,2,4,8")]
    pub sizes: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "1,2,4")]
    pub sizes: String,
    /// Number of independent search/fine-tune seeds.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = FINETUNE_EPOCHS)]
    pub epochs: usize,
    #[command(flatten)]
    pub search: SearchArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Where to write the rerun outputs (default: `replay/` next to the manifest).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_sizes(text: &str) -> crate::Result<Vec<usize>> {
    let sizes: Vec<usize> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| GqaError::Config(format!("invalid group size `{s}`")))
        })
        .collect::<crate::Result<_>>()?;
    if sizes.is_empty() {
        return Err(GqaError::Config("no group sizes given".into()));
    }
    Ok(sizes)
}

fn absolute(path: &Path, missing: impl Fn(String) -> GqaError) -> crate::Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| missing(format!("{}: {e}", path.display())))
}

fn prepare_out_dir(dir: &Path) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir)?;
    Ok(std::fs::canonicalize(dir)?)
}

fn load_ckpt(path: &Path) -> CliResult<(PathBuf, Checkpoint)> {
    let p = absolute(path, |m| GqaError::Checkpoint(format!("cannot read checkpoint {m}")))?;
    let ckpt = load_checkpoint(&p)?;
    Ok((p, ckpt))
}

fn load_data(path: &Path) -> CliResult<(PathBuf, Dataset)> {
    let p = absolute(path, |m| GqaError::Input(format!("cannot read dataset {m}")))?;
    let ds = Dataset::load(&p)?;
    Ok((p, ds))
}

/// Collects outputs and finishes the manifest for one command.
struct Run {
    started: Instant,
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn new(command: &Command, out_dir: PathBuf) -> Self {
        Self {
            started: Instant::now(),
            out_dir,
            manifest: RunManifest::new(command.clone()),
        }
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        self.manifest.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, contents)?;
        self.record(name)
    }

    fn record(&mut self, name: &str) -> CliResult<()> {
        self.manifest.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_file(&self.out_dir.join(name))?,
        });
        Ok(())
    }

    fn finish(mut self) -> CliResult<RunManifest> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        std::fs::write(
            self.out_dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(self.manifest)
    }
}

fn cmd_train(args: &TrainArgs) -> CliResult<RunManifest> {
    let config_path = absolute(&args.config, |m| GqaError::Config(format!("cannot read config {m}")))?;
    let cfg = RunConfig::load(&config_path)?;
    let out_dir = prepare_out_dir(&args.out_dir)?;
    let command = Command::Train(TrainArgs {
        config: config_path.clone(),
        out_dir: out_dir.clone(),
    });
    let mut run = Run::new(&command, out_dir);
    run.input(&config_path)?;
    run.manifest.config = serde_json::to_value(&cfg)?;
    run.manifest.seeds = BTreeMap::from([
        ("data".to_string(), cfg.data_seed),
        ("init".to_string(), cfg.init_seed),
        ("train".to_string(), cfg.train.seed),
    ]);

    let dataset = gen_dataset(&cfg.task, cfg.data_seed)?;
    let init = init_model(&cfg.model, cfg.init_seed)?;
    let (model, history) = train(&init, &dataset, &cfg.train)?;
    run.write("dataset.json", &dataset.to_json()?)?;
    save_checkpoint(&model, &run.out_dir.join("checkpoint.json"))?;
    run.record("checkpoint.json")?;
    run.write("history.csv", &history.to_csv())?;
    println!(
        "trained {} epochs: final loss {:.4}, val accuracy {:.4}",
        cfg.train.epochs,
        history.records.last().map_or(f64::NAN, |r| r.loss),
        history.final_val_acc().unwrap_or(f64::NAN)
    );
    run.finish()
}

fn cmd_convert(args: &ConvertArgs) -> CliResult<RunManifest> {
    let (ckpt_path, ckpt) = load_ckpt(&args.ckpt)?;
    let data = match (&args.data, args.strategy) {
        (Some(p), _) => Some(load_data(p)?),
        (None, Strategy::Ng) => None,
        (None, s) => {
            return Err(GqaError::Config(format!("--strategy {} requires --data", s.name())).into());
        }
    };
    let cfg = ConvertConfig {
        strategy: args.strategy,
        search: args.search.search_config(args.group_size),
        metric: args.metric,
        per_iteration_similarity: args.per_iteration_similarity,
        calibration_size: args.search.calibration_size,
        calibration_seed: args.search.seed,
    };
    cfg.search.validate(ckpt.config.n_heads)?;
    let out_dir = prepare_out_dir(&args.out_dir)?;
    let command = Command::Convert(ConvertArgs {
        ckpt: ckpt_path.clone(),
        data: data.as_ref().map(|d| d.0.clone()),
        out_dir: out_dir.clone(),
        ..args.clone()
    });
    let mut run = Run::new(&command, out_dir);
    run.input(&ckpt_path)?;
    if let Some((p, _)) = &data {
        run.input(p)?;
    }
    run.manifest.config = serde_json::to_value(&cfg)?;
    run.manifest.seeds = BTreeMap::from([("search".to_string(), cfg.search.seed)]);

    let conv = group_and_convert(&ckpt, &cfg, data.as_ref().map(|d| &d.1))?;
    save_checkpoint(&conv.checkpoint, &run.out_dir.join("checkpoint.json"))?;
    run.record("checkpoint.json")?;
    run.write("report.json", &serde_json::to_string_pretty(&conv.report)?)?;
    run.manifest.search_summaries = SearchSummary::from_report(&conv.report);
    println!(
        "{} conversion at group size {}: attention params {} -> {}, {} oracle calls",
        cfg.strategy.name(),
        args.group_size,
        conv.report.attention_params_before,
        conv.report.attention_params_after,
        conv.report.oracle_calls
    );
    for l in &conv.report.layers {
        println!("  layer {}: keys {} values {}", l.layer_index, l.key.grouping, l.value.grouping);
    }
    run.finish()
}

fn cmd_finetune(args: &FinetuneArgs) -> CliResult<RunManifest> {
    let (ckpt_path, ckpt) = load_ckpt(&args.ckpt)?;
    let (data_path, dataset) = load_data(&args.data)?;
    let cfg = args.train.train_config(args.epochs);
    cfg.validate()?;
    let out_dir = prepare_out_dir(&args.out_dir)?;
    let command = Command::Finetune(FinetuneArgs {
        ckpt: ckpt_path.clone(),
        data: data_path.clone(),
        out_dir: out_dir.clone(),
        ..args.clone()
    });
    let mut run = Run::new(&command, out_dir);
    run.input(&ckpt_path)?;
    run.input(&data_path)?;
    run.manifest.config = serde_json::to_value(&cfg)?;
    run.manifest.seeds = BTreeMap::from([("train".to_string(), cfg.seed)]);
    let (model, history) = finetune(&ckpt, &dataset, args.epochs, &cfg)?;
    save_checkpoint(&model, &run.out_dir.join("checkpoint.json"))?;
    run.record("checkpoint.json")?;
    run.write("history.csv", &history.to_csv())?;
    println!(
        "fine-tuned {} epochs: val accuracy {:.4}",
        args.epochs,
        history.final_val_acc().unwrap_or(f64::NAN)
    );
    run.finish()
}

#[derive(Serialize, Deserialize)]
struct EvalOutput {
    accuracy: f64,
    split: Split,
    n_examples: usize,
}

fn cmd_eval(args: &EvalArgs) -> CliResult<RunManifest> {
    let (ckpt_path, ckpt) = load_ckpt(&args.ckpt)?;
    let (data_path, dataset) = load_data(&args.data)?;
    let out_dir = prepare_out_dir(&args.out_dir)?;
    let command = Command::Eval(EvalArgs {
        ckpt: ckpt_path.clone(),
        data: data_path.clone(),
        out_dir: out_dir.clone(),
        ..args.clone()
    });
    let mut run = Run::new(&command, out_dir);
    run.input(&ckpt_path)?;
    run.input(&data_path)?;
    let accuracy = evaluate(&ckpt, &dataset, args.split)?;
    let out = EvalOutput {
        accuracy,
        split: args.split,
        n_examples: dataset.split_indices(args.split).len(),
    };
    run.manifest.config = serde_json::to_value(&args.split)?;
    run.write("eval.json", &serde_json::to_string_pretty(&out)?)?;
    println!("accuracy {accuracy:.4} on {} {:?} examples", out.n_examples, args.split);
    run.finish()
}

fn cmd_cost(args: &CostArgs) -> CliResult<RunManifest> {
    let sizes = parse_sizes(&args.sizes)?;
    let config = ModelConfig {
        n_layers: args.n_layers,
        n_heads: args.n_heads,
        head_dim: args.head_dim,
        d_model: args.n_heads * args.head_dim,
        mlp_hidden: 1,
        vocab_size: 1,
        max_seq_len: args.seq_len.max(1),
        n_classes: 1,
    };
    config.validate()?;
    let report = cost_curve(&config, &sizes, args.seq_len)?;
    let out_dir = prepare_out_dir(&args.out_dir)?;
    let command = Command::Cost(CostArgs {
        out_dir: out_dir.clone(),
        ..args.clone()
    });
    let mut run = Run::new(&command, out_dir);
    run.manifest.config = serde_json::to_value(&config)?;
    run.write("cost.csv", &report.to_csv())?;
    run.write("params.dat", &report.to_dat(|r: &CostRow| r.relative_params))?;
    run.write("flops.dat", &report.to_dat(|r: &CostRow| r.relative_flops))?;
    for r in &report.rows {
        println!(
            "group size {:>3}: {:>3} kv groups, {} params ({:.3}), {} FLOPs/token ({:.3})",
            r.group_size, r.n_kv_groups, r.attn_params, r.relative_params, r.attn_flops_per_token, r.relative_flops
        );
    }
    run.finish()
}

fn cmd_compare(args: &CompareArgs) -> CliResult<RunManifest> {
    let sizes = parse_sizes(&args.sizes)?;
    let (ckpt_path, ckpt) = load_ckpt(&args.ckpt)?;
    let (data_path, dataset) = load_data(&args.data)?;
    if args.seeds == 0 {
        return Err(GqaError::Config("--seeds must be >= 1".into()).into());
    }
    let cfg = CompareConfig {
        sizes,
        seeds: args.seeds,
        search: args.search.search_config(1),
        calibration_size: args.search.calibration_size,
        finetune: args.train.train_config(args.epochs),
    };
    cfg.finetune.validate()?;
    let out_dir = prepare_out_dir(&args.out_dir)?;
    let command = Command::CompareMetrics(CompareArgs {
        ckpt: ckpt_path.clone(),
        data: data_path.clone(),
        out_dir: out_dir.clone(),
        ..args.clone()
    });
    let mut run = Run::new(&command, out_dir);
    run.input(&ckpt_path)?;
    run.input(&data_path)?;
    run.manifest.config = serde_json::to_value(&cfg)?;
    run.manifest.seeds = BTreeMap::from([("search".to_string(), cfg.search.seed), ("train".to_string(), cfg.finetune.seed)]);
    let outcome = compare_metrics(&ckpt, &dataset, &cfg)?;
    run.write("compare.csv", &outcome.table_csv())?;
    run.write("compare_steps.csv", &outcome.steps_csv())?;
    run.write("compare_runs.csv", &outcome.runs_csv())?;
    for r in &outcome.rows {
        println!(
            "size {} {:<10} stepwise {:.4}±{:.4}  pre-ft {:.4}±{:.4}  post-ft {:.4}±{:.4}",
            r.group_size, r.method, r.stepwise_mean, r.stepwise_std, r.pre_mean, r.pre_std, r.post_mean, r.post_std
        );
    }
    run.finish()
}

fn cmd_replay(args: &ReplayArgs) -> CliResult<RunManifest> {
    let text = std::fs::read_to_string(&args.manifest)
        .map_err(|e| GqaError::Config(format!("cannot read manifest {}: {e}", args.manifest.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| GqaError::Config(format!("malformed manifest {}: {e}", args.manifest.display())))?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(GqaError::Config(format!("unsupported manifest format_version {}", manifest.format_version)).into());
    }
    let mut problems = Vec::new();
    for input in &manifest.inputs {
        match sha256_file(Path::new(&input.path)) {
            Ok(h) if h == input.sha256 => {}
            Ok(_) => problems.push(format!("input {} changed", input.path)),
            Err(e) => problems.push(format!("input {}: {e}", input.path)),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::ReplayMismatch(problems));
    }
    let out_dir = match &args.out_dir {
        Some(d) => d.clone(),
        None => args
            .manifest
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("replay"),
    };
    let mut command = manifest.command.clone();
    match command.out_dir_mut() {
        Some(d) => *d = out_dir,
        None => return Err(GqaError::Config("a replay manifest cannot be replayed".into()).into()),
    }
    let rerun = execute(&command)?;
    for original in &manifest.outputs {
        match rerun.outputs.iter().find(|o| o.path == original.path) {
            Some(o) if o.sha256 == original.sha256 => println!("ok        {}", original.path),
            Some(_) => {
                println!("MISMATCH  {}", original.path);
                problems.push(original.path.clone());
            }
            None => {
                println!("MISSING   {}", original.path);
                problems.push(original.path.clone());
            }
        }
    }
    if problems.is_empty() {
        println!("replay reproduced {} outputs", manifest.outputs.len());
        Ok(rerun)
    } else {
        Err(CliError::ReplayMismatch(problems))
    }
}

/// Runs one command and returns its manifest.
pub fn execute(command: &Command) -> CliResult<RunManifest> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cost(a) => cmd_cost(a),
        Command::CompareMetrics(a) => cmd_compare(a),
        Command::Replay(a) => cmd_replay(a),
    }
}

/// Parses `std::env::args` and runs; the return value is the process exit code.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_sizes("1, 2,4").unwrap(), vec![1, 2, 4]);
        assert!(parse_sizes("1,x").is_err());
        assert!(parse_sizes("0").is_err());
    }

    #[test]
    fn argument_definitions_are_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(GqaError::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(GqaError::Checkpoint("x".into())).exit_code(), 3);
        assert_eq!(
            CliError::from(GqaError::Budget {
                count: "2".into(),
                cap: 1
            })
            .exit_code(),
            4
        );
        assert_eq!(CliError::ReplayMismatch(vec![]).exit_code(), 5);
    }

    #[test]
    fn defaults_follow_search_budget() {
        let cli = Cli::try_parse_from(["gqa", "convert", "--ckpt", "c", "--strategy", "ag", "--group-size", "2", "--out-dir", "o"]).unwrap();
        let Command::Convert(a) = cli.command else { panic!() };
        assert_eq!(a.search.search_config(2), SearchConfig::default());
        let cli = Cli::try_parse_from(["gqa", "finetune", "--ckpt", "c", "--data", "d", "--out-dir", "o"]).unwrap();
        let Command::Finetune(f) = cli.command else { panic!() };
        assert_eq!(f.epochs, 3);
    }
}
