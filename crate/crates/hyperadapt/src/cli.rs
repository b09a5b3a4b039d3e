//! Command-line wiring: one subcommand per experimental procedure.
//!
//! Every training command snapshots its effective configuration (plus seed
//! and version) into the output directory before touching any parameters,
//! so a run can be audited and replayed. Exit codes: 0 on success, 2 for
//! command-line usage errors, 1 for runtime failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    self, build_ood_testset, build_synthetic_squad, gen_compositional_tasks, subsample,
    FamilySpec, KeywordSpec, ListingMode, OrdinalSpec, TaskDataset,
};
use crate::eval::{evaluate, evaluate_fixed, emit_report, render_text, EvalReport, ReportFormat};
use crate::hypernet::{HyperConfig, Hypernetwork};
use crate::model::{
    load_checkpoint, save_checkpoint, MainNetwork, ModelConfig, Precision, Vocab,
};
use crate::numerics::{ParamStore, Scalar};
use crate::training::{
    adapter_set_from_store, greedy_sweep, init_adapter_store, stage2_axes, train_baseline_adapters,
    train_hyper, train_main, AdapterInit, Stage1Config, Stage2Config, SweepAxis,
    STAGE2_LR_GRID_DESK, STAGE2_LR_GRID_FINETUNE,
};

type CliResult<T = ()> = Result<T, String>;

fn err<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(msg.into())
}

/// Hypernetwork knobs that do not depend on the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSettings {
    /// Description-embedding width.
    pub e: usize,
    /// Decoder hidden width.
    pub m: usize,
    pub enc_heads: usize,
    pub zero_final_init: bool,
}

impl Default for HyperSettings {
    fn default() -> Self {
        HyperSettings { e: 32, m: 64, enc_heads: 4, zero_final_init: true }
    }
}

/// The full run configuration: a JSON config file maps onto this, `--set`
/// overrides individual fields by dotted path, and the merged result is
/// written to the output directory before training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Main-network shape. `vocab_size` 0 means "fill from the corpus".
    pub model: ModelConfig,
    pub hyper: HyperSettings,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(0),
            hyper: HyperSettings::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            seed: 0,
        }
    }
}

/// Recursively overlays `patch` onto `base` (objects merge; everything
/// else replaces).
fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `path` (dotted, e.g. "stage2.lr") to `value` inside a JSON tree.
/// Intermediate objects are created as needed; the final deserialization
/// rejects keys that do not exist on [`RunConfig`].
fn set_dotted(tree: &mut serde_json::Value, path: &str, value: serde_json::Value) -> CliResult {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return err(format!("bad --set path {path:?}"));
    }
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| format!("--set path {path:?} descends into a non-object"))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    node.as_object_mut()
        .ok_or_else(|| format!("--set path {path:?} descends into a non-object"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Loads the run configuration: defaults, overlaid with the optional JSON
/// config file, overlaid with `--set key=value` pairs in order.
pub fn resolve_config(config_path: Option<&Path>, sets: &[String]) -> CliResult<RunConfig> {
    let mut tree = serde_json::to_value(RunConfig::default()).expect("default serializes");
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        let patch: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| format!("parsing {}: {e}", path.display()))?;
        merge_json(&mut tree, patch);
    }
    for pair in sets {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| format!("--set expects key=value, got {pair:?}"))?;
        // Values parse as JSON when they can (numbers, bools), else as strings.
        let value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        set_dotted(&mut tree, key, value)?;
    }
    serde_json::from_value(tree).map_err(|e| format!("invalid configuration: {e}"))
}

#[derive(Parser, Debug)]
#[command(
    name = "hyperadapt",
    version,
    about = "Generate task-specific adapters from task descriptions",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed override; also replaces stage1/stage2 seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Keep this fraction of train tasks (data-efficiency ablation).
    #[arg(long, global = true)]
    task_fraction: Option<f64>,

    /// Keep this fraction of each train task's examples.
    #[arg(long, global = true)]
    examples_per_task: Option<f64>,

    /// Threads for task-parallel evaluation (training stays single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run-configuration file (partial files overlay the defaults).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one config field by dotted path, e.g. --set stage2.lr=3e-4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitModeArg {
    /// Fixed published partition when all its types are present, else shuffle.
    Auto,
    /// Fixed published partition; error if any type is missing.
    Fixed,
    /// Seeded shuffle.
    Shuffled,
}

impl From<SplitModeArg> for ListingMode {
    fn from(m: SplitModeArg) -> ListingMode {
        match m {
            SplitModeArg::Auto => ListingMode::Auto,
            SplitModeArg::Fixed => ListingMode::Fixed,
            SplitModeArg::Shuffled => ListingMode::Shuffled,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum GridArg {
    /// Learning-rate grids scaled x10 for small from-scratch models.
    Desk,
    /// The published fine-tuning grids.
    Finetune,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AdapterInitArg {
    Random,
    Zero,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a compositional task dataset (ordinal or keyword family).
    SynthTasks {
        /// Task family: ordinal | keyword
        #[arg(long)]
        family: String,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_tasks: Option<usize>,
        #[arg(long)]
        dev_tasks: Option<usize>,
        #[arg(long)]
        test_tasks: Option<usize>,
        /// Examples generated per task.
        #[arg(long)]
        examples: Option<usize>,
        #[arg(long)]
        min_words: Option<usize>,
        #[arg(long)]
        max_words: Option<usize>,
    },
    /// Build question-type tasks from MRQA-format records.
    BuildSquadTasks {
        /// MRQA JSONL files (.jsonl or .jsonl.gz), repeatable.
        #[arg(long = "mrqa", required = true)]
        mrqa: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// How to split the 100 types across train/dev/test.
        #[arg(long = "listing1", value_enum, default_value_t = SplitModeArg::Auto)]
        listing1: SplitModeArg,
    },
    /// Collect out-of-domain test tasks matching a dataset's test types.
    BuildOod {
        #[arg(long = "mrqa", required = true)]
        mrqa: Vec<PathBuf>,
        /// Dataset directory whose test split defines the types.
        #[arg(long)]
        dataset: PathBuf,
        /// Output task JSONL file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the main network (also the no-adapter baseline).
    TrainMain {
        /// Dataset directory (train/dev/test JSONL + provenance).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Stage 2: train the hypernetwork against a frozen main network.
    TrainHyper {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding main.{manifest,bin} and vocab.txt.
        #[arg(long)]
        main: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Baseline: fine-tune the main network with one shared adapter stack.
    TrainBaselineAdapters {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = AdapterInitArg::Random)]
        adapter_init: AdapterInitArg,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Greedy-sequential hyperparameter sweep for stage 2.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding main.{manifest,bin} and vocab.txt.
        #[arg(long)]
        main: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which learning-rate grid to search.
        #[arg(long, value_enum, default_value_t = GridArg::Desk)]
        grids: GridArg,
        /// Custom axes, e.g. "adapter_width=4,8;lr=1e-4,3e-4" (searched in order).
        #[arg(long)]
        axes: Option<String>,
        /// Epoch budget per sweep arm.
        #[arg(long, default_value_t = 10)]
        budget: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a checkpoint (optionally with a hypernetwork) on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        main: PathBuf,
        /// Hypernetwork checkpoint directory (hyper.{manifest,bin}).
        #[arg(long)]
        hyper: Option<PathBuf>,
        /// Shared-adapter checkpoint directory (adapters.{manifest,bin}).
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Competence thresholds, repeatable.
        #[arg(long = "k", default_values_t = [75u32, 90u32])]
        ks: Vec<u32>,
        /// Report file; format inferred from --format.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Decode one (description, source) pair and print the prediction.
    Infer {
        #[arg(long)]
        main: PathBuf,
        #[arg(long)]
        hyper: Option<PathBuf>,
        #[arg(long)]
        description: String,
        #[arg(long)]
        source: String,
    },
}

/// Parses and runs the process command line; the thin binary calls this.
pub fn run_main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // Clap exits 2 on usage errors and 0 for --help/--version.
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let globals = Globals {
        seed: cli.seed,
        task_fraction: cli.task_fraction,
        examples_per_task: cli.examples_per_task,
        jobs: cli.jobs.max(1),
    };
    match cli.command {
        Command::SynthTasks {
            family,
            out,
            train_tasks,
            dev_tasks,
            test_tasks,
            examples,
            min_words,
            max_words,
        } => {
            let mut spec = FamilySpec::by_name(&family).map_err(|e| e.to_string())?;
            apply_family_overrides(
                &mut spec,
                train_tasks,
                dev_tasks,
                test_tasks,
                examples,
                min_words,
                max_words,
            );
            let seed = globals.seed.unwrap_or(0);
            let ds = gen_compositional_tasks(&spec, seed).map_err(|e| e.to_string())?;
            ds.save_dir(&out).map_err(|e| e.to_string())?;
            println!(
                "wrote {} train / {} dev / {} test tasks to {}",
                ds.train.len(),
                ds.dev.len(),
                ds.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::BuildSquadTasks { mrqa, out, listing1 } => {
            let records = load_mrqa_files(&mrqa)?;
            let seed = globals.seed.unwrap_or(0);
            let mut ds = build_synthetic_squad(&records, seed, listing1.into())
                .map_err(|e| e.to_string())?;
            ds.provenance.source_files =
                mrqa.iter().map(|p| p.display().to_string()).collect();
            ds.save_dir(&out).map_err(|e| e.to_string())?;
            println!(
                "wrote {} train / {} dev / {} test tasks to {}",
                ds.train.len(),
                ds.dev.len(),
                ds.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::BuildOod { mrqa, dataset, out } => {
            let records = load_mrqa_files(&mrqa)?;
            let ds = TaskDataset::load_dir(&dataset).map_err(|e| e.to_string())?;
            let tasks = build_ood_testset(&records, &ds);
            data::save_tasks(&tasks, &out).map_err(|e| e.to_string())?;
            println!("wrote {} out-of-domain tasks to {}", tasks.len(), out.display());
            Ok(())
        }
        Command::TrainMain { data, out, config } => {
            let run = resolve_run_config(&config, &globals)?;
            let ds = load_dataset(&data, &globals)?;
            match run.model.precision {
                Precision::F32 => cmd_train_main::<f32>(&run, &ds, &out),
                Precision::F64 => cmd_train_main::<f64>(&run, &ds, &out),
            }
        }
        Command::TrainHyper { data, main, out, config } => {
            let run = resolve_run_config(&config, &globals)?;
            let ds = load_dataset(&data, &globals)?;
            let precision = peek_precision(&main.join("main.manifest"))?;
            match precision {
                Precision::F32 => cmd_train_hyper::<f32>(&run, &ds, &main, &out),
                Precision::F64 => cmd_train_hyper::<f64>(&run, &ds, &main, &out),
            }
        }
        Command::TrainBaselineAdapters { data, out, adapter_init, config } => {
            let run = resolve_run_config(&config, &globals)?;
            let ds = load_dataset(&data, &globals)?;
            let init = match adapter_init {
                AdapterInitArg::Random => AdapterInit::Random,
                AdapterInitArg::Zero => AdapterInit::Zero,
            };
            match run.model.precision {
                Precision::F32 => cmd_train_baseline::<f32>(&run, &ds, init, &out),
                Precision::F64 => cmd_train_baseline::<f64>(&run, &ds, init, &out),
            }
        }
        Command::Sweep { data, main, out, grids, axes, budget, config } => {
            let run = resolve_run_config(&config, &globals)?;
            let ds = load_dataset(&data, &globals)?;
            let lr_grid: &[f64] = match grids {
                GridArg::Desk => &STAGE2_LR_GRID_DESK,
                GridArg::Finetune => &STAGE2_LR_GRID_FINETUNE,
            };
            let axes = match axes {
                Some(spec) => parse_axes(&spec)?,
                None => stage2_axes(lr_grid),
            };
            let precision = peek_precision(&main.join("main.manifest"))?;
            match precision {
                Precision::F32 => cmd_sweep::<f32>(&run, &ds, &main, &out, &axes, budget),
                Precision::F64 => cmd_sweep::<f64>(&run, &ds, &main, &out, &axes, budget),
            }
        }
        Command::Eval { data, split, main, hyper, adapters, ks, report, format } => {
            let ds = load_dataset(&data, &globals)?;
            let tasks = ds.split(&split).map_err(|e| e.to_string())?;
            let format: ReportFormat = format.parse().map_err(|e: crate::eval::EvalError| e.to_string())?;
            let precision = peek_precision(&main.join("main.manifest"))?;
            let args = EvalArgs {
                data: &data,
                split: &split,
                main: &main,
                hyper: hyper.as_deref(),
                adapters: adapters.as_deref(),
                ks: &ks,
                report: report.as_deref(),
                format,
                jobs: globals.jobs,
            };
            match precision {
                Precision::F32 => cmd_eval::<f32>(tasks, &args),
                Precision::F64 => cmd_eval::<f64>(tasks, &args),
            }
        }
        Command::Infer { main, hyper, description, source } => {
            let precision = peek_precision(&main.join("main.manifest"))?;
            match precision {
                Precision::F32 => cmd_infer::<f32>(&main, hyper.as_deref(), &description, &source),
                Precision::F64 => cmd_infer::<f64>(&main, hyper.as_deref(), &description, &source),
            }
        }
    }
}

struct Globals {
    seed: Option<u64>,
    task_fraction: Option<f64>,
    examples_per_task: Option<f64>,
    jobs: usize,
}

fn apply_family_overrides(
    spec: &mut FamilySpec,
    train_tasks: Option<usize>,
    dev_tasks: Option<usize>,
    test_tasks: Option<usize>,
    examples: Option<usize>,
    min_words: Option<usize>,
    max_words: Option<usize>,
) {
    fn over<T: Copy>(slot: &mut T, v: Option<T>) {
        if let Some(v) = v {
            *slot = v;
        }
    }
    match spec {
        FamilySpec::Ordinal(OrdinalSpec {
            n_train,
            n_dev,
            n_test,
            examples_per_task,
            min_words: lo,
            max_words: hi,
        })
        | FamilySpec::Keyword(KeywordSpec {
            n_train,
            n_dev,
            n_test,
            examples_per_task,
            min_words: lo,
            max_words: hi,
        }) => {
            over(n_train, train_tasks);
            over(n_dev, dev_tasks);
            over(n_test, test_tasks);
            over(examples_per_task, examples);
            over(lo, min_words);
            over(hi, max_words);
        }
    }
}

fn load_mrqa_files(paths: &[PathBuf]) -> CliResult<Vec<data::MrqaRecord>> {
    let mut records = Vec::new();
    for path in paths {
        records.extend(data::load_mrqa(path).map_err(|e| e.to_string())?);
    }
    Ok(records)
}

fn resolve_run_config(config: &ConfigArgs, globals: &Globals) -> CliResult<RunConfig> {
    let mut run = resolve_config(config.config.as_deref(), &config.sets)?;
    if let Some(seed) = globals.seed {
        run.seed = seed;
        run.stage1.seed = seed;
        run.stage2.seed = seed;
    }
    Ok(run)
}

fn load_dataset(dir: &Path, globals: &Globals) -> CliResult<TaskDataset> {
    let ds = TaskDataset::load_dir(dir).map_err(|e| e.to_string())?;
    let tf = globals.task_fraction.unwrap_or(1.0);
    let ef = globals.examples_per_task.unwrap_or(1.0);
    if tf < 1.0 || ef < 1.0 {
        subsample(&ds, tf, ef, globals.seed.unwrap_or(0)).map_err(|e| e.to_string())
    } else {
        Ok(ds)
    }
}

/// Reads just the embedded model config from a checkpoint manifest.
fn peek_precision(manifest_path: &Path) -> CliResult<Precision> {
    #[derive(Deserialize)]
    struct Peek {
        config: ModelConfig,
    }
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| format!("reading {}: {e}", manifest_path.display()))?;
    let peek: Peek = serde_json::from_str(&text)
        .map_err(|e| format!("parsing {}: {e}", manifest_path.display()))?;
    Ok(peek.config.precision)
}

/// Writes the effective configuration, seed, and version before training.
fn write_run_snapshot(out: &Path, command: &str, run: &RunConfig) -> CliResult {
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let snapshot = serde_json::json!({
        "version": format!("hyperadapt-{}", env!("CARGO_PKG_VERSION")),
        "command": command,
        "seed": run.seed,
        "config": run,
    });
    let body = serde_json::to_string_pretty(&snapshot).map_err(|e| e.to_string())? + "\n";
    std::fs::write(out.join("config.json"), body).map_err(|e| e.to_string())
}

fn save_store<T: Scalar, C: Serialize>(
    out: &Path,
    stem: &str,
    config: &C,
    store: &ParamStore<T>,
) -> CliResult {
    save_checkpoint(
        &out.join(format!("{stem}.manifest")),
        &out.join(format!("{stem}.bin")),
        config,
        store,
    )
    .map_err(|e| e.to_string())
}

fn load_main_checkpoint<T: Scalar>(dir: &Path) -> CliResult<(MainNetwork<T>, Vocab)> {
    let (config, params) = load_checkpoint::<T, ModelConfig>(
        &dir.join("main.manifest"),
        &dir.join("main.bin"),
    )
    .map_err(|e| e.to_string())?;
    let vocab = Vocab::load(&dir.join("vocab.txt")).map_err(|e| e.to_string())?;
    if vocab.len() != config.vocab_size {
        return err(format!(
            "vocab.txt has {} tokens but the checkpoint expects {}",
            vocab.len(),
            config.vocab_size
        ));
    }
    Ok((MainNetwork { config, params }, vocab))
}

fn load_hyper_checkpoint<T: Scalar>(dir: &Path) -> CliResult<Hypernetwork<T>> {
    let (config, params) = load_checkpoint::<T, HyperConfig>(
        &dir.join("hyper.manifest"),
        &dir.join("hyper.bin"),
    )
    .map_err(|e| e.to_string())?;
    Ok(Hypernetwork { config, params })
}

fn finalize_model_config(run: &RunConfig, vocab: &Vocab) -> CliResult<ModelConfig> {
    let mut mc = run.model.clone();
    if mc.vocab_size == 0 {
        mc.vocab_size = vocab.len();
    } else if mc.vocab_size != vocab.len() {
        return err(format!(
            "config says vocab_size {} but the corpus produced {} tokens",
            mc.vocab_size,
            vocab.len()
        ));
    }
    mc.validate().map_err(|e| e.to_string())?;
    Ok(mc)
}

fn build_vocab(ds: &TaskDataset) -> Vocab {
    let lines = ds.corpus_lines();
    Vocab::from_corpus(lines.iter().map(|s| s.as_str()), 1, None)
}

fn cmd_train_main<T: Scalar>(run: &RunConfig, ds: &TaskDataset, out: &Path) -> CliResult {
    write_run_snapshot(out, "train-main", run)?;
    let vocab = build_vocab(ds);
    vocab.save(&out.join("vocab.txt")).map_err(|e| e.to_string())?;
    let mc = finalize_model_config(run, &vocab)?;
    let mut net = MainNetwork::<T>::init(mc, run.seed).map_err(|e| e.to_string())?;
    let log = train_main(&mut net, &vocab, ds, &run.stage1).map_err(|e| e.to_string())?;
    log.save_jsonl(&out.join("trainlog.jsonl")).map_err(|e| e.to_string())?;
    save_store(out, "main", &net.config, &net.params)?;
    println!(
        "stage 1 done: best dev {metric} {value:.4} at epoch {epoch} ({stop})",
        metric = run.stage1.metric,
        value = log.best_dev(),
        epoch = log.best_epoch,
        stop = log.stopping
    );
    Ok(())
}

fn cmd_train_hyper<T: Scalar>(
    run: &RunConfig,
    ds: &TaskDataset,
    main_dir: &Path,
    out: &Path,
) -> CliResult {
    write_run_snapshot(out, "train-hyper", run)?;
    let (net, vocab) = load_main_checkpoint::<T>(main_dir)?;
    vocab.save(&out.join("vocab.txt")).map_err(|e| e.to_string())?;
    let mut hc = HyperConfig::for_model(&net.config, run.hyper.e, run.hyper.m);
    hc.enc_heads = run.hyper.enc_heads;
    hc.zero_final_init = run.hyper.zero_final_init;
    let mut cfg = run.stage2.clone();
    cfg.adapter_width = net.config.adapter_width;
    let mut hn = Hypernetwork::<T>::init(hc, run.seed).map_err(|e| e.to_string())?;
    let log = train_hyper(&net, &mut hn, &vocab, ds, &cfg).map_err(|e| e.to_string())?;
    log.save_jsonl(&out.join("trainlog.jsonl")).map_err(|e| e.to_string())?;
    save_store(out, "hyper", &hn.config, &hn.params)?;
    println!(
        "stage 2 done: best dev {metric} {value:.4} at epoch {epoch} ({stop})",
        metric = cfg.metric,
        value = log.best_dev(),
        epoch = log.best_epoch,
        stop = log.stopping
    );
    Ok(())
}

fn cmd_train_baseline<T: Scalar>(
    run: &RunConfig,
    ds: &TaskDataset,
    init: AdapterInit,
    out: &Path,
) -> CliResult {
    write_run_snapshot(out, "train-baseline-adapters", run)?;
    let vocab = build_vocab(ds);
    vocab.save(&out.join("vocab.txt")).map_err(|e| e.to_string())?;
    let mc = finalize_model_config(run, &vocab)?;
    let mut net = MainNetwork::<T>::init(mc, run.seed).map_err(|e| e.to_string())?;
    let mut adapters = init_adapter_store::<T>(&net.config, init, run.seed);
    let log = train_baseline_adapters(&mut net, &mut adapters, &vocab, ds, &run.stage1)
        .map_err(|e| e.to_string())?;
    log.save_jsonl(&out.join("trainlog.jsonl")).map_err(|e| e.to_string())?;
    save_store(out, "main", &net.config, &net.params)?;
    save_store(out, "adapters", &net.config, &adapters)?;
    println!(
        "baseline done: best dev {metric} {value:.4} at epoch {epoch} ({stop})",
        metric = run.stage1.metric,
        value = log.best_dev(),
        epoch = log.best_epoch,
        stop = log.stopping
    );
    Ok(())
}

/// Parses "name=v1,v2;name2=v3,v4" into sweep axes (searched in order).
fn parse_axes(spec: &str) -> CliResult<Vec<SweepAxis>> {
    let mut axes = Vec::new();
    for part in spec.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, values) = part
            .split_once('=')
            .ok_or_else(|| format!("axis {part:?} is not name=v1,v2,..."))?;
        let values: Vec<f64> = values
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("axis {name}: {e}")))
            .collect::<CliResult<_>>()?;
        if values.is_empty() {
            return err(format!("axis {name:?} has no values"));
        }
        axes.push(SweepAxis::new(name.trim(), &values));
    }
    if axes.is_empty() {
        return err("no sweep axes given");
    }
    Ok(axes)
}

fn cmd_sweep<T: Scalar>(
    run: &RunConfig,
    ds: &TaskDataset,
    main_dir: &Path,
    out: &Path,
    axes: &[SweepAxis],
    budget: usize,
) -> CliResult {
    write_run_snapshot(out, "sweep", run)?;
    let (net, vocab) = load_main_checkpoint::<T>(main_dir)?;
    let known = ["adapter_width", "lr", "task_batch", "example_batch"];
    for ax in axes {
        if !known.contains(&ax.name.as_str()) {
            return err(format!("unknown sweep axis {:?}; valid axes: {known:?}", ax.name));
        }
    }
    let eval_arm = |candidate: &BTreeMap<String, f64>| -> Result<f64, String> {
        let mut cfg = run.stage2.clone();
        cfg.max_epochs = budget;
        let mut mc = net.config.clone();
        // Follow the checkpoint unless adapter_width is itself an axis.
        cfg.adapter_width = mc.adapter_width;
        for (name, &v) in candidate {
            match name.as_str() {
                "adapter_width" => {
                    mc.adapter_width = v as usize;
                    cfg.adapter_width = v as usize;
                }
                "lr" => cfg.lr = v,
                "task_batch" => cfg.task_batch = v as usize,
                "example_batch" => cfg.example_batch = v as usize,
                _ => unreachable!("axis names validated above"),
            }
        }
        let arm_net = MainNetwork { config: mc.clone(), params: net.params.clone() };
        let mut hc = HyperConfig::for_model(&mc, run.hyper.e, run.hyper.m);
        hc.enc_heads = run.hyper.enc_heads;
        hc.zero_final_init = run.hyper.zero_final_init;
        let mut hn = Hypernetwork::<T>::init(hc, run.seed).map_err(|e| e.to_string())?;
        let log = train_hyper(&arm_net, &mut hn, &vocab, ds, &cfg).map_err(|e| e.to_string())?;
        Ok(log.best_dev())
    };
    let (best, trace) = greedy_sweep(axes, eval_arm).map_err(|e| e.to_string())?;
    let body = serde_json::to_string_pretty(&serde_json::json!({
        "best": best,
        "trace": trace,
    }))
    .map_err(|e| e.to_string())?
        + "\n";
    std::fs::write(out.join("sweep.json"), body).map_err(|e| e.to_string())?;
    println!("sweep done: best {}", serde_json::to_string(&best).map_err(|e| e.to_string())?);
    Ok(())
}

struct EvalArgs<'a> {
    data: &'a Path,
    split: &'a str,
    main: &'a Path,
    hyper: Option<&'a Path>,
    adapters: Option<&'a Path>,
    ks: &'a [u32],
    report: Option<&'a Path>,
    format: ReportFormat,
    jobs: usize,
}

fn cmd_eval<T: Scalar>(tasks: &[crate::data::Task], args: &EvalArgs) -> CliResult {
    let (net, vocab) = load_main_checkpoint::<T>(args.main)?;
    if args.hyper.is_some() && args.adapters.is_some() {
        return err("--hyper and --adapters are mutually exclusive");
    }
    let mut report: EvalReport = if let Some(dir) = args.hyper {
        let hn = load_hyper_checkpoint::<T>(dir)?;
        hn.config.check_compatible(&net.config).map_err(|e| e.to_string())?;
        evaluate(&net, &vocab, Some(&hn), tasks, args.ks, args.jobs).map_err(|e| e.to_string())?
    } else if let Some(dir) = args.adapters {
        let (config, store) = load_checkpoint::<T, ModelConfig>(
            &dir.join("adapters.manifest"),
            &dir.join("adapters.bin"),
        )
        .map_err(|e| e.to_string())?;
        let set = adapter_set_from_store(&store, &config).map_err(|e| e.to_string())?;
        evaluate_fixed(&net, &vocab, Some(&set), tasks, args.ks, args.jobs)
            .map_err(|e| e.to_string())?
    } else {
        evaluate_fixed(&net, &vocab, None, tasks, args.ks, args.jobs).map_err(|e| e.to_string())?
    };
    report.meta.insert("dataset".into(), serde_json::json!(args.data.display().to_string()));
    report.meta.insert("split".into(), serde_json::json!(args.split));
    report
        .meta
        .insert("main_checksum".into(), serde_json::json!(format!("{:016x}", net.checksum())));
    print!("{}", render_text(&report));
    if let Some(path) = args.report {
        emit_report(&report, path, args.format).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn cmd_infer<T: Scalar>(
    main_dir: &Path,
    hyper_dir: Option<&Path>,
    description: &str,
    source: &str,
) -> CliResult {
    let (net, vocab) = load_main_checkpoint::<T>(main_dir)?;
    let adapters = match hyper_dir {
        None => None,
        Some(dir) => {
            let hn = load_hyper_checkpoint::<T>(dir)?;
            hn.config.check_compatible(&net.config).map_err(|e| e.to_string())?;
            Some(hn.generate_adapters(&vocab, description).map_err(|e| e.to_string())?)
        }
    };
    let src = crate::model::concat_input(&vocab, description, source, net.config.max_len)
        .map_err(|e| e.to_string())?;
    let prediction = net
        .greedy_decode(&vocab, adapters.as_ref(), &src, net.config.max_len)
        .map_err(|e| e.to_string())?;
    println!("{prediction}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips() {
        let run = RunConfig::default();
        let json = serde_json::to_string(&run).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn partial_config_overlays_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"stage1": {"lr": 0.001}, "seed": 9}"#).unwrap();
        let run = resolve_config(Some(&path), &[]).unwrap();
        assert_eq!(run.stage1.lr, 0.001);
        assert_eq!(run.seed, 9);
        assert_eq!(run.stage1.batch_size, Stage1Config::default().batch_size);
    }

    #[test]
    fn set_overrides_apply_in_order() {
        let sets = vec![
            "stage2.lr=0.0003".to_string(),
            "stage2.task_batch=16".to_string(),
            "stage2.lr=0.001".to_string(),
            "model.h=32".to_string(),
        ];
        let run = resolve_config(None, &sets).unwrap();
        assert_eq!(run.stage2.lr, 0.001);
        assert_eq!(run.stage2.task_batch, 16);
        assert_eq!(run.model.h, 32);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = resolve_config(None, &["stage1.learning_rate=0.1".into()]).unwrap_err();
        assert!(err.contains("learning_rate"), "{err}");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"modell": {}}"#).unwrap();
        let err = resolve_config(Some(&path), &[]).unwrap_err();
        assert!(err.contains("modell"), "{err}");
    }

    #[test]
    fn bad_set_syntax_is_an_error() {
        assert!(resolve_config(None, &["stage1.lr".into()]).is_err());
        assert!(resolve_config(None, &["=3".into()]).is_err());
    }

    #[test]
    fn axes_spec_parses_in_order() {
        let axes = parse_axes("adapter_width=4,8;lr=1e-4,3e-4").unwrap();
        assert_eq!(axes.len(), 2);
        assert_eq!(axes[0].name, "adapter_width");
        assert_eq!(axes[0].values, vec![4.0, 8.0]);
        assert_eq!(axes[1].name, "lr");
        assert_eq!(axes[1].values, vec![1e-4, 3e-4]);
        assert!(parse_axes("").is_err());
        assert!(parse_axes("lr=abc").is_err());
    }

    #[test]
    fn cli_parses_every_subcommand() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
