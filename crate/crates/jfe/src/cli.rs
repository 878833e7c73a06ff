//! Command-line front end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use jfe_core::data::PoolScope;
use jfe_core::eval::Scope;
use jfe_core::retrieval::build_index;
use jfe_core::synth::{generate_tasks, WorldSpec};
use jfe_core::trainer::{Checkpoint, Stage};
use serde::Deserialize;

use crate::bench::{read_data_dir, read_eval_split, read_vocab, write_data_dir, DataDir};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{RunConfig, SamplerMode};
use crate::error::{JfeError, Result};
use crate::pipeline::{evaluate_checkpoint, init_checkpoint, run_stage};
use crate::records::{item_from_fields, ImageReader};
use crate::report::{write_report, MetricsLog, ReportDoc};

#[derive(Debug, Parser)]
#[command(
    name = "jfe",
    version,
    about = "Joint fusion encoder: synthetic data, training, evaluation and search"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 6 objects x 4 attributes, a few dozen examples per dataset
    Tiny,
    /// 20 objects x 10 attributes, about 5k instruction examples
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Task,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Adapt,
    Instruct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageSet {
    None,
    Stage1,
    Stage2,
    Both,
}

impl StageSet {
    pub fn stages(self) -> &'static [Stage] {
        match self {
            StageSet::None => &[],
            StageSet::Stage1 => &[Stage::Adapt],
            StageSet::Stage2 => &[Stage::Instruct],
            StageSet::Both => &[Stage::Adapt, Stage::Instruct],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageSet::None => "none",
            StageSet::Stage1 => "stage1",
            StageSet::Stage2 => "stage2",
            StageSet::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Gaussian,
    None,
    Fixed,
}

impl SamplerArg {
    fn mode(self) -> SamplerMode {
        match self {
            SamplerArg::Gaussian => SamplerMode::Gaussian,
            SamplerArg::None => SamplerMode::None,
            SamplerArg::Fixed => SamplerMode::Fixed,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            SamplerArg::Gaussian => "gaussian",
            SamplerArg::None => "none",
            SamplerArg::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark directory
    Synth {
        /// World settings (TOML); keys left out take the preset's values
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Base settings when no spec file is given
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        /// Override the generator seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a checkpoint and write its metrics log
    Train {
        /// Run configuration (TOML); defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Benchmark directory
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh model
        #[arg(long)]
        init: Option<PathBuf>,
        /// Stages to run, in order (overrides run.stages)
        #[arg(long, value_enum, value_delimiter = ',')]
        stages: Option<Vec<StageArg>>,
        /// Optimizer steps per stage; 0 skips training and writes the initialization
        #[arg(long)]
        steps: Option<u64>,
        /// Override run.seed
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics log path (default: <out>.metrics.jsonl)
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and emit the report
    Eval {
        /// Checkpoint to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
        /// Benchmark directory
        #[arg(long)]
        data: PathBuf,
        /// Run configuration; defaults to the echo stored in the checkpoint
        #[arg(long)]
        config: Option<PathBuf>,
        /// Candidate pool per query: the query's dataset or the union of all
        #[arg(long, value_enum)]
        scope: Option<ScopeArg>,
        /// Encode queries without their dataset instructions
        #[arg(long)]
        no_instructions: bool,
        /// Write the report here instead of standard output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank a candidate pool for one query record
    Search {
        /// Checkpoint to encode with
        #[arg(long)]
        checkpoint: PathBuf,
        /// Benchmark directory whose evaluation candidates form the pool
        #[arg(long)]
        pool: PathBuf,
        /// JSON query record with q_kind, q_text, q_image and instruction
        #[arg(long)]
        query: PathBuf,
        /// Number of results
        #[arg(short = 'k', long = "top-k", default_value_t = 5)]
        k: usize,
        /// Restrict the pool to one dataset
        #[arg(long)]
        dataset: Option<String>,
        /// Ignore the record's instruction
        #[arg(long)]
        no_instructions: bool,
    },
    /// Train and evaluate a grid of stage, sampler and rank settings
    Ablate {
        /// Run configuration shared by every cell
        #[arg(long)]
        config: Option<PathBuf>,
        /// Benchmark directory
        #[arg(long)]
        data: PathBuf,
        /// Output directory for per-cell reports and the summary table
        #[arg(long)]
        out: PathBuf,
        /// Stage combinations
        #[arg(
            long,
            value_enum,
            value_delimiter = ',',
            default_value = "none,stage1,stage2,both"
        )]
        stages: Vec<StageSet>,
        /// Stage-2 sampling modes
        #[arg(long, value_enum, value_delimiter = ',', default_value = "gaussian")]
        samplers: Vec<SamplerArg>,
        /// Stage-2 adapter ranks (alpha keeps the configured alpha/rank ratio); defaults to stage2.rank
        #[arg(long, value_delimiter = ',')]
        ranks: Vec<usize>,
        /// Optimizer steps per stage
        #[arg(long)]
        steps: Option<u64>,
    },
}

fn parse_world(path: Option<&Path>, preset: Preset) -> Result<WorldSpec> {
    let base = match preset {
        Preset::Tiny => WorldSpec::tiny(),
        Preset::Desk => WorldSpec::default(),
    };
    let Some(path) = path else { return Ok(base) };
    let text = std::fs::read_to_string(path).map_err(|e| JfeError::io(path, e))?;
    let mut table: toml::Table = toml::from_str(&text)
        .map_err(|e| JfeError::Config(format!("{}: {}", path.display(), e.message())))?;
    let mut merged = toml::Table::try_from(&base).expect("world spec serializes");
    merged.extend(std::mem::take(&mut table));
    merged.try_into().map_err(|e: toml::de::Error| {
        JfeError::Config(format!("{}: {}", path.display(), e.message()))
    })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn apply_steps(cfg: &mut RunConfig, steps: Option<u64>) {
    if let Some(s) = steps {
        cfg.stage1.max_steps = Some(s);
        cfg.stage2.max_steps = Some(s);
    }
}

fn train_command(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
    stages: Option<&[StageArg]>,
    steps: Option<u64>,
    seed: Option<u64>,
    metrics: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(st) = stages {
        cfg.run.stages = st
            .iter()
            .map(|s| {
                if *s == StageArg::Adapt {
                    Stage::Adapt
                } else {
                    Stage::Instruct
                }
            })
            .collect();
    }
    apply_steps(&mut cfg, steps);
    cfg.validate()?;
    let data = read_data_dir(data)?;
    let mut ckpt = match init {
        Some(p) => load_checkpoint(p)?.checkpoint,
        None => init_checkpoint(&cfg, &data)?,
    };
    let metrics_path = metrics.map_or_else(
        || PathBuf::from(format!("{}.metrics.jsonl", out.display())),
        Path::to_path_buf,
    );
    if let Some(dir) = metrics_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| JfeError::io(dir, e))?;
    }
    let file = File::create(&metrics_path).map_err(|e| JfeError::io(&metrics_path, e))?;
    let mut log = MetricsLog::new(BufWriter::new(file));
    if steps != Some(0) {
        for &stage in &cfg.run.stages {
            let outcome = run_stage(&cfg, &ckpt, stage, &data)?;
            log.write(stage, &outcome.log)
                .map_err(|e| JfeError::io(&metrics_path, e))?;
            ckpt = outcome.checkpoint;
        }
    }
    save_checkpoint(out, &ckpt, &cfg.echo())
}

fn eval_command(
    checkpoint: &Path,
    data: &Path,
    config: Option<&Path>,
    scope: Option<ScopeArg>,
    no_instructions: bool,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let saved = load_checkpoint(checkpoint)?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => serde_json::from_value(saved.config.clone())
            .map_err(|e| JfeError::Config(format!("checkpoint configuration echo: {e}")))?,
    };
    if let Some(s) = scope {
        cfg.eval.scope = match s {
            ScopeArg::Task => Scope::Task,
            ScopeArg::Global => Scope::Global,
        }
        .as_str()
        .into();
    }
    if no_instructions {
        cfg.eval.use_instructions = false;
    }
    cfg.validate()?;
    let dir = data;
    let data = DataDir {
        world: None,
        vocab: read_vocab(&dir.join("vocab.txt"))?,
        catalog: Default::default(),
        caption_pairs: Vec::new(),
        train: Vec::new(),
        eval: read_eval_split(dir)?,
    };
    let doc = evaluate_checkpoint(&cfg, &saved.checkpoint, &data)?;
    match out {
        Some(p) => write_report(p, &doc),
        None => stdout
            .write_all(&doc.to_bytes())
            .map_err(|e| JfeError::io("<stdout>", e)),
    }
}

#[derive(Debug, Deserialize)]
struct QueryRecord {
    q_kind: String,
    #[serde(default)]
    q_text: Option<String>,
    #[serde(default)]
    q_image: Option<String>,
    #[serde(default)]
    instruction: Option<String>,
}

fn search_command(
    checkpoint: &Path,
    pool: &Path,
    query: &Path,
    k: usize,
    dataset: Option<&str>,
    no_instructions: bool,
    stdout: &mut dyn Write,
) -> Result<()> {
    let saved = load_checkpoint(checkpoint)?;
    let vocab = read_vocab(&pool.join("vocab.txt"))?;
    let split = read_eval_split(pool)?;
    let text = std::fs::read_to_string(query).map_err(|e| JfeError::io(query, e))?;
    let rec: QueryRecord = serde_json::from_str(text.trim())
        .map_err(|e| JfeError::Format(format!("{}: {e}", query.display())))?;
    let base = query.parent().map(Path::to_path_buf).unwrap_or_default();
    let item = item_from_fields(
        &rec.q_kind,
        rec.q_text.as_deref(),
        rec.q_image.as_deref(),
        &mut ImageReader::new(base),
    )
    .map_err(|m| JfeError::Format(format!("{}: {m}", query.display())))?;
    let scope = match dataset {
        Some(d) => PoolScope::Task(d.to_string()),
        None => PoolScope::Global,
    };
    let pool = jfe_core::data::build_pool(&split.candidates, &scope)?;
    let enc = saved.checkpoint.encoder()?;
    let store = &saved.checkpoint.store;
    let mut rows = Vec::with_capacity(pool.len());
    for (id, item) in pool.ids().iter().zip(pool.items()) {
        rows.push((id.clone(), enc.encode(store, item, None)?.0));
    }
    let index = build_index(rows)?;
    let instr = if no_instructions {
        None
    } else {
        rec.instruction.as_deref()
    };
    let instr = instr
        .map(|s| jfe_core::assembly::tokenize(s, &vocab))
        .filter(|t| !t.is_empty());
    let q = enc.encode(store, &item, instr.as_deref())?;
    for (rank, hit) in index.search(&q.0, k)?.iter().enumerate() {
        writeln!(stdout, "{}\t{}\t{:.6}", rank + 1, hit.id, hit.score)
            .map_err(|e| JfeError::io("<stdout>", e))?;
    }
    Ok(())
}

const TABLE_CATEGORIES: [&str; 5] = ["single", "cross", "mixed", "multi", "conditional"];

/// Header of the ablation table.
pub fn ablation_header() -> String {
    let mut cols = vec!["cell", "stages", "sampler", "rank"];
    cols.extend(TABLE_CATEGORIES);
    cols.push("overall");
    cols.join("\t")
}

#[allow(clippy::too_many_arguments)]
fn ablate_command(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    stage_sets: &[StageSet],
    samplers: &[SamplerArg],
    ranks: &[usize],
    steps: Option<u64>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let mut base_cfg = load_config(config)?;
    apply_steps(&mut base_cfg, steps);
    base_cfg.validate()?;
    let data = read_data_dir(data)?;
    let ranks: Vec<usize> = if ranks.is_empty() {
        vec![base_cfg.stage2.rank]
    } else {
        ranks.to_vec()
    };
    let init = init_checkpoint(&base_cfg, &data)?;
    let mut stage1: Option<Checkpoint> = None;

    let mut lines = vec![ablation_header()];
    for &set in stage_sets {
        let uses_stage2 = set.stages().contains(&Stage::Instruct);
        let sampler_axis: Vec<Option<SamplerArg>> = if uses_stage2 {
            samplers.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        let rank_axis: Vec<Option<usize>> = if uses_stage2 {
            ranks.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        for sampler in &sampler_axis {
            for rank in &rank_axis {
                let mut cfg = base_cfg.clone();
                if let Some(s) = sampler {
                    cfg.sampler.mode = s.mode();
                }
                if let Some(r) = rank {
                    let ratio = cfg.stage2.alpha / cfg.stage2.rank as f64;
                    cfg.stage2.rank = *r;
                    cfg.stage2.alpha = ratio * *r as f64;
                }
                cfg.validate()?;
                let mut ckpt = init.clone();
                if set.stages().contains(&Stage::Adapt) {
                    if stage1.is_none() {
                        stage1 = Some(run_stage(&cfg, &init, Stage::Adapt, &data)?.checkpoint);
                    }
                    ckpt = stage1.clone().expect("trained above");
                }
                if uses_stage2 {
                    ckpt = run_stage(&cfg, &ckpt, Stage::Instruct, &data)?.checkpoint;
                }
                let doc = evaluate_checkpoint(&cfg, &ckpt, &data)?;
                let sampler_name = sampler.map_or("-", |s| s.as_str());
                let rank_name = rank.map_or("-".to_string(), |r| r.to_string());
                let cell = format!("{}_{}_r{}", set.as_str(), sampler_name, rank_name);
                write_report(&out.join(&cell).join("report.json"), &doc)?;
                lines.push(table_row(&cell, set, sampler_name, &rank_name, &doc));
            }
        }
    }
    let mut table = lines.join("\n");
    table.push('\n');
    let path = out.join("table.tsv");
    std::fs::create_dir_all(out).map_err(|e| JfeError::io(out, e))?;
    std::fs::write(&path, &table).map_err(|e| JfeError::io(&path, e))?;
    stdout
        .write_all(table.as_bytes())
        .map_err(|e| JfeError::io("<stdout>", e))
}

fn table_row(cell: &str, set: StageSet, sampler: &str, rank: &str, doc: &ReportDoc) -> String {
    let mut cols = vec![
        cell.to_string(),
        set.as_str().to_string(),
        sampler.to_string(),
        rank.to_string(),
    ];
    for c in TABLE_CATEGORIES {
        cols.push(
            doc.category(c)
                .map_or("-".to_string(), |v| format!("{v:.4}")),
        );
    }
    cols.push(format!("{:.4}", doc.overall_avg));
    cols.join("\t")
}

/// Runs a parsed command line, writing command output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth {
            spec,
            preset,
            seed,
            out,
        } => {
            let mut world = parse_world(spec.as_deref(), preset)?;
            if let Some(s) = seed {
                world.seed = s;
            }
            let bench = generate_tasks(&world)?;
            write_data_dir(&out, &DataDir::from(bench))
        }
        Command::Train {
            config,
            data,
            out,
            init,
            stages,
            steps,
            seed,
            metrics,
        } => train_command(
            config.as_deref(),
            &data,
            &out,
            init.as_deref(),
            stages.as_deref(),
            steps,
            seed,
            metrics.as_deref(),
        ),
        Command::Eval {
            checkpoint,
            data,
            config,
            scope,
            no_instructions,
            out,
        } => eval_command(
            &checkpoint,
            &data,
            config.as_deref(),
            scope,
            no_instructions,
            out.as_deref(),
            stdout,
        ),
        Command::Search {
            checkpoint,
            pool,
            query,
            k,
            dataset,
            no_instructions,
        } => search_command(
            &checkpoint,
            &pool,
            &query,
            k,
            dataset.as_deref(),
            no_instructions,
            stdout,
        ),
        Command::Ablate {
            config,
            data,
            out,
            stages,
            samplers,
            ranks,
            steps,
        } => ablate_command(
            config.as_deref(),
            &data,
            &out,
            &stages,
            &samplers,
            &ranks,
            steps,
            stdout,
        ),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; errors are reported on `stderr` as one line.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = stdout.write_all(text.as_bytes());
            } else {
                let first = text
                    .lines()
                    .find(|l| !l.trim().is_empty())
                    .unwrap_or("invalid arguments");
                let _ = writeln!(
                    stderr,
                    "error[config]: {}",
                    first.trim_start_matches("error: ")
                );
            }
            return code;
        }
    };
    match run(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "error[{}]: {msg}", e.class());
            e.exit_code()
        }
    }
}
