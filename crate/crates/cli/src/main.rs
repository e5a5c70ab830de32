mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gistkv::harness::{
    attention_mass_profile, bench, gen_task, run_training, write_csv, BenchOptions, Precision, StepLog,
    SynthTaskSpec, TaskKind,
};
use gistkv::inference::generate;
use gistkv::layout::CompressionConfig;
use gistkv::model::{
    boundary_loss_profile, load_checkpoint, save_checkpoint, AttentionMode, Model, TrainLayout, Trainer,
};
use gistkv::visibility::{build_chunk_mask, build_unified_mask_fast, ChunkBaselineSpec};
use serde::Serialize;

use config::{RunConfig, TOY_LAYOUT};

/// Bad flags, config or flag combinations. Exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

/// Maps a library error raised while assembling a configuration to a usage error.
fn as_usage<T>(r: gistkv::Result<T>) -> Result<T> {
    r.map_err(|e| UsageError(e.to_string()).into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Oracle,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LayoutArg {
    Unified,
    Chunk,
}

impl LayoutArg {
    fn name(self) -> &'static str {
        match self {
            Self::Unified => "unified",
            Self::Chunk => "chunk",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gistkv", version, about = "Gist-token KV compression: training, evaluation and inference")]
struct Cli {
    /// JSON file with layout, model and training keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Numeric precision. Benchmarks default to f32; model commands run in f64 only.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Attention implementation for the unified pattern.
    #[arg(long, global = true, value_enum, default_value = "sparse")]
    mode: ModeArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a synthetic task and write a checkpoint.
    Train {
        #[arg(long, default_value = "char_lm")]
        task: String,
        #[arg(long, value_enum, default_value = "unified")]
        layout: LayoutArg,
        /// Chunk length for the chunk layout.
        #[arg(long, default_value_t = 64)]
        chunk_len: usize,
        /// Raw tokens per training sequence.
        #[arg(long, default_value_t = 256)]
        len: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 12)]
        needle_distance: usize,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint manifest path; the tensor buffer goes next to it.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-step CSV: step,mean_ce,grad_norm,lr.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Mean loss by position within fixed-length chunks, on held-out samples.
    EvalBoundary {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        chunk_len: Option<usize>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attended-entry counts and host timings of sparse vs dense causal attention.
    Bench {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<usize>>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Longer lengths get entry counts only (timings reported as 0).
        #[arg(long, default_value_t = 16384)]
        max_timed_len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy generation through the compressing cache; prints one token id per line.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated prompt token ids.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        prompt: Vec<u32>,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        /// Prefill chunk in raw tokens (multiple of the ratio); defaults to four units.
        #[arg(long)]
        chunk: Option<usize>,
        /// Optional per-step cache composition CSV: step,layer,sinks,gists,raws.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Writes a visibility mask as a binary PBM image.
    MaskDump {
        /// Raw sequence length.
        #[arg(long = "T", alias = "len")]
        len: usize,
        #[arg(long)]
        ratio: Option<usize>,
        #[arg(long)]
        sinks: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        /// Dump the chunk baseline mask instead of the unified one.
        #[arg(long)]
        chunk_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer attention mass that crosses chunk boundaries.
    AttnStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        chunk_len: Option<usize>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Seed offset for evaluation data, so it never coincides with a training draw.
const EVAL_SEED_OFFSET: u64 = 1_000_003;

struct Ctx {
    config: RunConfig,
    seed: u64,
    precision: Option<PrecisionArg>,
    mode: AttentionMode,
}

impl Ctx {
    fn require_f64(&self) -> Result<()> {
        if self.precision == Some(PrecisionArg::F32) {
            return usage("model commands run in f64 only; use --precision f64 or omit it");
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref()).map_err(|e| UsageError(format!("{e:#}")))?;
    let ctx = Ctx {
        config,
        seed: cli.seed,
        precision: cli.precision,
        mode: match cli.mode {
            ModeArg::Oracle => AttentionMode::Oracle,
            ModeArg::Sparse => AttentionMode::Sparse,
        },
    };
    match cli.command {
        Command::Train {
            task,
            layout,
            chunk_len,
            len,
            samples,
            needle_distance,
            steps,
            out,
            loss_csv,
        } => train(&ctx, &task, layout, chunk_len, len, samples, needle_distance, steps, &out, loss_csv.as_deref()),
        Command::EvalBoundary {
            checkpoint,
            chunk_len,
            samples,
            out,
        } => eval_boundary(&ctx, &checkpoint, chunk_len, samples, out.as_deref()),
        Command::Bench {
            lengths,
            ratios,
            repeats,
            max_timed_len,
            out,
        } => run_bench(&ctx, lengths, ratios, repeats, max_timed_len, out.as_deref()),
        Command::Generate {
            checkpoint,
            prompt,
            steps,
            chunk,
            trace,
        } => run_generate(&ctx, &checkpoint, &prompt, steps, chunk, trace.as_deref()),
        Command::MaskDump {
            len,
            ratio,
            sinks,
            window,
            chunk_len,
            out,
        } => mask_dump(&ctx, len, ratio, sinks, window, chunk_len, &out),
        Command::AttnStats {
            checkpoint,
            chunk_len,
            samples,
            out,
        } => attn_stats(&ctx, &checkpoint, chunk_len, samples, out.as_deref()),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn csv_to<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<()> {
    let mut w = output(path)?;
    write_csv(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

fn task_spec(kind: TaskKind, vocab: usize, len: usize, needle_distance: usize, samples: usize, seed: u64) -> SynthTaskSpec {
    SynthTaskSpec {
        kind,
        vocab,
        len,
        needle_distance,
        align: 1,
        samples,
        seed,
    }
}

#[allow(clippy::too_many_arguments)]
fn train(
    ctx: &Ctx,
    task: &str,
    layout: LayoutArg,
    chunk_len: usize,
    len: usize,
    samples: usize,
    needle_distance: usize,
    steps: Option<usize>,
    out: &Path,
    loss_csv: Option<&Path>,
) -> Result<()> {
    ctx.require_f64()?;
    let kind: TaskKind = as_usage(task.parse())?;
    let model_cfg = ctx.config.model(ctx.seed);
    let mut train_cfg = ctx.config.train();
    if let Some(s) = steps {
        train_cfg.steps = s;
    }
    as_usage(train_cfg.validate())?;
    let (compression, train_layout) = match layout {
        LayoutArg::Unified => {
            let c = ctx.config.compression(TOY_LAYOUT);
            as_usage(c.validate())?;
            (c, TrainLayout::Unified(ctx.mode))
        }
        LayoutArg::Chunk => {
            if ctx.config.sink_count.is_some_and(|s| s != 0) {
                return usage("the chunk layout has no sinks; drop sink_count from the config");
            }
            let spec = as_usage(ChunkBaselineSpec::new(chunk_len, ctx.config.ratio.unwrap_or(TOY_LAYOUT.ratio)))?;
            if len % chunk_len != 0 {
                return usage(format!("--len {len} must be a multiple of --chunk-len {chunk_len}"));
            }
            (spec.layout_config(), TrainLayout::Chunk(spec))
        }
    };
    if len % compression.ratio != 0 {
        return usage(format!("--len {len} must be a multiple of the ratio {}", compression.ratio));
    }
    let model = as_usage(Model::new(model_cfg, compression))?;
    let data: Vec<Vec<u32>> = as_usage(gen_task(&task_spec(kind, model_cfg.vocab, len, needle_distance, samples, ctx.seed)))?
        .into_iter()
        .map(|s| s.tokens)
        .collect();

    let total = train_cfg.steps;
    let mut trainer = as_usage(Trainer::new(model, train_cfg, train_layout))?;
    let mut log: Vec<StepLog> = Vec::with_capacity(total);
    let every = (total / 10).max(1);
    run_training(&mut trainer, &data, total, |s| {
        if s.step % every == 0 || s.step == total {
            eprintln!("step {:>6}  loss {:.4}  grad_norm {:.3}  lr {:.2e}", s.step, s.mean_ce, s.grad_norm, s.lr);
        }
        log.push(*s);
    })?;
    if let Some(p) = loss_csv {
        csv_to(Some(p), &log)?;
    }

    let metadata = BTreeMap::from([
        ("task".to_string(), task.to_string()),
        ("layout".to_string(), layout.name().to_string()),
        ("chunk_len".to_string(), chunk_len.to_string()),
        ("len".to_string(), len.to_string()),
        ("needle_distance".to_string(), needle_distance.to_string()),
        ("seed".to_string(), ctx.seed.to_string()),
        ("steps".to_string(), total.to_string()),
    ]);
    save_checkpoint(&trainer.model, out, metadata)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// A loaded checkpoint with the evaluation settings recorded at training time.
struct Loaded {
    model: Model,
    layout: TrainLayout,
    kind: TaskKind,
    len: usize,
    chunk_len: usize,
    needle_distance: usize,
}

fn load(ctx: &Ctx, path: &Path, chunk_len: Option<usize>) -> Result<Loaded> {
    ctx.require_f64()?;
    let (model, meta) = load_checkpoint(path)?;
    let get = |key: &str| meta.get(key).map(String::as_str);
    let num = |key: &str, default: usize| -> Result<usize> {
        get(key).map_or(Ok(default), |v| v.parse().with_context(|| format!("checkpoint metadata {key}={v:?}")))
    };
    let kind: TaskKind = get("task").unwrap_or("char_lm").parse()?;
    let chunk_len = match chunk_len {
        Some(c) => c,
        None => num("chunk_len", 64)?,
    };
    let layout = match get("layout") {
        Some("chunk") => {
            let spec = as_usage(ChunkBaselineSpec::new(chunk_len, model.compression.ratio))?;
            TrainLayout::Chunk(spec)
        }
        _ => TrainLayout::Unified(ctx.mode),
    };
    Ok(Loaded {
        len: num("len", 256)?,
        needle_distance: num("needle_distance", 12)?,
        model,
        layout,
        kind,
        chunk_len,
    })
}

fn eval_data(ctx: &Ctx, l: &Loaded, samples: usize) -> Result<Vec<Vec<u32>>> {
    if l.len % l.chunk_len != 0 {
        return usage(format!("sequence length {} is not a multiple of chunk length {}", l.len, l.chunk_len));
    }
    let spec = task_spec(l.kind, l.model.config.vocab, l.len, l.needle_distance, samples, ctx.seed + EVAL_SEED_OFFSET);
    Ok(gen_task(&spec)?.into_iter().map(|s| s.tokens).collect())
}

fn eval_boundary(ctx: &Ctx, checkpoint: &Path, chunk_len: Option<usize>, samples: usize, out: Option<&Path>) -> Result<()> {
    let l = load(ctx, checkpoint, chunk_len)?;
    let data = eval_data(ctx, &l, samples)?;
    let rows = boundary_loss_profile(&l.model, &l.layout, &data, l.chunk_len)?;
    csv_to(out, &rows)
}

#[derive(Serialize)]
struct MassRow {
    layer: usize,
    cross_chunk_mass: f64,
}

fn attn_stats(ctx: &Ctx, checkpoint: &Path, chunk_len: Option<usize>, samples: usize, out: Option<&Path>) -> Result<()> {
    let l = load(ctx, checkpoint, chunk_len)?;
    let data = eval_data(ctx, &l, samples)?;
    let rows: Vec<MassRow> = attention_mass_profile(&l.model, &l.layout, &data, l.chunk_len)?
        .into_iter()
        .enumerate()
        .map(|(layer, cross_chunk_mass)| MassRow { layer, cross_chunk_mass })
        .collect();
    csv_to(out, &rows)
}

fn run_bench(
    ctx: &Ctx,
    lengths: Option<Vec<usize>>,
    ratios: Option<Vec<usize>>,
    repeats: usize,
    max_timed_len: usize,
    out: Option<&Path>,
) -> Result<()> {
    let d = BenchOptions::default();
    let c = &ctx.config;
    let ratios = ratios.or_else(|| c.ratio.map(|r| vec![r])).unwrap_or(d.ratios.clone());
    let opts = BenchOptions {
        lengths: lengths.unwrap_or(d.lengths.clone()),
        ratios,
        block_size: c.block_size.unwrap_or(d.block_size),
        sink_count: c.sink_count.unwrap_or(d.sink_count),
        window_units: c.window_units.unwrap_or(d.window_units),
        repeats,
        max_timed_len,
        heads: c.heads.unwrap_or(d.heads),
        head_dim: c.head_dim.unwrap_or(d.head_dim),
        precision: match ctx.precision {
            Some(PrecisionArg::F64) => Precision::F64,
            _ => Precision::F32,
        },
        seed: ctx.seed,
    };
    for &r in &opts.ratios {
        as_usage(CompressionConfig::new(r, opts.sink_count, opts.window_units, opts.block_size))?;
    }
    let rows = bench(&opts)?;
    csv_to(out, &rows)
}

fn run_generate(
    ctx: &Ctx,
    checkpoint: &Path,
    prompt: &[u32],
    steps: usize,
    chunk: Option<usize>,
    trace: Option<&Path>,
) -> Result<()> {
    ctx.require_f64()?;
    let (model, _) = load_checkpoint(checkpoint)?;
    let vocab = model.config.vocab;
    if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= vocab) {
        return usage(format!("prompt token {bad} is outside the vocabulary of {vocab}"));
    }
    let chunk = chunk.unwrap_or(4 * model.compression.ratio);
    let (tokens, rows) = generate(&model, prompt, chunk, steps)?;
    let mut w = output(None)?;
    for t in tokens {
        writeln!(w, "{t}")?;
    }
    w.flush()?;
    if let Some(p) = trace {
        csv_to(Some(p), &rows)?;
    }
    Ok(())
}

fn mask_dump(
    ctx: &Ctx,
    len: usize,
    ratio: Option<usize>,
    sinks: Option<usize>,
    window: Option<usize>,
    chunk_len: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut c = ctx.config.compression(TOY_LAYOUT);
    c.ratio = ratio.unwrap_or(c.ratio);
    c.sink_count = sinks.unwrap_or(c.sink_count);
    c.window_units = window.unwrap_or(c.window_units);
    let mask = match chunk_len {
        Some(l) => {
            let spec = as_usage(ChunkBaselineSpec::new(l, c.ratio))?;
            as_usage(build_chunk_mask(len, &spec))?
        }
        None => {
            as_usage(c.validate())?;
            if len % c.ratio != 0 {
                return usage(format!("T={len} is not a multiple of the ratio {}", c.ratio));
            }
            build_unified_mask_fast(&c, len)
        }
    };
    std::fs::write(out, mask.to_pbm()).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {}x{} mask to {}", mask.rows(), mask.cols(), out.display());
    Ok(())
}
