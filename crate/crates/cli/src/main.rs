use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use octoseq::checkpoint::{load_checkpoint, save_checkpoint};
use octoseq::dataset::{read_corpus, write_dataset, DatasetSpec, GeneratorKind, LabelMode};
use octoseq::error::{Error, Result};
use octoseq::export::{export, ExportFormat};
use octoseq::grid::VoxelGrid;
use octoseq::metrics::evaluate_model;
use octoseq::model::Model;
use octoseq::octree::{build_octree, octree_to_voxels};
use octoseq::sampler::{sample_many, superresolve, SampleConfig};
use octoseq::scheme::CompressionScheme;
use octoseq::sequence::{delinearize, linearize, TokenSequence};
use octoseq::stats::{corpus_stats, StatsTable};
use octoseq::training::{train, Example, RunConfig};

/// Autoregressive voxel shape generation over compressed octree sequences.
#[derive(Parser, Debug)]
#[command(name = "octoseq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Voxel grid (.octv) to token sequence text.
    Encode(EncodeArgs),
    /// Token sequence text to voxel grid (.octv).
    Decode(DecodeArgs),
    /// Per-depth token and latent counts of a corpus.
    Stats(StatsArgs),
    /// Write a procedural corpus with a manifest.
    MakeDataset(MakeDatasetArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Sample shapes from a trained model.
    Sample(SampleArgs),
    /// Continue a truncated shape to a finer resolution.
    Upres(UpresArgs),
    /// Coverage and minimum matching distance against a reference corpus.
    Eval(EvalArgs),
    /// Write a grid as an OBJ mesh or PGM slices.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "class")]
    class: Option<u32>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Output resolution; defaults to 2^depth of the sequence.
    #[arg(long)]
    resolution: Option<u32>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "0/1")]
    scheme: String,
    #[arg(long, default_value_t = 90.0)]
    percentile: f64,
}

#[derive(Args, Debug)]
struct MakeDatasetArgs {
    #[arg(long)]
    out: PathBuf,
    /// box, sphere, cylinder, union-1..3 or mixed.
    #[arg(long, default_value = "mixed", value_parser = parse_arg::<GeneratorKind>)]
    kind: GeneratorKind,
    #[arg(long, default_value_t = 16)]
    resolution: u32,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// kind, index or none.
    #[arg(long, default_value = "kind", value_parser = parse_arg::<LabelMode>)]
    labels: LabelMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint written after training.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with [model] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Model depth; defaults to the corpus depth.
    #[arg(long)]
    max_depth: Option<u32>,
    /// Metrics CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SamplingArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// 0 picks the most likely value at every step.
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
    /// Defaults to the model depth.
    #[arg(long)]
    max_depth: Option<u32>,
    #[arg(long = "class")]
    class: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args, Debug)]
struct UpresArgs {
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Grid (.octv) or token sequence text.
    #[arg(long)]
    input: PathBuf,
    /// Levels of the input kept as the prefix.
    #[arg(long)]
    prefix_depth: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Reference corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    multiplier: usize,
    /// Report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    input: PathBuf,
    /// obj or slices.
    #[arg(long, value_parser = parse_arg::<ExportFormat>)]
    format: ExportFormat,
    #[arg(long)]
    out: PathBuf,
}

// Bad enum-like values are usage errors, reported by clap.
fn parse_arg<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Stats(a) => stats(a),
        Command::MakeDataset(a) => make_dataset(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Upres(a) => upres(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export_cmd(a),
    }
}

fn encode(a: EncodeArgs) -> Result<()> {
    let grid = VoxelGrid::read_octv(&a.input)?;
    let mut seq = linearize(&build_octree(&grid)?);
    seq.class_label = a.class;
    fs::write(&a.out, seq.to_text())?;
    Ok(())
}

fn read_sequence(path: &Path) -> Result<TokenSequence> {
    TokenSequence::from_text(&fs::read_to_string(path)?)
}

fn decode(a: DecodeArgs) -> Result<()> {
    let seq = read_sequence(&a.input)?;
    let tree = delinearize(&seq.values())?;
    let res = a.resolution.unwrap_or(1 << tree.depth());
    octree_to_voxels(&tree, res)?.write_octv(&a.out)
}

fn stats(a: StatsArgs) -> Result<()> {
    let scheme = CompressionScheme::parse(&a.scheme)?;
    let grids: Vec<VoxelGrid> = read_corpus(&a.corpus)?.into_iter().map(|s| s.grid).collect();
    let rows = corpus_stats(&grids, &scheme, a.percentile)?;
    print!("{}", StatsTable { rows: &rows, scheme: &scheme });
    Ok(())
}

fn make_dataset(a: MakeDatasetArgs) -> Result<()> {
    let spec = DatasetSpec {
        kind: a.kind,
        resolution: a.resolution,
        count: a.count,
        labels: a.labels,
        seed: a.seed,
    };
    let entries = write_dataset(&a.out, &spec)?;
    println!("wrote {} shapes to {}", entries.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let corpus = read_corpus(&a.corpus)?;
    if let Some(s) = a.scheme {
        cfg.model.scheme = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.model.max_depth = match a.max_depth {
        Some(d) => d,
        None => corpus.iter().map(|s| s.grid.depth()).max().unwrap_or(1),
    };
    // keep one class row free for unconditional use
    if let Some(top) = corpus.iter().filter_map(|s| s.class).max() {
        cfg.model.classes = cfg.model.classes.max(top as usize + 2);
    }
    let data: Vec<Example> = corpus
        .into_iter()
        .map(|s| Example {
            grid: s.grid,
            class: s.class,
        })
        .collect();
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let metrics_path = a.metrics.unwrap_or_else(|| a.out.with_extension("csv"));
    let mut metrics = fs::File::create(&metrics_path)?;
    let report = train(&mut model, &data, &cfg.train, Some(&mut metrics))?;
    save_checkpoint(&model, &a.out)?;
    let last = report.epochs.last().map_or(f64::NAN, |m| m.bits_per_token);
    println!(
        "trained {} steps on {} shapes ({} filtered); final bits/token {last:.4}",
        report.steps, report.kept, report.filtered
    );
    Ok(())
}

fn sample_config(model: &Model, s: &SamplingArgs) -> SampleConfig {
    SampleConfig {
        temperature: s.temperature,
        max_depth: s.max_depth.unwrap_or(model.config.max_depth),
        class: s.class,
        seed: s.seed,
    }
}

fn sample(a: SampleArgs) -> Result<()> {
    let model = load_checkpoint(&a.sampling.checkpoint)?;
    let cfg = sample_config(&model, &a.sampling);
    fs::create_dir_all(&a.out)?;
    for (i, s) in sample_many(&model, &cfg, a.count)?.iter().enumerate() {
        s.grid.write_octv(a.out.join(format!("sample_{i:04}.octv")))?;
        fs::write(a.out.join(format!("sample_{i:04}.txt")), s.sequence.to_text())?;
        if let Some(why) = &s.stopped {
            eprintln!("sample {i}: {why}");
        }
    }
    Ok(())
}

fn upres(a: UpresArgs) -> Result<()> {
    let model = load_checkpoint(&a.sampling.checkpoint)?;
    let cfg = sample_config(&model, &a.sampling);
    let seq = if a.input.extension().is_some_and(|e| e == "octv") {
        linearize(&build_octree(&VoxelGrid::read_octv(&a.input)?)?)
    } else {
        read_sequence(&a.input)?
    };
    if a.prefix_depth == 0 || a.prefix_depth > seq.max_depth() {
        return Err(Error::InvalidArgument(format!(
            "prefix depth {} outside 1..={}",
            a.prefix_depth,
            seq.max_depth()
        )));
    }
    let out = superresolve(&model, &seq.truncated(a.prefix_depth), &cfg)?;
    out.grid.write_octv(&a.out)?;
    if let Some(why) = &out.stopped {
        eprintln!("{why}");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.sampling.checkpoint)?;
    let cfg = sample_config(&model, &a.sampling);
    let reference: Vec<VoxelGrid> = read_corpus(&a.corpus)?.into_iter().map(|s| s.grid).collect();
    let report = evaluate_model(&model, &reference, a.multiplier, &cfg)?;
    println!("{report}");
    if let Some(out) = a.out {
        report.write_csv(fs::File::create(out)?)?;
    }
    Ok(())
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let grid = VoxelGrid::read_octv(&a.input)?;
    export(&grid, a.format, &a.out)?;
    Ok(())
}
