mod runlog;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use dfm_upscale::bench::{self, SweepParam};
use dfm_upscale::config::RunConfig;
use dfm_upscale::dataset::{generate_dataset, write_json, DatasetReader, TensorSet};
use dfm_upscale::frac_geom::{generate_dfn, write_network_csv, NetworkSidecar};
use dfm_upscale::homogenizer::{block_tensors, upscale_domain, write_blocks_csv, BlockBackend, NumericBackend};
use dfm_upscale::random_field::{sample_tensor_field, save_field, FieldHeader, Grid};
use dfm_upscale::rng::substream_seed;
use dfm_upscale::surrogate::{write_history, SurrogateBackend};
use dfm_upscale::{Error, SurrogateModel};

#[derive(Parser, Debug)]
#[command(name = "dfmup", version, about = "Fracture-aware conductivity upscaling with a CNN surrogate")]
struct Cli {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Size of the worker pool (defaults to the number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Debug-level run log.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw one fracture network on the extended domain.
    GenerateDfn {
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Draw one conductivity tensor field on the original domain.
    GenerateSrf,
    /// Numeric equivalent tensors of every block of one sample.
    Homogenize(SampleArgs),
    /// Generate a training dataset of rasters and block tensors.
    BuildDataset,
    /// Train the surrogate on a generated dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score a checkpoint on one split of a dataset.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Upscale one sample onto the coarse grid.
    Upscale {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long, value_enum, default_value_t = BackendName::Numeric)]
        backend: BackendName,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Aquifer outflow on coarse models from two backends.
    BenchAquifer(BenchArgs),
    /// Whole-domain equivalent tensor on coarse models from two backends.
    BenchAnisotropy(BenchArgs),
    /// Time numeric block solves against rasterization plus inference.
    BenchSpeedup {
        #[arg(long, default_value_t = 225)]
        blocks: usize,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
    },
    /// Surrogate accuracy across values of one generation parameter.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Index of the generated sample.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Use a saved field (`<stem>.json` + `<stem>.bin`) instead of generating one.
    #[arg(long, requires = "dfn")]
    field: Option<PathBuf>,
    /// Fracture CSV to pair with `--field`.
    #[arg(long, requires = "field")]
    dfn: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [BackendName::Numeric, BackendName::Surrogate])]
    backends: Vec<BackendName>,
    #[arg(long)]
    model: Option<PathBuf>,
}

impl BenchArgs {
    fn pair(&self, cfg: &RunConfig) -> CliResult<(Box<dyn BlockBackend>, Box<dyn BlockBackend>)> {
        let [a, b] = self.backends[..] else {
            return Err(Error::InvalidArgument(format!("--backends takes two names, got {}", self.backends.len())).into());
        };
        Ok((backend(cfg, a, self.model.as_deref())?, backend(cfg, b, self.model.as_deref())?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackendName {
    Numeric,
    Surrogate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    MissingInput(PathBuf),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(Error::Csv(e))
    }
}

impl CliError {
    fn report(&self) -> serde_json::Value {
        match self {
            CliError::Core(e) => json!({ "error": e.kind(), "message": e.to_string() }),
            CliError::MissingInput(p) => {
                json!({ "error": "missing_input", "message": format!("input path {} does not exist", p.display()) })
            }
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Artifact metadata written next to every output.
#[derive(Serialize)]
struct Sidecar<'a, T: Serialize> {
    command: &'a str,
    config_hash: String,
    master_seed: u64,
    #[serde(flatten)]
    body: T,
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    command: &'static str,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn sidecar<T: Serialize>(&self, name: &str, body: T) -> CliResult<()> {
        let s = Sidecar { command: self.command, config_hash: self.cfg.hash(), master_seed: self.cfg.seeds.master, body };
        Ok(write_json(&self.path(name), &s)?)
    }

    fn csv(&self, name: &str) -> CliResult<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn load_model(path: Option<&Path>) -> CliResult<SurrogateModel> {
    let path = path.ok_or_else(|| Error::BackendUnavailable("surrogate requested without --model checkpoint".into()))?;
    require(&path.join("model.json"))?;
    Ok(SurrogateModel::load(path)?)
}

fn backend(cfg: &RunConfig, name: BackendName, model: Option<&Path>) -> CliResult<Box<dyn BlockBackend>> {
    Ok(match name {
        BackendName::Numeric => Box::new(NumericBackend { resolution: cfg.solver.resolution, solver: cfg.solver.options }),
        BackendName::Surrogate => Box::new(SurrogateBackend { model: load_model(model)? }),
    })
}

fn macro_sample(run: &Run, args: &SampleArgs) -> CliResult<bench::MacroSample> {
    let grid = run.cfg.block_grid()?;
    match (&args.field, &args.dfn) {
        (Some(stem), Some(dfn)) => {
            require(&stem.with_extension("json"))?;
            require(dfn)?;
            let (field, _) = dfm_upscale::random_field::load_field(stem)?;
            let fractures = dfm_upscale::frac_geom::read_network_csv(File::open(dfn)?)?;
            Ok(bench::MacroSample { field, fractures, grid })
        }
        _ => Ok(bench::draw_macro_sample(&run.cfg, &grid, args.sample)?),
    }
}

fn split_indices(reader: &DatasetReader, split: SplitName) -> &[usize] {
    let s = &reader.manifest.split;
    match split {
        SplitName::Train => &s.train,
        SplitName::Val => &s.val,
        SplitName::Test => &s.test,
    }
}

fn open_dataset(dir: &Path) -> CliResult<DatasetReader> {
    require(&dir.join("manifest.json"))?;
    let reader = DatasetReader::open(dir)?;
    reader.verify()?;
    Ok(reader)
}

fn execute(run: &Run, command: &Command) -> CliResult<()> {
    let cfg = &run.cfg;
    match command {
        Command::GenerateDfn { index } => {
            let domain = cfg.block_grid()?.extended;
            let seed = substream_seed(cfg.seed("dfn"), "cli.dfn", *index);
            let net = generate_dfn(&cfg.dfn, domain, seed)?;
            write_network_csv(&net, run.csv("dfn.csv")?)?;
            let count = net.len();
            log::info!("{count} fractures on {domain:?}");
            run.sidecar("dfn.json", NetworkSidecar { spec: cfg.dfn.clone(), domain, seed, count })?;
        }
        Command::GenerateSrf => {
            let seed = cfg.seed("srf");
            let grid = Grid::covering(&cfg.original_domain(), cfg.srf.grid)?;
            let field = sample_tensor_field(&grid, &cfg.srf.params(), seed)?;
            save_field(&run.path("field"), &field, &FieldHeader::for_field(&field, Some(cfg.srf.params()), Some(seed)))?;
            run.sidecar("srf.json", json!({ "seed": seed, "cells": grid.len() }))?;
        }
        Command::Homogenize(args) => {
            let s = macro_sample(run, args)?;
            let numeric = NumericBackend { resolution: cfg.solver.resolution, solver: cfg.solver.options };
            let blocks = block_tensors(&s.field, &s.fractures, &s.grid, &numeric, cfg.blocks.threshold)?;
            write_blocks_csv(&s.grid, &blocks, run.csv("blocks.csv")?)?;
            let non_spd = blocks.iter().filter(|b| !b.positive_definite).count();
            log::info!("{} blocks homogenized, {non_spd} not SPD", blocks.len());
            run.sidecar(
                "homogenize.json",
                json!({ "sample": args.sample, "blocks": blocks.len(), "block_size": s.grid.block_size, "non_spd": non_spd, "scheme": dfm_upscale::SCHEME }),
            )?;
        }
        Command::BuildDataset => {
            let dir = run.path("dataset");
            let m = generate_dataset(&cfg.dataset_config(), cfg.seed("dataset"), &dir, &cfg.solver.options)?;
            log::info!("{} samples ({} skipped) in {}", m.n_samples, m.skipped, dir.display());
            run.sidecar("build-dataset.json", json!({ "dataset": dir, "dataset_config_hash": m.config_hash, "stats_hash": m.stats_hash }))?;
        }
        Command::Train { dataset } => {
            let reader = open_dataset(dataset)?;
            let stats = reader.manifest.stats.clone();
            let s = &reader.manifest.split;
            let train = TensorSet::load(&reader, &s.train, &stats)?;
            let val = TensorSet::load(&reader, &s.val, &stats)?;
            let mut model = SurrogateModel::new(&cfg.architecture()?, stats, cfg.seed("surrogate.init"))?;
            let report = model.train(&train, &val, &cfg.train.schedule(), cfg.seed("surrogate.train"), |_| {})?;
            model.save(&run.path("model"))?;
            write_history(&report.history, run.csv("history.csv")?)?;
            run.sidecar(
                "train.json",
                json!({ "dataset": dataset, "best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss, "parameters": model.network.parameter_count() }),
            )?;
        }
        Command::Evaluate { dataset, model, split } => {
            let reader = open_dataset(dataset)?;
            let model = load_model(Some(model))?;
            let set = TensorSet::load(&reader, split_indices(&reader, *split), &model.stats)?;
            let eval = model.evaluate(&set)?;
            let mut w = csv::Writer::from_writer(run.csv("predictions.csv")?);
            w.write_record(["index", "z_xx", "z_xy", "z_yy", "t_xx", "t_xy", "t_yy"])?;
            for ((i, p), t) in split_indices(&reader, *split).iter().zip(&eval.predictions).zip(&set.targets) {
                let mut row = vec![i.to_string()];
                row.extend(p.iter().chain(t).map(|v| format!("{v:e}")));
                w.write_record(row)?;
            }
            w.flush()?;
            log::info!("mean R2 {:.4} (standardized)", eval.standardized.mean_r2);
            run.sidecar(
                "evaluation.json",
                json!({ "split": format!("{split:?}").to_lowercase(), "samples": set.len(), "loss": eval.loss, "standardized": eval.standardized, "raw": eval.raw }),
            )?;
        }
        Command::Upscale { sample, backend: name, model } => {
            let b = backend(cfg, *name, model.as_deref())?;
            let s = macro_sample(run, sample)?;
            let up = upscale_domain(&s.field, &s.fractures, &s.grid, b.as_ref(), cfg.blocks.threshold, cfg.blocks.coarse)?;
            write_blocks_csv(&s.grid, &up.blocks, run.csv("blocks.csv")?)?;
            save_field(&run.path("coarse"), &up.coarse, &FieldHeader::for_field(&up.coarse, None, None))?;
            run.sidecar("upscale.json", json!({ "sample": sample.sample, "backend": b.name(), "projected": up.projected }))?;
        }
        Command::BenchAquifer(args) => {
            let (a, b) = args.pair(cfg)?;
            let rep = bench::bench_aquifer(cfg, args.samples, a.as_ref(), b.as_ref())?;
            let mut w = csv::Writer::from_writer(run.csv("aquifer.csv")?);
            w.write_record(["sample", "y_a", "y_b", "kx_a", "kx_b"])?;
            for r in &rep.rows {
                w.write_record([r.sample.to_string(), format!("{:e}", r.y[0]), format!("{:e}", r.y[1]), format!("{:e}", r.kx[0]), format!("{:e}", r.kx[1])])?;
            }
            w.flush()?;
            log::info!("aquifer R2 {:?}", rep.r2);
            write_json(&run.path("aquifer.json"), &rep)?;
        }
        Command::BenchAnisotropy(args) => {
            let (a, b) = args.pair(cfg)?;
            let rep = bench::bench_anisotropy(cfg, args.samples, a.as_ref(), b.as_ref())?;
            let mut w = csv::Writer::from_writer(run.csv("anisotropy.csv")?);
            w.write_record(["sample", "kxx_a", "kxy_a", "kyy_a", "kxx_b", "kxy_b", "kyy_b"])?;
            for r in &rep.rows {
                let mut row = vec![r.sample.to_string()];
                row.extend(r.k.iter().flatten().map(|v| format!("{v:e}")));
                w.write_record(row)?;
            }
            w.flush()?;
            log::info!("anisotropy metrics {:?}", rep.metrics);
            write_json(&run.path("anisotropy.json"), &rep)?;
        }
        Command::BenchSpeedup { blocks, model, repetitions } => {
            let model = load_model(model.as_deref())?;
            let rep = bench::bench_speedup(cfg, &model, *blocks, *repetitions)?;
            log::info!("C_H/C_S = {:.3} on {} blocks", rep.ratio, rep.blocks);
            write_json(&run.path("speedup.json"), &rep)?;
        }
        Command::Sweep { param, values, model, samples } => {
            let param = SweepParam::parse(param)?;
            let model = load_model(model.as_deref())?;
            let rows = bench::sweep(cfg, &model, param, values, *samples)?;
            let mut w = csv::Writer::from_writer(run.csv("sweep.csv")?);
            w.write_record(["value", "samples", "r2_xx", "r2_xy", "r2_yy", "mean_r2", "nrmse_xx", "nrmse_xy", "nrmse_yy"])?;
            for r in &rows {
                let m = &r.standardized;
                let mut row = vec![format!("{}", r.value), r.samples.to_string()];
                row.extend(m.r2.iter().chain([&m.mean_r2]).chain(&m.nrmse).map(|v| format!("{v:e}")));
                w.write_record(row)?;
            }
            w.flush()?;
            run.sidecar("sweep.json", json!({ "rows": rows }))?;
        }
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenerateDfn { .. } => "generate-dfn",
        Command::GenerateSrf => "generate-srf",
        Command::Homogenize(_) => "homogenize",
        Command::BuildDataset => "build-dataset",
        Command::Train { .. } => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Upscale { .. } => "upscale",
        Command::BenchAquifer(_) => "bench-aquifer",
        Command::BenchAnisotropy(_) => "bench-anisotropy",
        Command::BenchSpeedup { .. } => "bench-speedup",
        Command::Sweep { .. } => "sweep",
    }
}

fn setup(cli: &Cli) -> CliResult<Run> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds.master = seed;
    }
    cfg.validate()?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::InvalidArgument("--workers must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    }
    fs::create_dir_all(&cli.out)?;
    runlog::install(File::create(cli.out.join("run.log"))?, cli.verbose);
    let run = Run { cfg, out: cli.out.clone(), command: command_name(&cli.command) };
    write_json(&run.path("config.resolved.json"), &run.cfg)?;
    let seeds: serde_json::Map<String, serde_json::Value> = [
        "dfn", "srf", "dataset", "surrogate.init", "surrogate.train",
    ]
    .iter()
    .map(|s| (s.to_string(), json!(run.cfg.seed(s))))
    .collect();
    log::info!(
        "{}",
        json!({ "command": run.command, "config_hash": run.cfg.hash(), "master_seed": run.cfg.seeds.master, "stage_seeds": seeds, "workers": rayon::current_num_threads() })
    );
    Ok(run)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(2);
        }
    };
    let result = setup(&cli).and_then(|run| {
        let r = execute(&run, &cli.command);
        if r.is_ok() {
            log::info!("{} finished", run.command);
        }
        r
    });
    let code = match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = e.report();
            log::error!("{report}");
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    };
    runlog::flush();
    code
}
