//! `cnnpose`: every stage of the pose-scoring workflow behind one binary.

mod config;

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use cnnpose::corpus::Corpus;
use cnnpose::grid::{rasterize, GridSpec};
use cnnpose::molecule::{parse_ligand, parse_receptor, AtomTypeTable, Vec3};
use cnnpose::network::{load_model, save_model};
use cnnpose::pipeline::{
    compare_methods, optimize_records, read_results, run_pipeline, train_model, write_results, GridConfig,
    ResultRecord,
};
use cnnpose::sampling::{generate_random_set, load_dataset, rmsd_histogram_csv, save_dataset};
use cnnpose::synthetic::{synthetic_corpus, synthetic_training_set};
use cnnpose::gradcheck;

use serde::Serialize;

use config::{ArchFlags, CliConfig, GridFlags, LabelFlags, PoseFlags, SynthFlags, TrainFlags};

#[derive(Debug, Parser)]
#[command(name = "cnnpose", version, about = "CNN pose scoring and gradient-based pose optimization")]
struct Cli {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true, env = "CNNPOSE_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads [default: available cores]
    #[arg(long, global = true, env = "CNNPOSE_WORKERS")]
    workers: Option<usize>,
    /// Seed for every random choice [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log level for standard error: error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedurally generated corpus and, optionally, a labeled training set
    Synth {
        /// Corpus directory to create
        #[arg(long)]
        out: PathBuf,
        /// Also write a training set here
        #[arg(long)]
        training_set: Option<PathBuf>,
        /// Near-crystal training poses per target
        #[arg(long, default_value_t = 20)]
        near: usize,
        /// Uniformly random training poses per target
        #[arg(long, default_value_t = 20)]
        far: usize,
        #[command(flatten)]
        synth: SynthFlags,
        #[command(flatten)]
        labels: LabelFlags,
    },
    /// Rasterize a receptor and ligand into a binary grid dump
    Rasterize {
        #[arg(long)]
        receptor: PathBuf,
        #[arg(long)]
        ligand: PathBuf,
        /// Atom type table [default: built-in heavy-atom types]
        #[arg(long)]
        types: Option<PathBuf>,
        /// Grid center as x,y,z [default: ligand centroid]
        #[arg(long, value_delimiter = ',', num_args = 3)]
        center: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: GridFlags,
    },
    /// Sample uniformly random poses for every target
    Sample {
        /// Corpus directory [config: paths.corpus]
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Poses per target [default: 500]
        #[arg(long)]
        per_target: Option<usize>,
        /// Dataset to write
        #[arg(long)]
        out: PathBuf,
        /// Also write the RMSD histogram as CSV
        #[arg(long)]
        histogram: Option<PathBuf>,
        /// Histogram bin width, Å [default: 0.25]
        #[arg(long)]
        bin_width: Option<f64>,
        #[command(flatten)]
        labels: LabelFlags,
    },
    /// Train a model on a labeled dataset
    Train {
        /// Corpus directory [config: paths.corpus]
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Labeled training poses [config: paths.training_set]
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Model file to write
        #[arg(long)]
        model_out: PathBuf,
        /// Loss trace CSV to write
        #[arg(long)]
        loss_out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        grid: GridFlags,
        #[command(flatten)]
        arch: ArchFlags,
        #[command(flatten)]
        labels: LabelFlags,
    },
    /// Optimize every pose of a dataset against a model
    Optimize {
        /// Corpus directory [config: paths.corpus]
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Model file [config: paths.model]
        #[arg(long)]
        model: Option<PathBuf>,
        /// Poses to optimize [config: paths.random_set]
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Results file to write
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pose: PoseFlags,
        #[command(flatten)]
        labels: LabelFlags,
    },
    /// Train, optimize, extend the training set and repeat
    Pipeline {
        /// Corpus directory [config: paths.corpus]
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Initial labeled training set [config: paths.training_set]
        #[arg(long)]
        training_set: Option<PathBuf>,
        /// Random poses optimized every round [config: paths.random_set]
        #[arg(long)]
        random_set: Option<PathBuf>,
        /// Output and checkpoint directory [config: paths.out_dir]
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Train-then-optimize rounds [default: 2]
        #[arg(long)]
        rounds: Option<usize>,
        /// ΔRMSD histogram bin width, Å [default: 0.25]
        #[arg(long)]
        bin_width: Option<f64>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        grid: GridFlags,
        #[command(flatten)]
        arch: ArchFlags,
        #[command(flatten)]
        pose: PoseFlags,
        #[command(flatten)]
        labels: LabelFlags,
    },
    /// Summarize result sets as report, histogram and scatter CSVs
    Stats {
        /// Result files, as NAME=PATH or PATH (named after the file stem)
        #[arg(long = "results", required = true)]
        results: Vec<String>,
        /// Directory for report.csv, histogram.csv and scatter.csv
        #[arg(long)]
        out_dir: PathBuf,
        /// ΔRMSD histogram bin width, Å [default: 0.25]
        #[arg(long)]
        bin_width: Option<f64>,
        #[command(flatten)]
        labels: LabelFlags,
    },
    /// Check every analytic gradient against finite differences
    Gradcheck {
        /// Also write the suite reports as TOML
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| anyhow!("--{name} is required (or set it under [paths] in the config)"))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(w) = cfg.workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }

    match cli.command {
        Command::Synth { out, training_set, near, far, synth, labels } => {
            synth.apply(&mut cfg.synthetic);
            labels.apply(&mut cfg.thresholds);
            cfg.synthetic.seed = cfg.seed;
            let corpus = synthetic_corpus(&cfg.synthetic)?;
            corpus.save(&out).with_context(|| format!("writing corpus {}", out.display()))?;
            log::info!("wrote {} targets to {}", corpus.targets.len(), out.display());
            if let Some(path) = training_set {
                let set = synthetic_training_set(&corpus, near, far, cfg.seed, &cfg.thresholds)?;
                save_dataset(&set, &path).with_context(|| format!("writing {}", path.display()))?;
                log::info!("wrote {} training poses to {}", set.len(), path.display());
            }
        }
        Command::Rasterize { receptor, ligand, types, center, out, grid } => {
            grid.apply(&mut cfg.grid);
            let table = match types {
                Some(p) => AtomTypeTable::parse(&fs::read_to_string(&p)?)?,
                None => AtomTypeTable::default_heavy_atoms(),
            };
            let rec = parse_receptor(&fs::read_to_string(&receptor)?, &table)
                .with_context(|| format!("reading {}", receptor.display()))?;
            let lig = parse_ligand(&fs::read_to_string(&ligand)?, &table)
                .with_context(|| format!("reading {}", ligand.display()))?;
            let center = center.map(|c| Vec3::new(c[0], c[1], c[2])).unwrap_or_else(|| lig.reference_centroid());
            let spec = GridSpec::new(center, cfg.grid.edge_length, cfg.grid.resolution, table.len())?;
            let g = rasterize(&rec, &lig.reference_coords(), &lig.types(), &table.radii(), &spec)?;
            let mut buf = Vec::new();
            g.write_dump(&mut buf)?;
            write_file(&out, &buf)?;
        }
        Command::Sample { corpus, per_target, out, histogram, bin_width, labels } => {
            labels.apply(&mut cfg.thresholds);
            let corpus = load_corpus(&required(corpus, &cfg.paths.corpus, "corpus")?)?;
            let per_target = per_target.unwrap_or(cfg.sample.per_target);
            let set = generate_random_set(&corpus.targets, per_target, cfg.seed, &cfg.thresholds)?;
            save_dataset(&set, &out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(h) = histogram {
                let width = bin_width.or(cfg.bin_width).unwrap_or(cfg.pipeline().bin_width);
                write_file(&h, rmsd_histogram_csv(&[("random", &set)], width)?.as_bytes())?;
            }
            log::info!("wrote {} poses to {}", set.len(), out.display());
        }
        Command::Train { corpus, dataset, model_out, loss_out, train, grid, arch, labels } => {
            train.apply(&mut cfg.train);
            grid.apply(&mut cfg.grid);
            arch.apply(&mut cfg.architecture);
            labels.apply(&mut cfg.thresholds);
            let corpus = load_corpus(&required(corpus, &cfg.paths.corpus, "corpus")?)?;
            let dataset = required(dataset, &cfg.paths.training_set, "dataset")?;
            let records = load_dataset(&dataset, &cfg.thresholds).with_context(|| format!("reading {}", dataset.display()))?;
            let pc = cfg.pipeline();
            pc.train.validate()?;
            let (model, trace) = train_model(&corpus, &records, &pc, cfg.seed)?;
            save_model(&model, &model_out).with_context(|| format!("writing {}", model_out.display()))?;
            if let Some(p) = loss_out {
                write_file(&p, trace.to_csv().as_bytes())?;
            }
        }
        Command::Optimize { corpus, model, dataset, out, pose, labels } => {
            pose.apply(&mut cfg);
            labels.apply(&mut cfg.thresholds);
            let corpus = load_corpus(&required(corpus, &cfg.paths.corpus, "corpus")?)?;
            let model_path = required(model, &cfg.paths.model, "model")?;
            let model = load_model(&model_path, Some(corpus.types.len()))
                .with_context(|| format!("reading {}", model_path.display()))?;
            let dataset = required(dataset, &cfg.paths.random_set, "dataset")?;
            let poses = load_dataset(&dataset, &cfg.thresholds).with_context(|| format!("reading {}", dataset.display()))?;
            let mut pc = cfg.pipeline();
            pc.pose.bfgs.validate()?;
            let spec = model.grid_spec();
            pc.grid = GridConfig { edge_length: spec.edge_length, resolution: spec.resolution };
            let results = optimize_records(&model, &corpus, &poses, &pc)?;
            let mut buf = Vec::new();
            write_results(&results, &mut buf)?;
            write_file(&out, &buf)?;
        }
        Command::Pipeline { corpus, training_set, random_set, out_dir, rounds, bin_width, train, grid, arch, pose, labels } => {
            train.apply(&mut cfg.train);
            grid.apply(&mut cfg.grid);
            arch.apply(&mut cfg.architecture);
            pose.apply(&mut cfg);
            labels.apply(&mut cfg.thresholds);
            if rounds.is_some() {
                cfg.rounds = rounds;
            }
            if bin_width.is_some() {
                cfg.bin_width = bin_width;
            }
            let corpus = load_corpus(&required(corpus, &cfg.paths.corpus, "corpus")?)?;
            let ts = required(training_set, &cfg.paths.training_set, "training-set")?;
            let rs = required(random_set, &cfg.paths.random_set, "random-set")?;
            let out_dir = required(out_dir, &cfg.paths.out_dir, "out-dir")?;
            let training = load_dataset(&ts, &cfg.thresholds).with_context(|| format!("reading {}", ts.display()))?;
            let random = load_dataset(&rs, &cfg.thresholds).with_context(|| format!("reading {}", rs.display()))?;
            let output = run_pipeline(&cfg.pipeline(), &corpus, &training, &random, Some(&out_dir))?;
            let mut err = std::io::stderr().lock();
            for r in &output.comparison.reports {
                for row in &r.rows {
                    writeln!(
                        err,
                        "{} {:<11} n={:<5} mean={} sigma={}",
                        r.method,
                        row.category.as_str(),
                        row.n,
                        row.mean.map_or("-".into(), |v| format!("{v:.3}")),
                        row.sigma.map_or("-".into(), |v| format!("{v:.3}")),
                    )?;
                }
            }
        }
        Command::Stats { results, out_dir, bin_width, labels } => {
            labels.apply(&mut cfg.thresholds);
            let width = bin_width.or(cfg.bin_width).unwrap_or(cfg.pipeline().bin_width);
            let mut sets: Vec<(String, Vec<ResultRecord>)> = Vec::new();
            for spec in results {
                let (name, path) = match spec.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(&spec);
                        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(spec);
                        (stem, p)
                    }
                };
                let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                let records = read_results(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
                sets.push((name, records));
            }
            let cmp = compare_methods(&sets, &cfg.thresholds, width)?;
            write_file(&out_dir.join("report.csv"), cmp.report_csv.as_bytes())?;
            write_file(&out_dir.join("histogram.csv"), cmp.histogram_csv.as_bytes())?;
            write_file(&out_dir.join("scatter.csv"), cmp.scatter_csv.as_bytes())?;
        }
        Command::Gradcheck { out } => {
            let reports = gradcheck::run_all(cfg.seed)?;
            let mut stdout = std::io::stdout().lock();
            for r in &reports {
                writeln!(
                    stdout,
                    "{} {:<8} cases={:<5} checks={:<6} max_rel_error={:.3e} tolerance={:.0e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.cases,
                    r.checks,
                    r.max_relative_error,
                    r.tolerance
                )?;
            }
            if let Some(p) = out {
                let text = toml::to_string(&Reports { suite: reports.clone() })?;
                write_file(&p, text.as_bytes())?;
            }
            if reports.iter().any(|r| !r.passed) {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Reports {
    suite: Vec<gradcheck::SuiteReport>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .parse_env("RUST_LOG")
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // single line: the context chain joined
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
