use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ambc::bench::{self, Detector, SweepSpec, TrainBudget};
use ambc::cmnet::CmnetArch;
use ambc::dtl::{self, Stage};
use ambc::features::{build_source_dataset, Dataset};
use ambc::rng::{derive_seed, tag};
use ambc::sysmodel::{Frame, SystemParams};
use ambc::{Error, Result};

#[derive(Parser)]
#[command(name = "ambc", version, about = "Ambient backscatter tag detection experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Master seed; overrides the seed in the config or sweep file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Feed raw SCMs to the network instead of trace-normalized ones.
    #[arg(long, global = true)]
    no_normalize: bool,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// adam or sgd
    #[arg(long, default_value = "adam")]
    optimizer: String,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save a source-domain training set.
    GenDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network from scratch on a saved dataset.
    TrainOffline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Fine-tune the dense layers on the pilots of one generated frame.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frame_seed: u64,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Size of the bootstrapped pilot set.
        #[arg(long, default_value_t = 2000)]
        k_t: usize,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Detect the data symbols of one generated frame.
    Detect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frame_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a BER sweep and write one CSV row per detector and axis value.
    BerSweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of lrt,ed,cmnet,cmnet-pre.
        #[arg(long)]
        detectors: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

/// An unreadable config file is a configuration problem, not a runtime one.
fn as_config_error(e: Error) -> Error {
    match e {
        Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
        other => other,
    }
}

fn load_config(path: &Path, global: &Global) -> Result<SystemParams> {
    let mut params = SystemParams::load(path).map_err(as_config_error)?;
    if let Some(seed) = global.seed {
        params.seed = seed;
    }
    Ok(params)
}

fn budget(train: &TrainFlags, epochs: usize, k_t: usize) -> TrainBudget {
    TrainBudget {
        i_s: epochs,
        i_t: epochs,
        k_t,
        batch_size: train.batch_size,
        learning_rate: train.learning_rate,
        optimizer: train.optimizer.clone(),
        ..TrainBudget::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if g.workers > 0 && !matches!(cli.command, Command::BerSweep { .. }) {
        // ignore failure: the pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(g.workers).build_global();
    }
    let normalize = !g.no_normalize;
    match &cli.command {
        Command::GenDataset { config, k, out } => {
            let params = load_config(config, g)?;
            if *k == 0 {
                return Err(Error::Config("--k must be positive".into()));
            }
            let d_s = build_source_dataset(&params, *k, normalize, derive_seed(params.seed, &[tag::SOURCE_DATASET]))?;
            d_s.save(out)?;
            println!("wrote {} examples ({} ones) to {}", d_s.len(), d_s.count_ones(), out.display());
        }
        Command::TrainOffline { config, dataset, epochs, out, train } => {
            let params = load_config(config, g)?;
            let d_s = Dataset::load(dataset)?;
            if d_s.m() != params.m {
                return Err(Error::Config(format!(
                    "dataset has M = {} but the config has M = {}",
                    d_s.m(),
                    params.m
                )));
            }
            let b = budget(train, *epochs, 1);
            let cfg = b.offline_config(derive_seed(params.seed, &[tag::OFFLINE_TRAIN]))?;
            cfg.validate()?;
            let (model, report) = dtl::offline_learn(&d_s, &CmnetArch::for_antennas(params.m), &cfg)?;
            dtl::save_model(&model, out)?;
            println!("final loss {:.6}; model written to {}", report.final_loss(), out.display());
        }
        Command::Transfer { config, model, frame_seed, epochs, out, k_t, train } => {
            let params = load_config(config, g)?;
            let pre = dtl::load_model(model)?;
            pre.params.check_arch(&CmnetArch::for_antennas(params.m))?;
            if pre.stage != Stage::Pretrained {
                return Err(Error::Config("transfer needs a pretrained model".into()));
            }
            let b = budget(train, *epochs, *k_t);
            b.transfer_config(0)?.validate()?;
            let frame = Frame::draw(&params, *frame_seed)?;
            let tuned = bench::transfer_for_frame(&pre, &frame, *frame_seed, &b)?;
            dtl::save_model(&tuned, out)?;
            println!("transferred model written to {}", out.display());
        }
        Command::Detect { config, model, frame_seed, out } => {
            let params = load_config(config, g)?;
            let m = dtl::load_model(model)?;
            m.params.check_arch(&CmnetArch::for_antennas(params.m))?;
            let frame = Frame::draw(&params, *frame_seed)?;
            let decisions = dtl::detect_batch(&m, frame.data())?;
            let mut csv = String::from("frame_id,symbol_index,decision,truth\n");
            let mut errors = 0;
            for (i, (d, s)) in decisions.iter().zip(frame.data()).enumerate() {
                errors += (*d != s.label) as usize;
                let _ = writeln!(csv, "{frame_seed},{},{d},{}", params.p_pilots + i, s.label);
            }
            std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
            println!("{errors} errors in {} data symbols", decisions.len());
        }
        Command::BerSweep { spec, out, detectors, trials } => {
            let mut s = SweepSpec::load(spec).map_err(as_config_error)?;
            if let Some(list) = detectors {
                s.detectors = Detector::parse_list(list)?.iter().map(|d| d.id().to_string()).collect();
            }
            if let Some(t) = trials {
                s.trials = *t;
            }
            if let Some(seed) = g.seed {
                s.system.seed = seed;
            }
            if g.workers > 0 {
                s.workers = g.workers;
            }
            if g.no_normalize {
                s.normalize = false;
            }
            s.validate()?;
            let points = bench::run_sweep(&s)?;
            bench::emit_csv(&points, out)?;
            let meta = PathBuf::from(format!("{}.meta.toml", out.display()));
            std::fs::write(&meta, bench::sweep_metadata(&s)).map_err(|e| Error::io(&meta, e))?;
            for p in &points {
                log::info!("{} {}={} ber={:.4e} ({:.1}s)", p.detector, p.axis, p.axis_value, p.ber, p.wallclock_s);
            }
            println!("{} points written to {}", points.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
