//! Monte Carlo bit-error-rate harness.
//!
//! A point draws `ceil(trials / (T - P))` independent frames. Each frame gets
//! its own seed derived from the point seed and the frame index, so error
//! counts do not depend on how frames are spread over worker threads. The
//! offline network is trained once per point and transfer learning runs on
//! every frame's own pilots. Pilot symbols are never counted.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::classical;
use crate::cmnet::{CmnetArch, Optimizer, TrainConfig};
use crate::dtl::{self, DetectorModel};
use crate::error::{Error, Result};
use crate::features::{build_source_dataset, build_target_dataset, Augmentation};
use crate::rng::{derive_seed, tag};
use crate::sysmodel::{Frame, SystemParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Detector {
    Lrt,
    Ed,
    Cmnet,
    /// The offline network without transfer, for ablation.
    CmnetPretrained,
}

impl Detector {
    pub fn id(self) -> &'static str {
        match self {
            Detector::Lrt => "lrt",
            Detector::Ed => "ed",
            Detector::Cmnet => "cmnet",
            Detector::CmnetPretrained => "cmnet-pre",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "lrt" => Ok(Detector::Lrt),
            "ed" => Ok(Detector::Ed),
            "cmnet" => Ok(Detector::Cmnet),
            "cmnet-pre" => Ok(Detector::CmnetPretrained),
            other => Err(Error::Config(format!("unknown detector {other:?}"))),
        }
    }

    /// Parses a comma-separated list, rejecting empty and duplicate entries.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let list = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(Detector::parse)
            .collect::<Result<Vec<_>>>()?;
        validate_detectors(&list)?;
        Ok(list)
    }

    fn needs_network(self) -> bool {
        matches!(self, Detector::Cmnet | Detector::CmnetPretrained)
    }
}

fn validate_detectors(list: &[Detector]) -> Result<()> {
    if list.is_empty() {
        return Err(Error::Config("at least one detector is required".into()));
    }
    let mut sorted = list.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != list.len() {
        return Err(Error::Config("duplicate detector".into()));
    }
    Ok(())
}

/// Training sizes and optimizer settings for the network detectors.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBudget {
    pub k_s: usize,
    pub k_t: usize,
    pub i_s: usize,
    pub i_t: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: String,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self {
            k_s: 20_000,
            k_t: 2_000,
            i_s: 30,
            i_t: 60,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: "adam".into(),
        }
    }
}

impl TrainBudget {
    fn optimizer(&self) -> Result<Optimizer> {
        Optimizer::parse(&self.optimizer)
            .ok_or_else(|| Error::Config(format!("unknown optimizer {:?}", self.optimizer)))
    }

    pub fn offline_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.i_s,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            freeze_conv: false,
            seed,
            optimizer: self.optimizer()?,
        })
    }

    pub fn transfer_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.i_t,
            freeze_conv: true,
            ..self.offline_config(seed)?
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_s < 2 || self.k_t < 1 {
            return Err(Error::Config("k_s must be at least 2 and k_t at least 1".into()));
        }
        self.offline_config(0)?.validate()?;
        self.transfer_config(0)?.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointOptions {
    pub detectors: Vec<Detector>,
    pub budget: TrainBudget,
    /// Minimum number of decided data symbols.
    pub trials: usize,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    pub normalize: bool,
}

/// One Monte Carlo measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct BerPoint {
    pub detector: String,
    pub axis: String,
    pub axis_value: f64,
    pub ber: f64,
    pub errors: u64,
    pub trials: u64,
    pub stderr: f64,
    pub seed: u64,
    pub wallclock_s: f64,
}

impl BerPoint {
    fn new(detector: Detector, axis: &str, axis_value: f64, errors: u64, trials: u64, seed: u64) -> Self {
        let ber = errors as f64 / trials as f64;
        Self {
            detector: detector.id().into(),
            axis: axis.into(),
            axis_value,
            ber,
            errors,
            trials,
            stderr: binomial_stderr(ber, trials),
            seed,
            wallclock_s: 0.0,
        }
    }
}

pub fn binomial_stderr(ber: f64, trials: u64) -> f64 {
    (ber * (1.0 - ber) / trials as f64).sqrt()
}

/// Error counts of one frame, in `PointOptions::detectors` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub frame: usize,
    pub symbols: u64,
    pub errors: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct PointRun {
    pub points: Vec<BerPoint>,
    pub frames: Vec<FrameOutcome>,
    /// Final-epoch loss of the offline network, when one was trained.
    pub offline_loss: Option<f64>,
}

impl PointRun {
    pub fn point(&self, d: Detector) -> Option<&BerPoint> {
        self.points.iter().find(|p| p.detector == d.id())
    }
}

/// Seed of frame `index` at a point.
pub fn frame_seed(point_seed: u64, index: usize) -> u64 {
    derive_seed(point_seed, &[tag::FRAME, index as u64])
}

/// Offline stage for one operating point: source set and pretrained network.
pub fn pretrain_for_point(
    params: &SystemParams,
    budget: &TrainBudget,
    normalize: bool,
) -> Result<(DetectorModel, f64)> {
    let d_s = build_source_dataset(
        params,
        budget.k_s,
        normalize,
        derive_seed(params.seed, &[tag::SOURCE_DATASET]),
    )?;
    let cfg = budget.offline_config(derive_seed(params.seed, &[tag::OFFLINE_TRAIN]))?;
    let (model, report) = dtl::offline_learn(&d_s, &CmnetArch::for_antennas(params.m), &cfg)?;
    Ok((model, report.final_loss()))
}

/// Transfer step for one frame, seeded from the frame seed.
pub fn transfer_for_frame(
    pretrained: &DetectorModel,
    frame: &Frame,
    frame_seed: u64,
    budget: &TrainBudget,
) -> Result<DetectorModel> {
    let d_t = build_target_dataset(
        frame.pilots(),
        budget.k_t.max(frame.pilots().len()),
        pretrained.normalize,
        Augmentation::Bootstrap,
        derive_seed(frame_seed, &[tag::TARGET_DATASET]),
    )?;
    let cfg = budget.transfer_config(derive_seed(frame_seed, &[tag::TRANSFER_TRAIN]))?;
    Ok(dtl::transfer_learn(pretrained, &d_t, &cfg)?.0)
}

fn count_errors(decisions: &[u8], frame: &Frame) -> u64 {
    decisions
        .iter()
        .zip(frame.data())
        .filter(|(d, s)| **d != s.label)
        .count() as u64
}

fn run_frame(
    params: &SystemParams,
    index: usize,
    opts: &PointOptions,
    pretrained: Option<&DetectorModel>,
    timings: &[std::sync::atomic::AtomicU64],
) -> Result<FrameOutcome> {
    let seed = frame_seed(params.seed, index);
    let frame = Frame::draw(params, seed)?;
    let data = frame.data();
    let mut errors = Vec::with_capacity(opts.detectors.len());
    for (slot, &det) in opts.detectors.iter().enumerate() {
        let start = Instant::now();
        let decisions: Vec<u8> = match det {
            Detector::Lrt => {
                let ctx = classical::lrt_context(&frame.channel)?;
                data.iter()
                    .map(|s| classical::lrt_statistic(&s.x, &ctx).map(classical::lrt_decide))
                    .collect::<Result<_>>()?
            }
            Detector::Ed => {
                let ctx = classical::ed_context(&frame.channel, params.n_str)?;
                data.iter().map(|s| classical::ed_decide(&s.x, &ctx)).collect()
            }
            Detector::Cmnet => {
                let pre = pretrained.expect("network trained for cmnet");
                let model = transfer_for_frame(pre, &frame, seed, &opts.budget)?;
                dtl::detect_batch(&model, data)?
            }
            Detector::CmnetPretrained => {
                dtl::detect_batch(pretrained.expect("network trained for cmnet-pre"), data)?
            }
        };
        timings[slot].fetch_add(
            start.elapsed().as_micros() as u64,
            std::sync::atomic::Ordering::Relaxed,
        );
        errors.push(count_errors(&decisions, &frame));
    }
    Ok(FrameOutcome {
        frame: index,
        symbols: data.len() as u64,
        errors,
    })
}

/// Runs every selected detector over the same frames at one operating point.
pub fn run_point(
    params: &SystemParams,
    axis: &str,
    axis_value: f64,
    opts: &PointOptions,
) -> Result<PointRun> {
    params.validate()?;
    validate_detectors(&opts.detectors)?;
    if opts.trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let wants_net = opts.detectors.iter().any(|d| d.needs_network());
    let mut offline_secs = 0.0;
    let (pretrained, offline_loss) = if wants_net {
        opts.budget.validate()?;
        let start = Instant::now();
        let (model, loss) = pretrain_for_point(params, &opts.budget, opts.normalize)?;
        offline_secs = start.elapsed().as_secs_f64();
        (Some(model), Some(loss))
    } else {
        (None, None)
    };

    let n_frames = opts.trials.div_ceil(params.data_symbols());
    let timings: Vec<std::sync::atomic::AtomicU64> =
        opts.detectors.iter().map(|_| Default::default()).collect();
    let work = || {
        (0..n_frames)
            .into_par_iter()
            .map(|i| run_frame(params, i, opts, pretrained.as_ref(), &timings))
            .collect::<Result<Vec<_>>>()
    };
    let frames = if opts.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work)?
    } else {
        work()?
    };

    let symbols: u64 = frames.iter().map(|f| f.symbols).sum();
    let points = opts
        .detectors
        .iter()
        .enumerate()
        .map(|(slot, &det)| {
            let errors = frames.iter().map(|f| f.errors[slot]).sum();
            let mut p = BerPoint::new(det, axis, axis_value, errors, symbols, params.seed);
            p.wallclock_s = timings[slot].load(std::sync::atomic::Ordering::Relaxed) as f64 * 1e-6
                + if det.needs_network() { offline_secs } else { 0.0 };
            p
        })
        .collect();
    Ok(PointRun {
        points,
        frames,
        offline_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SnrDb,
    ZetaDb,
    Antennas,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::SnrDb => "snr_db",
            SweepAxis::ZetaDb => "zeta_db",
            SweepAxis::Antennas => "antennas",
        }
    }

    /// `base` moved to `value` along this axis.
    pub fn apply(self, base: &SystemParams, value: f64) -> Result<SystemParams> {
        let mut p = base.clone();
        match self {
            SweepAxis::SnrDb => p.snr_db = value,
            SweepAxis::ZetaDb => p.zeta_db = value,
            SweepAxis::Antennas => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("antenna count {value} is not a positive integer")));
                }
                p.m = value as usize;
            }
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub detectors: Vec<String>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_true")]
    pub normalize: bool,
    pub system: SystemParams,
    #[serde(default)]
    pub budget: TrainBudget,
}

fn default_trials() -> usize {
    10_000
}

fn default_true() -> bool {
    true
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn detector_list(&self) -> Result<Vec<Detector>> {
        let list = self
            .detectors
            .iter()
            .map(|s| Detector::parse(s))
            .collect::<Result<Vec<_>>>()?;
        validate_detectors(&list)?;
        Ok(list)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep values must not be empty".into()));
        }
        if self.values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("sweep values must be strictly increasing".into()));
        }
        if self.trials < 1000 {
            return Err(Error::Config(format!("trials = {} is below 1000", self.trials)));
        }
        let dets = self.detector_list()?;
        for &v in &self.values {
            self.axis.apply(&self.system, v)?;
        }
        if dets.iter().any(|d| d.needs_network()) {
            self.budget.validate()?;
        }
        Ok(())
    }

    pub fn point_options(&self) -> Result<PointOptions> {
        Ok(PointOptions {
            detectors: self.detector_list()?,
            budget: self.budget.clone(),
            trials: self.trials,
            workers: self.workers,
            normalize: self.normalize,
        })
    }
}

/// Runs one point per axis value. Every point retrains the offline network.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<BerPoint>> {
    spec.validate()?;
    let opts = spec.point_options()?;
    let mut out = Vec::new();
    for &value in &spec.values {
        let params = spec.axis.apply(&spec.system, value)?;
        log::info!("{} = {value}", spec.axis.as_str());
        out.extend(run_point(&params, spec.axis.as_str(), value, &opts)?.points);
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "detector,axis,axis_value,ber,errors,trials,stderr,seed";

/// Ten significant digits.
fn sig10(v: f64) -> String {
    format!("{v:.9e}")
}

/// CSV text with rows ordered by detector then axis value.
pub fn to_csv(points: &[BerPoint]) -> String {
    let mut rows: Vec<&BerPoint> = points.iter().collect();
    rows.sort_by(|a, b| {
        a.detector
            .cmp(&b.detector)
            .then(a.axis_value.total_cmp(&b.axis_value))
    });
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.detector,
            p.axis,
            sig10(p.axis_value),
            sig10(p.ber),
            p.errors,
            p.trials,
            sig10(p.stderr),
            p.seed
        );
    }
    out
}

pub fn emit_csv(points: &[BerPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(points)).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(text: &str) -> std::result::Result<Vec<BerPoint>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("missing or wrong header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 8 {
                return Err(format!("row {}: expected 8 fields, found {}", i + 1, cells.len()));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1));
            let u = |s: &str| s.parse::<u64>().map_err(|e| format!("row {}: {e}", i + 1));
            Ok(BerPoint {
                detector: cells[0].into(),
                axis: cells[1].into(),
                axis_value: f(cells[2])?,
                ber: f(cells[3])?,
                errors: u(cells[4])?,
                trials: u(cells[5])?,
                stderr: f(cells[6])?,
                seed: u(cells[7])?,
                wallclock_s: 0.0,
            })
        })
        .collect()
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<BerPoint>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text).map_err(|reason| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    })
}

/// Sidecar text describing how a sweep was counted and trained.
pub fn sweep_metadata(spec: &SweepSpec) -> String {
    let b = &spec.budget;
    format!(
        "# trials counts decided data symbols per point; pilot symbols are excluded\n\
         axis = \"{}\"\ntrials = {}\nnormalize = {}\nk_s = {}\nk_t = {}\ni_s = {}\ni_t = {}\n\
         batch_size = {}\nlearning_rate = {}\noptimizer = \"{}\"\n\n[system]\n{}",
        spec.axis.as_str(),
        spec.trials,
        spec.normalize,
        b.k_s,
        b.k_t,
        b.i_s,
        b.i_t,
        b.batch_size,
        b.learning_rate,
        b.optimizer,
        spec.system.to_toml_string()
    )
}
