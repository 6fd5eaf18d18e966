//! Command-line surface.
//!
//! Every subcommand resolves its configuration as built-in defaults, then an
//! optional `--config` file of `key=value` lines, then explicit flags, and
//! writes a manifest next to its outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::descriptor::{
    gradient_check_suite, train_encoder, EncoderParams, ModelParams, TrainConfig,
};
use crate::error::{invalid, Error, Result};
use crate::io::{self, CountRow, Manifest};
use crate::metrics::{MetricsReport, PairFlows};
use crate::ot::{SinkhornConfig, SinkhornDomain};
use crate::pipeline::{
    count_video, interval_sweep, Association, DescriptorSource, InitialCountMode, PipelineConfig,
    PointSource, ProposalConfig, VideoCountResult,
};
use crate::simulator::{simulate, training_set, SceneConfig, SceneSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorMode {
    GtDescriptors,
    TrainedEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PointMode {
    GtPoints,
    Proposals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InitialMode {
    Gt,
    Proposals,
    Density,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AssociationMode {
    Transport,
    Hungarian,
    Oracle,
}

/// Counting and training settings shared by several subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Sampling interval in seconds, converted with `fps`.
    pub tau: f64,
    /// Sampling interval in frames; takes precedence over `tau` when set.
    pub tau_frames: Option<usize>,
    /// Frame rate override; defaults to the sequence's own.
    pub fps: Option<f64>,
    pub sigma: f64,
    pub sinkhorn_iters: usize,
    /// Starting temperature of the annealed solve; `None` solves at `sigma`
    /// throughout.
    pub anneal_from: Option<f64>,
    /// Proposal jitter (px).
    pub noise: f64,
    pub descriptor_dim: usize,
    /// Initial bin score for a freshly created model, and the bin score used
    /// with ground-truth descriptors.
    pub bin_score: f64,
    pub seed: u64,
    pub mode: DescriptorMode,
    pub points: PointMode,
    pub initial: InitialMode,
    pub association: AssociationMode,
    /// Hungarian similarity threshold; defaults to the model's bin score.
    pub threshold: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: 3.0,
            tau_frames: None,
            fps: None,
            sigma: 0.02,
            sinkhorn_iters: 100,
            anneal_from: Some(1.0),
            noise: 2.0,
            descriptor_dim: 256,
            bin_score: 0.5,
            seed: 0,
            mode: DescriptorMode::TrainedEncoder,
            points: PointMode::GtPoints,
            initial: InitialMode::Gt,
            association: AssociationMode::Transport,
            threshold: None,
        }
    }
}

/// Interval in frames: `floor(seconds * fps)`, with a tolerance of 1e-9
/// frames so that e.g. 2.3 s at 10 fps gives 23.
pub fn tau_to_frames(seconds: f64, fps: f64) -> Result<usize> {
    if !(seconds > 0.0 && seconds.is_finite() && fps > 0.0 && fps.is_finite()) {
        return Err(invalid(format!(
            "tau {seconds} s at {fps} fps is not a valid interval"
        )));
    }
    let frames = (seconds * fps + 1e-9).floor();
    if frames < 1.0 {
        return Err(invalid(format!(
            "tau {seconds} s is shorter than one frame at {fps} fps"
        )));
    }
    Ok(frames as usize)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("sigma", self.sigma),
            ("fps", self.fps.unwrap_or(1.0)),
            ("anneal_from", self.anneal_from.unwrap_or(1.0)),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sinkhorn_iters == 0 || self.descriptor_dim == 0 || self.tau_frames == Some(0) {
            return Err(invalid(
                "sinkhorn_iters, descriptor_dim and tau_frames must be positive",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn tau_in_frames(&self, sequence_fps: f64) -> Result<usize> {
        match self.tau_frames {
            Some(t) => Ok(t),
            None => tau_to_frames(self.tau, self.fps.unwrap_or(sequence_fps)),
        }
    }

    pub fn solver(&self) -> SinkhornConfig {
        let s = SinkhornConfig::new(self.sigma, self.sinkhorn_iters);
        match self.anneal_from {
            Some(start) => s.with_annealing(start),
            None => s,
        }
    }

    pub fn pipeline(&self, tau: usize, model: &ModelParams) -> PipelineConfig {
        PipelineConfig {
            tau,
            solver: self.solver(),
            points: match self.points {
                PointMode::GtPoints => PointSource::GroundTruth,
                PointMode::Proposals => PointSource::Proposals,
            },
            descriptors: match self.mode {
                DescriptorMode::GtDescriptors => DescriptorSource::GroundTruth,
                DescriptorMode::TrainedEncoder => DescriptorSource::Encoder,
            },
            initial: match self.initial {
                InitialMode::Gt => InitialCountMode::GroundTruth,
                InitialMode::Proposals => InitialCountMode::Proposals,
                InitialMode::Density => InitialCountMode::Density,
            },
            association: match self.association {
                AssociationMode::Transport => Association::Transport,
                AssociationMode::Hungarian => Association::Hungarian {
                    threshold: self.threshold.unwrap_or(model.bin_score),
                },
                AssociationMode::Oracle => Association::GroundTruth,
            },
            proposals: ProposalConfig {
                jitter: self.noise,
                ..ProposalConfig::default()
            },
            seed: self.seed,
        }
    }
}

/// Parses a config-file value: JSON literals first, then a comma list as an
/// array, then a bare string.
fn parse_value(raw: &str) -> Value {
    if raw.eq_ignore_ascii_case("none") {
        return Value::Null;
    }
    if let Ok(v) = serde_json::from_str(raw) {
        return v;
    }
    if raw.contains(',') {
        if let Ok(v) = serde_json::from_str(&format!("[{raw}]")) {
            return v;
        }
    }
    Value::String(raw.to_string())
}

/// Overlays `file` and then `flags` onto `base`. Keys must name existing
/// fields.
pub fn layered<T: Serialize + DeserializeOwned>(
    base: &T,
    file: &BTreeMap<String, String>,
    flags: &[(&str, Value)],
) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| invalid("configuration is not a key/value structure"))?;
    for (k, raw) in file {
        if !obj.contains_key(k) {
            return Err(invalid(format!("unknown config key {k:?}")));
        }
        obj.insert(k.clone(), parse_value(raw));
    }
    for (k, v) in flags {
        obj.insert((*k).to_string(), v.clone());
    }
    serde_json::from_value(value).map_err(|e| invalid(format!("bad configuration: {e}")))
}

fn read_config(path: &Option<PathBuf>) -> Result<BTreeMap<String, String>> {
    match path {
        Some(p) => io::parse_key_values(p),
        None => Ok(BTreeMap::new()),
    }
}

macro_rules! flag {
    ($out:ident, $key:literal, $value:expr) => {
        if let Some(v) = $value {
            $out.push(($key, serde_json::to_value(v)?));
        }
    };
}

#[derive(Debug, Parser)]
#[command(
    name = "crowdflow",
    version,
    about = "Video individual counting with optimal-transport inflow reasoning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate scenes and write them as sequence directories.
    Simulate(SimulateArgs),
    /// Count every distinct pedestrian in one or more sequences.
    Count(CountArgs),
    /// Score predicted video counts against ground truth.
    Eval(EvalArgs),
    /// Train the descriptor encoder and bin score.
    Train(TrainArgs),
    /// Counting error as a function of the sampling interval.
    SweepInterval(SweepArgs),
    /// Finite-difference check of the loss gradient.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory (one subdirectory per video when --videos > 1).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub videos: usize,
    /// File of `key=value` scene settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub appearance_seed: Option<u64>,
    #[arg(long)]
    pub duration: Option<usize>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub initial_count: Option<usize>,
    #[arg(long)]
    pub entry_rate: Option<f64>,
    #[arg(long)]
    pub exit_rate: Option<f64>,
    #[arg(long)]
    pub separability: Option<f64>,
    #[arg(long)]
    pub appearance_dim: Option<usize>,
    #[arg(long)]
    pub feature_noise: Option<f64>,
    #[arg(long)]
    pub reentry_probability: Option<f64>,
}

/// Settings shared by `count`, `train` and `sweep-interval`.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// File of `key=value` run settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sampling interval in seconds.
    #[arg(long, conflicts_with = "tau_frames")]
    pub tau: Option<f64>,
    /// Sampling interval in frames.
    #[arg(long)]
    pub tau_frames: Option<usize>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub sinkhorn_iters: Option<usize>,
    #[arg(long, conflicts_with = "no_anneal")]
    pub anneal_from: Option<f64>,
    /// Solve at the target temperature from the first iteration.
    #[arg(long)]
    pub no_anneal: bool,
    /// Proposal jitter in pixels.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub descriptor_dim: Option<usize>,
    #[arg(long)]
    pub bin_score: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<DescriptorMode>,
    #[arg(long, value_enum)]
    pub points: Option<PointMode>,
    #[arg(long, value_enum)]
    pub initial: Option<InitialMode>,
    #[arg(long, value_enum)]
    pub association: Option<AssociationMode>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut flags: Vec<(&str, Value)> = Vec::new();
        flag!(flags, "tau", self.tau);
        flag!(flags, "tau_frames", self.tau_frames.map(Some));
        if self.tau.is_some() {
            flags.push(("tau_frames", Value::Null));
        }
        flag!(flags, "fps", self.fps.map(Some));
        flag!(flags, "sigma", self.sigma);
        flag!(flags, "sinkhorn_iters", self.sinkhorn_iters);
        flag!(flags, "anneal_from", self.anneal_from.map(Some));
        if self.no_anneal {
            flags.push(("anneal_from", Value::Null));
        }
        flag!(flags, "noise", self.noise);
        flag!(flags, "descriptor_dim", self.descriptor_dim);
        flag!(flags, "bin_score", self.bin_score);
        flag!(flags, "seed", self.seed);
        flag!(flags, "mode", self.mode);
        flag!(flags, "points", self.points);
        flag!(flags, "initial", self.initial);
        flag!(flags, "association", self.association);
        flag!(flags, "threshold", self.threshold.map(Some));
        let cfg: RunConfig = layered(&RunConfig::default(), &read_config(&self.config)?, &flags)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Sequence directories.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Results JSON (an object for one input, an array otherwise).
    #[arg(long)]
    pub out: PathBuf,
    /// Trained model JSON; required with `--mode trained-encoder`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `video_id,count` CSV, or results JSON written by `count`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// `video_id,count,frames` CSV.
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// One-row summary CSV.
    #[arg(long)]
    pub summary_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training sequence directories; when absent, scenes are simulated.
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Number of scenes to simulate when no input is given.
    #[arg(long, default_value_t = 6)]
    pub simulate_videos: usize,
    /// Model JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub pairs_per_video: usize,
    #[arg(long, default_value_t = 20)]
    pub interval_min: usize,
    #[arg(long, default_value_t = 80)]
    pub interval_max: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Temperature of the differentiable solve.
    #[arg(long, default_value_t = 0.02)]
    pub train_sigma: f64,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Comma-separated intervals in frames.
    #[arg(long, value_delimiter = ',', required = true)]
    pub taus: Vec<usize>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    /// Failure threshold on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Count(a) => cmd_count(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::SweepInterval(a) => cmd_sweep(&a, out),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
    }
}

fn write_manifest(output: &Path, manifest: &Manifest) -> Result<()> {
    io::write_json(&io::manifest_path(output), manifest)
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<i32> {
    if a.videos == 0 {
        return Err(invalid("--videos must be positive"));
    }
    let mut flags: Vec<(&str, Value)> = Vec::new();
    flag!(flags, "rng_seed", a.seed);
    flag!(flags, "appearance_seed", a.appearance_seed);
    flag!(flags, "duration", a.duration);
    flag!(flags, "fps", a.fps);
    flag!(flags, "height", a.height);
    flag!(flags, "width", a.width);
    flag!(flags, "initial_count", a.initial_count);
    flag!(flags, "entry_rate", a.entry_rate);
    flag!(flags, "exit_rate", a.exit_rate);
    flag!(flags, "separability", a.separability);
    flag!(flags, "appearance_dim", a.appearance_dim);
    flag!(flags, "appearance_noise_std", a.feature_noise);
    flag!(flags, "reentry_probability", a.reentry_probability);
    let base: SceneConfig = layered(&SceneConfig::default(), &read_config(&a.config)?, &flags)?;
    base.validate()?;

    std::fs::create_dir_all(&a.out)?;
    let mut manifest = Manifest::new("simulate", serde_json::to_value(&base)?);
    for k in 0..a.videos {
        let cfg = SceneConfig {
            rng_seed: base.rng_seed.wrapping_add(k as u64),
            ..base.clone()
        };
        let dir = if a.videos == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("video-{k:03}"))
        };
        let seq = simulate(&cfg)?;
        io::save_sequence(&seq, &dir)?;
        manifest.seeds.insert(format!("video-{k:03}"), cfg.rng_seed);
        writeln!(
            out,
            "{}: {} frames, {} identities",
            dir.display(),
            seq.duration(),
            seq.distinct_identities()
        )?;
        manifest.outputs.push(dir);
    }
    manifest
        .seeds
        .insert("appearance".into(), base.appearance_seed);
    io::write_json(&a.out.join(io::MANIFEST_FILE), &manifest)?;
    Ok(0)
}

fn load_model(path: &Option<PathBuf>, cfg: &RunConfig, input_dim: usize) -> Result<ModelParams> {
    match (path, cfg.mode) {
        (Some(p), _) => {
            let m: ModelParams = io::read_json(p)?;
            m.encoder.validate()?;
            Ok(m)
        }
        (None, DescriptorMode::GtDescriptors) => Ok(ModelParams::new(
            EncoderParams::identity(input_dim),
            cfg.bin_score,
        )),
        (None, DescriptorMode::TrainedEncoder) => {
            Err(invalid("--mode trained-encoder needs --model"))
        }
    }
}

fn load_inputs(paths: &[PathBuf]) -> Result<Vec<(String, SceneSequence)>> {
    paths
        .iter()
        .map(|p| {
            let id = p
                .file_name()
                .and_then(|s| s.to_str())
                .map(str::to_string)
                .unwrap_or_else(|| p.display().to_string());
            Ok((id, io::load_sequence(p)?))
        })
        .collect()
}

fn feature_dim(seqs: &[(String, SceneSequence)]) -> usize {
    seqs.iter()
        .flat_map(|(_, s)| s.frames.iter())
        .map(|f| f.raw_features.ncols())
        .find(|&d| d > 0)
        .or_else(|| {
            seqs.iter()
                .flat_map(|(_, s)| s.identity_registry.values())
                .map(|r| r.base_feature.len())
                .find(|&d| d > 0)
        })
        .unwrap_or(1)
}

/// Schema of one counted video in the results JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub video_id: String,
    pub n0: f64,
    pub pairs: Vec<PairRecord>,
    pub total: f64,
    pub tau: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failed_pair: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub t0: usize,
    pub t1: usize,
    pub inflow: f64,
    pub outflow: f64,
    pub violation: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_inflow: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_outflow: Option<usize>,
}

impl From<&VideoCountResult> for ResultRecord {
    fn from(r: &VideoCountResult) -> Self {
        Self {
            video_id: r.video_id.clone(),
            n0: r.n0,
            pairs: r
                .pairs
                .iter()
                .map(|p| PairRecord {
                    t0: p.t0,
                    t1: p.t1,
                    inflow: p.inflow,
                    outflow: p.outflow,
                    violation: p.violation,
                    gt_inflow: p.gt_inflow,
                    gt_outflow: p.gt_outflow,
                })
                .collect(),
            total: r.total,
            tau: r.tau,
            failed_pair: r.failed_pair,
            error: r.error.clone(),
        }
    }
}

impl ResultRecord {
    fn flows(&self) -> Option<(PairFlows, PairFlows)> {
        let pred = self.pairs.iter().map(|p| (p.inflow, p.outflow)).collect();
        let gt = self
            .pairs
            .iter()
            .map(|p| Some((p.gt_inflow? as f64, p.gt_outflow? as f64)))
            .collect::<Option<Vec<_>>>()?;
        Some((pred, gt))
    }
}

fn cmd_count(a: &CountArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.run.resolve()?;
    let seqs = load_inputs(&a.input)?;
    let model = load_model(&a.model, &cfg, feature_dim(&seqs))?;
    let mut records = Vec::new();
    let mut status = 0;
    for (id, seq) in &seqs {
        let tau = cfg.tau_in_frames(seq.config.fps)?;
        let r = count_video(seq, id, &model, &cfg.pipeline(tau, &model))?;
        match &r.error {
            Some(e) => {
                writeln!(
                    out,
                    "{id}: partial total {:.4} (pair {:?} failed: {e})",
                    r.total, r.failed_pair
                )?;
                status = 1;
            }
            None => writeln!(
                out,
                "{id}: total {:.4} (n0 {}, tau {} frames, {} pairs)",
                r.total,
                r.n0,
                tau,
                r.pairs.len()
            )?,
        }
        records.push(ResultRecord::from(&r));
    }
    if records.len() == 1 {
        io::write_json(&a.out, &records[0])?;
    } else {
        io::write_json(&a.out, &records)?;
    }
    let mut manifest = Manifest::new("count", serde_json::to_value(&cfg)?);
    manifest.seeds.insert("pipeline".into(), cfg.seed);
    manifest.outputs.push(a.out.clone());
    write_manifest(&a.out, &manifest)?;
    Ok(status)
}

/// Report for predictions against a ground-truth count table; videos are
/// matched by id and reported in ground-truth order.
pub fn evaluate_files(predictions: &Path, ground_truth: &Path) -> Result<MetricsReport> {
    let gts = io::read_count_table(ground_truth)?;
    let is_json = predictions
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let (preds, flows): (Vec<CountRow>, Option<Vec<ResultRecord>>) = if is_json {
        let value: Value = io::read_json(predictions)?;
        let records: Vec<ResultRecord> = if value.is_array() {
            serde_json::from_value(value)?
        } else {
            vec![serde_json::from_value(value)?]
        };
        let rows = records
            .iter()
            .map(|r| CountRow {
                video_id: r.video_id.clone(),
                count: r.total,
                frames: None,
            })
            .collect();
        (rows, Some(records))
    } else {
        (io::read_count_table(predictions)?, None)
    };

    let mut ids = Vec::new();
    let mut p = Vec::new();
    let mut g = Vec::new();
    let mut lengths = Vec::new();
    let mut pred_flows = Vec::new();
    let mut gt_flows = Vec::new();
    let mut have_flows = flows.is_some();
    for row in &gts {
        let k = preds
            .iter()
            .position(|q| q.video_id == row.video_id)
            .ok_or_else(|| Error::Data(format!("no prediction for video {:?}", row.video_id)))?;
        let frames = row.frames.ok_or_else(|| {
            Error::Data(format!(
                "ground truth for {:?} lacks a frame count",
                row.video_id
            ))
        })?;
        ids.push(row.video_id.clone());
        p.push(preds[k].count);
        g.push(row.count);
        lengths.push(frames);
        match flows.as_ref().and_then(|f| f[k].flows()) {
            Some((pf, gf)) => {
                pred_flows.push(pf);
                gt_flows.push(gf);
            }
            None => have_flows = false,
        }
    }
    let flow_arg = if have_flows && pred_flows.iter().any(|f| !f.is_empty()) {
        Some((pred_flows.as_slice(), gt_flows.as_slice()))
    } else {
        None
    };
    MetricsReport::build(&ids, &p, &g, &lengths, flow_arg)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let report = evaluate_files(&a.predictions, &a.ground_truth)?;
    writeln!(out, "mae {:.1}", report.mae)?;
    writeln!(out, "mse {:.1}", report.mse)?;
    match report.wrae_percent {
        Some(w) => writeln!(out, "wrae {w:.1}%")?,
        None => writeln!(out, "wrae n/a")?,
    }
    if let (Some(i), Some(o)) = (report.miae, report.moae) {
        writeln!(out, "miae {i:.3}")?;
        writeln!(out, "moae {o:.3}")?;
    }
    if !report.wrae_excluded.is_empty() {
        writeln!(
            out,
            "wrae excludes zero-count videos: {}",
            report.wrae_excluded.join(", ")
        )?;
    }
    let echo = serde_json::json!({
        "predictions": a.predictions,
        "ground_truth": a.ground_truth,
    });
    if let Some(p) = &a.out {
        io::write_json(p, &report)?;
        let mut m = Manifest::new("eval", echo.clone());
        m.outputs.push(p.clone());
        write_manifest(p, &m)?;
    }
    if let Some(p) = &a.summary_csv {
        report.write_summary_csv(std::fs::File::create(p)?)?;
        let mut m = Manifest::new("eval", echo);
        m.outputs.push(p.clone());
        write_manifest(p, &m)?;
    }
    Ok(0)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.run.resolve()?;
    let seqs: Vec<SceneSequence> = if a.input.is_empty() {
        (0..a.simulate_videos)
            .map(|k| {
                simulate(&SceneConfig {
                    rng_seed: cfg.seed.wrapping_add(1000 + k as u64),
                    ..SceneConfig::default()
                })
            })
            .collect::<Result<_>>()?
    } else {
        load_inputs(&a.input)?.into_iter().map(|(_, s)| s).collect()
    };
    if seqs.is_empty() {
        return Err(invalid("no training sequences"));
    }
    let dataset = training_set(
        &seqs,
        (a.interval_min, a.interval_max),
        a.pairs_per_video,
        cfg.seed,
    )?;
    let input_dim = dataset
        .iter()
        .map(|p| p.x_raw.ncols())
        .find(|&d| d > 0)
        .ok_or_else(|| invalid("training sequences carry no features"))?;
    let encoder = if input_dim == cfg.descriptor_dim {
        EncoderParams::identity(input_dim)
    } else {
        EncoderParams::random(input_dim, &[], cfg.descriptor_dim, cfg.seed)
    };
    let init = ModelParams::new(encoder, cfg.bin_score);
    let defaults = TrainConfig::default();
    let mut tc = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        seed: cfg.seed,
        ..defaults
    };
    tc.loss.solver =
        SinkhornConfig::new(a.train_sigma, cfg.sinkhorn_iters).with_domain(SinkhornDomain::Naive);

    let outcome = train_encoder(&dataset, &init, &tc)?;
    io::write_json(&a.out, &outcome.params)?;
    if let Some(t) = &a.trace {
        io::write_trace_csv(t, &outcome.trace)?;
    }
    let first = outcome.trace.first().map_or(f64::NAN, |r| r.loss);
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    writeln!(
        out,
        "trained on {} pairs: loss {first:.4} -> {last:.4}, bin score {:.4}",
        dataset.len(),
        outcome.params.bin_score
    )?;
    let mut manifest = Manifest::new(
        "train",
        serde_json::json!({ "run": cfg, "train": tc, "pairs_per_video": a.pairs_per_video,
            "interval": [a.interval_min, a.interval_max], "videos": seqs.len() }),
    );
    manifest.seeds.insert("train".into(), cfg.seed);
    manifest.outputs.push(a.out.clone());
    if let Some(t) = &a.trace {
        manifest.outputs.push(t.clone());
    }
    write_manifest(&a.out, &manifest)?;
    Ok(0)
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.run.resolve()?;
    let seqs = load_inputs(&a.input)?;
    let model = load_model(&a.model, &cfg, feature_dim(&seqs))?;
    let just: Vec<SceneSequence> = seqs.into_iter().map(|(_, s)| s).collect();
    let rows = interval_sweep(&just, &a.taus, &model, &cfg.pipeline(a.taus[0], &model))?;
    match &a.out {
        Some(p) => {
            io::write_sweep_csv(std::fs::File::create(p)?, &rows)?;
            let mut m = Manifest::new(
                "sweep-interval",
                serde_json::json!({ "run": cfg, "taus": a.taus }),
            );
            m.seeds.insert("pipeline".into(), cfg.seed);
            m.outputs.push(p.clone());
            write_manifest(p, &m)?;
            writeln!(out, "wrote {} rows to {}", rows.len(), p.display())?;
        }
        None => io::write_sweep_csv(&mut *out, &rows)?,
    }
    Ok(0)
}

fn cmd_grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> Result<i32> {
    let solver = SinkhornConfig::new(a.sigma, a.iterations);
    let check = gradient_check_suite(a.seed, a.instances, solver, a.step)?;
    writeln!(
        out,
        "max relative error {:.3e} (max absolute {:.3e}) over {} partials in {} instances",
        check.max_relative_error, check.max_absolute_error, check.checked, a.instances
    )?;
    if check.max_relative_error < a.tolerance {
        Ok(0)
    } else {
        writeln!(out, "FAILED: above tolerance {:.1e}", a.tolerance)?;
        Ok(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_conversion_floors() {
        assert_eq!(tau_to_frames(3.0, 10.0).unwrap(), 30);
        assert_eq!(tau_to_frames(2.3, 10.0).unwrap(), 23);
        assert_eq!(tau_to_frames(0.25, 10.0).unwrap(), 2);
        assert_eq!(tau_to_frames(3.0, 25.0).unwrap(), 75);
        assert!(tau_to_frames(0.05, 10.0).is_err());
        assert!(tau_to_frames(-1.0, 10.0).is_err());
    }

    #[test]
    fn flags_override_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(
            &p,
            "sigma = 0.1\nsinkhorn_iters = 40\nanneal_from = none\nmode = gt-descriptors\n",
        )
        .unwrap();
        let args =
            RunArgs::parse_from_for_test(&["--config", p.to_str().unwrap(), "--sigma", "0.3"]);
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.sigma, 0.3);
        assert_eq!(cfg.sinkhorn_iters, 40);
        assert_eq!(cfg.anneal_from, None);
        assert_eq!(cfg.mode, DescriptorMode::GtDescriptors);
        assert_eq!(cfg.tau_in_frames(10.0).unwrap(), 30);

        std::fs::write(&p, "sigmaa = 0.1\n").unwrap();
        let args = RunArgs::parse_from_for_test(&["--config", p.to_str().unwrap()]);
        assert!(args.resolve().is_err());
    }

    #[test]
    fn tau_seconds_flag_clears_file_frames() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "tau_frames = 12\n").unwrap();
        let from_file = RunArgs::parse_from_for_test(&["--config", p.to_str().unwrap()])
            .resolve()
            .unwrap();
        assert_eq!(from_file.tau_in_frames(10.0).unwrap(), 12);
        let flag = RunArgs::parse_from_for_test(&["--config", p.to_str().unwrap(), "--tau", "1.5"])
            .resolve()
            .unwrap();
        assert_eq!(flag.tau_in_frames(10.0).unwrap(), 15);
    }

    #[test]
    fn parse_value_forms() {
        assert_eq!(parse_value("3"), serde_json::json!(3));
        assert_eq!(parse_value("1.5, 3"), serde_json::json!([1.5, 3]));
        assert_eq!(parse_value("gt-points"), serde_json::json!("gt-points"));
        assert_eq!(parse_value("None"), Value::Null);
    }

    #[derive(Debug, Parser)]
    struct Wrapper {
        #[command(flatten)]
        run: RunArgs,
    }

    impl RunArgs {
        fn parse_from_for_test(args: &[&str]) -> RunArgs {
            let mut argv = vec!["test"];
            argv.extend_from_slice(args);
            Wrapper::parse_from(argv).run
        }
    }
}
