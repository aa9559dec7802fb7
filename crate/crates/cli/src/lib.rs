//! The `verse` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

pub mod overrides;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use verse_core::clicks::Polarity;
use verse_core::dataio::{self, DatasetManifest, GenSpec, Sample, Split};
use verse_core::eval::{self, EvalProtocol, Segmenter};
use verse_core::mask::BinaryMask;
use verse_core::training::{self, Precision, TrainConfig};
use verse_core::{Mode, Verse32};

#[derive(Parser, Debug)]
#[command(name = "verse", version, about = "Versatile query-prompted segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config file layered over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `dotted.key=value` override; may repeat; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn all_overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum ProtocolArg {
    Mode1,
    Mode2,
    Mode3,
    All,
}

impl ProtocolArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ProtocolArg::Mode1 => vec![Mode::Auto],
            ProtocolArg::Mode2 => vec![Mode::Refine],
            ProtocolArg::Mode3 => vec![Mode::Interactive],
            ProtocolArg::All => vec![Mode::Auto, Mode::Refine, Mode::Interactive],
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset split and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; writes checkpoint.ckpt and metrics.jsonl.
    Train {
        /// Training dataset directory (or manifest.json).
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset for per-epoch metrics.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run click-simulation benchmarks; writes report.json, summary.csv, curves.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        #[arg(long)]
        max_clicks: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Simulate clicks on one sample and dump the episode.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample id or index into the manifest.
        #[arg(long, default_value = "0")]
        sample: String,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long, value_enum, default_value = "mode3")]
        protocol: ProtocolArg,
        #[arg(long)]
        max_clicks: Option<usize>,
        /// Write the episode JSON here (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print an ASCII overlay of the final mask.
        #[arg(long)]
        ascii: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Serve the HTTP/JSON session API.
    Serve {
        /// Checkpoint to load; defaults to $VERSE_CHECKPOINT.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Dataset manifest whose target names label the vocabulary.
        #[arg(long)]
        names: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<verse_core::Error> for CliError {
    fn from(e: verse_core::Error) -> Self {
        match e {
            verse_core::Error::Contract(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub protocols: Vec<EvalProtocol>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, protocols: [Mode::Auto, Mode::Refine, Mode::Interactive].into_iter().map(EvalProtocol::new).collect() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub seed: u64,
    pub protocol: EvalProtocol,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { seed: 0, protocol: EvalProtocol::new(Mode::Interactive) }
    }
}

/// Prints the effective config and writes it beside the outputs.
fn record_config(dir: &Path, command: &str, config: &impl Serialize, inputs: serde_json::Value) -> Result<(), CliError> {
    let doc = serde_json::json!({ "command": command, "inputs": inputs, "config": config });
    let text = serde_json::to_string_pretty(&doc).map_err(runtime)?;
    println!("{text}");
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let p = dir.join("effective_config.json");
    fs::write(&p, text + "\n").map_err(|e| runtime(format!("{}: {e}", p.display())))
}

fn load_split(path: &Path) -> Result<(DatasetManifest, Vec<Sample>), CliError> {
    let m = DatasetManifest::load(path).map_err(runtime)?;
    let samples = dataio::load_all(&m).map_err(runtime)?;
    Ok((m, samples))
}

fn layered<C: Serialize + serde::de::DeserializeOwned + Default>(cfg: &ConfigArgs) -> Result<C, CliError> {
    overrides::layered(cfg.config.as_deref(), &cfg.all_overrides()).map_err(CliError::Config)
}

fn protocols_from(base: &[EvalProtocol], arg: Option<ProtocolArg>, max_clicks: Option<usize>) -> Vec<EvalProtocol> {
    let mut ps: Vec<EvalProtocol> = match arg {
        None => base.to_vec(),
        Some(a) => a
            .modes()
            .into_iter()
            .map(|m| base.iter().find(|p| p.mode == m).cloned().unwrap_or_else(|| EvalProtocol::new(m)))
            .collect(),
    };
    if let Some(n) = max_clicks {
        ps.iter_mut().for_each(|p| p.max_clicks = n);
    }
    ps
}

/// Final-mask overlay: `#` hit, `+` false positive, `-` miss, `.` background,
/// `P`/`N` clicks. Large images are subsampled to at most 64 columns.
pub fn ascii_overlay(pred: &BinaryMask, gt: &BinaryMask, clicks: &[verse_core::clicks::Click]) -> String {
    let (h, w) = (pred.height(), pred.width());
    let step = w.div_ceil(64).max(1);
    let mut s = String::new();
    for y in (0..h).step_by(step) {
        for x in (0..w).step_by(step) {
            let click = clicks.iter().find(|c| c.x / step == x / step && c.y / step == y / step);
            let ch = match click {
                Some(c) if c.polarity == Polarity::Positive => 'P',
                Some(_) => 'N',
                None => match (pred.get(x, y), gt.get(x, y)) {
                    (true, true) => '#',
                    (true, false) => '+',
                    (false, true) => '-',
                    (false, false) => '.',
                },
            };
            s.push(ch);
        }
        s.push('\n');
    }
    s
}

fn load_model_f32(path: &Path) -> Result<Verse32, CliError> {
    Verse32::load(path).map_err(runtime)
}

fn cmd_gen_data(out: &Path, split: Split, cfg: &ConfigArgs) -> Result<(), CliError> {
    let spec: GenSpec = layered(cfg)?;
    spec.validate()?;
    record_config(out, "gen-data", &spec, serde_json::json!({ "split": split }))?;
    let m = dataio::generate_synthetic_dataset(&spec, out, split).map_err(runtime)?;
    tracing::info!(samples = m.len(), dir = %out.display(), "dataset written");
    Ok(())
}

fn cmd_train(data: &Path, val: Option<&Path>, out: &Path, cfg: &ConfigArgs) -> Result<(), CliError> {
    let tc: TrainConfig = layered(cfg)?;
    tc.validate()?;
    let (manifest, train) = load_split(data)?;
    if manifest.target_names.len() != tc.model.num_targets {
        return Err(CliError::Config(format!(
            "dataset has {} targets but model.num_targets = {}",
            manifest.target_names.len(),
            tc.model.num_targets
        )));
    }
    let val_samples = match val {
        Some(v) => load_split(v)?.1,
        None => Vec::new(),
    };
    record_config(out, "train", &tc, serde_json::json!({ "data": data, "val": val }))?;
    let on_epoch = |e: &training::EpochLog| {
        tracing::info!(epoch = e.epoch, train_loss = e.train_loss, val_dice_mode1 = ?e.val_dice_mode1, val_dice3_mode3 = ?e.val_dice3_mode3, "epoch done");
    };
    match tc.precision {
        Precision::F32 => training::fit::<f32>(&tc, &train, &val_samples, Some(out), on_epoch).map(|_| ()),
        Precision::F64 => training::fit::<f64>(&tc, &train, &val_samples, Some(out), on_epoch).map(|_| ()),
    }
    .map_err(runtime)?;
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, protocol: Option<ProtocolArg>, max_clicks: Option<usize>, cfg: &ConfigArgs) -> Result<(), CliError> {
    let mut ec: EvalConfig = layered(cfg)?;
    ec.protocols = protocols_from(&ec.protocols, protocol, max_clicks);
    for p in &ec.protocols {
        p.validate()?;
    }
    let model = load_model_f32(checkpoint)?;
    let (_, samples) = load_split(data)?;
    record_config(out, "eval", &ec, serde_json::json!({ "checkpoint": checkpoint, "data": data }))?;
    let report = eval::run_benchmark(&model, &samples, &ec.protocols, ec.seed).map_err(runtime)?;
    report.write(out).map_err(runtime)?;
    print!("{}", report.summary_csv());
    Ok(())
}

#[derive(Serialize)]
struct EpisodeDump<'a> {
    sample_id: &'a str,
    target_id: usize,
    protocol: &'a EvalProtocol,
    clicks: Vec<verse_core::clicks::Click>,
    dice_per_click: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    checkpoint: &Path,
    data: &Path,
    sample: &str,
    target: usize,
    protocol: ProtocolArg,
    max_clicks: Option<usize>,
    out: Option<&Path>,
    ascii: bool,
    cfg: &ConfigArgs,
) -> Result<(), CliError> {
    let mut sc: SimulateConfig = layered(cfg)?;
    let mode = match protocol {
        ProtocolArg::All => return Err(CliError::Config("simulate takes a single protocol".into())),
        p => p.modes()[0],
    };
    sc.protocol.mode = mode;
    if let Some(n) = max_clicks {
        sc.protocol.max_clicks = n;
    }
    sc.protocol.validate()?;
    let model = load_model_f32(checkpoint)?;
    let manifest = DatasetManifest::load(data).map_err(runtime)?;
    let index = match manifest.entries.iter().position(|e| e.sample_id == sample) {
        Some(i) => i,
        None => sample.parse::<usize>().map_err(|_| CliError::Config(format!("no sample {sample:?} in {}", data.display())))?,
    };
    if index >= manifest.len() {
        return Err(CliError::Config(format!("sample index {index} out of range for {} samples", manifest.len())));
    }
    let s = dataio::load_sample(&manifest, index).map_err(runtime)?;
    let gt = s.masks.get(&target).ok_or_else(|| CliError::Config(format!("sample {} has no target {target}", s.sample_id)))?.clone();
    if let Some(dir) = out.and_then(Path::parent).filter(|d| !d.as_os_str().is_empty()) {
        record_config(dir, "simulate", &sc, serde_json::json!({ "checkpoint": checkpoint, "data": data, "sample": s.sample_id, "target": target }))?;
    }
    let ctx = model.prepare(&s.image).map_err(runtime)?;
    let tr = eval::simulate(&model, &ctx, &s, target, &sc.protocol).map_err(runtime)?;
    let dump = EpisodeDump { sample_id: &s.sample_id, target_id: target, protocol: &sc.protocol, clicks: tr.clicks.clone(), dice_per_click: tr.dice_per_click.clone() };
    let text = serde_json::to_string_pretty(&dump).map_err(runtime)?;
    println!("{text}");
    if let Some(p) = out {
        fs::write(p, text + "\n").map_err(|e| runtime(format!("{}: {e}", p.display())))?;
    }
    if ascii {
        // replay the clicks to obtain the final mask
        let (h, w) = (s.height(), s.width());
        let mut clicks = verse_core::clicks::ClickSet::new();
        let mut probs = match mode {
            Mode::Interactive => verse_core::tensor::Tensor::zeros(&[h, w]),
            _ => model.segment(&ctx, Mode::Auto, target, &clicks, &verse_core::tensor::Tensor::zeros(&[h, w])).map_err(runtime)?,
        };
        let step_mode = if mode == Mode::Interactive { Mode::Interactive } else { Mode::Refine };
        for c in &tr.clicks {
            clicks.push(verse_core::clicks::Click::new(c.x, c.y, c.polarity)).map_err(runtime)?;
            probs = model.segment(&ctx, step_mode, target, &clicks, &probs).map_err(runtime)?;
        }
        let pred = BinaryMask::from_probs(h, w, probs.data(), 0.5).map_err(runtime)?;
        let mut legend = String::new();
        writeln!(legend, "# hit  + false positive  - miss  . background  P/N clicks").expect("string write");
        print!("{legend}{}", ascii_overlay(&pred, &gt, &tr.clicks));
    }
    Ok(())
}

fn cmd_serve(checkpoint: Option<&Path>, host: &str, port: u16, names: Option<&Path>) -> Result<(), CliError> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(verse_service::CHECKPOINT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Config(format!("no --checkpoint given and ${} is unset", verse_service::CHECKPOINT_ENV)))?,
    };
    let model = load_model_f32(&path)?;
    let names: BTreeMap<usize, String> = match names {
        Some(p) => DatasetManifest::load(p).map_err(runtime)?.target_names,
        None => dataio::default_target_names(model.num_targets()),
    };
    let state = Arc::new(verse_service::AppState::new(model, names));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port)).await.map_err(|e| runtime(format!("bind {host}:{port}: {e}")))?;
        tracing::info!(addr = %listener.local_addr().map_err(runtime)?, checkpoint = %path.display(), "serving");
        verse_service::serve(listener, state).await.map_err(runtime)
    })
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { out, split, cfg } => cmd_gen_data(&out, split, &cfg),
        Command::Train { data, val, out, cfg } => cmd_train(&data, val.as_deref(), &out, &cfg),
        Command::Eval { checkpoint, data, out, protocol, max_clicks, cfg } => cmd_eval(&checkpoint, &data, &out, protocol, max_clicks, &cfg),
        Command::Simulate { checkpoint, data, sample, target, protocol, max_clicks, out, ascii, cfg } => {
            cmd_simulate(&checkpoint, &data, &sample, target, protocol, max_clicks, out.as_deref(), ascii, &cfg)
        }
        Command::Serve { checkpoint, host, port, names } => cmd_serve(checkpoint.as_deref(), &host, port, names.as_deref()),
    }
}

/// Parses `argv` and runs; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}
