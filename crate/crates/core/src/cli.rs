//! Command-line front end: `init`, `surgery`, `train`, `predict`, `eval`
//! and `inspect`.
//!
//! Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage
//! error. An optional `--config FILE` of `key=value` lines supplies flag
//! defaults; flags given on the command line win.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::checkpoint::{self, Checkpoint};
use crate::data::{self, load_manifest, read_ppm, DatasetManifest, Preprocess, LABELS};
use crate::error::{Error, Result};
use crate::inference::{self, Averaging};
use crate::metrics::{self, EvalReport};
use crate::network::{
    self, build_profile_with, FreezeMask, HeadConfig, HeadOrder, NetworkSpec, Profile, ProfileOptions, DEFAULT_DROPOUT,
};
use crate::optim::{self, OptState, SgdConfig};
use crate::rng::{stream, Rng};
use crate::tensor::argmax;

/// Images decoded and scored per forward pass outside training.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "agecnn", version, about = "Age-group CNN: head surgery, fine-tuning, prediction and evaluation")]
pub struct Cli {
    /// Plain `key=value` file of flag defaults (keys are long flag names).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialized network of a profile.
    Init(InitArgs),
    /// Import a trunk and attach a fresh fully connected head.
    Surgery(SurgeryArgs),
    /// Fine-tune the trainable layers of a model.
    Train(TrainArgs),
    /// Print `path,label,p0..p7` for each listed image.
    Predict(PredictArgs),
    /// Score a model on a labeled manifest.
    Eval(EvalArgs),
    /// Describe the layers of a weight file or a profile.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderArg {
    ReluDropout,
    DropoutRelu,
}

impl From<OrderArg> for HeadOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::ReluDropout => HeadOrder::ReluThenDropout,
            OrderArg::DropoutRelu => HeadOrder::DropoutThenRelu,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AveragingArg {
    Probability,
    Score,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Probability => Averaging::Probability,
            AveragingArg::Score => Averaging::Score,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Network profile: vgg-face-age or mini.
    #[arg(long, value_parser = parse_profile)]
    pub profile: Profile,
    /// Local response normalization after the first conv of blocks 1 and 2.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub lrn: bool,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct InitArgs {
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_DROPOUT)]
    pub dropout: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SurgeryArgs {
    /// Weight file supplying the convolutional trunk.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub profile: ProfileArgs,
    /// Widths of the new fully connected layers, last one the class count.
    #[arg(long, value_delimiter = ',', default_value = "4096,5000,5000,8")]
    pub head: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_DROPOUT)]
    pub dropout: f32,
    /// Order of rectification and dropout after each hidden head layer.
    #[arg(long, value_enum, default_value = "relu-dropout")]
    pub head_order: OrderArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreArgs {
    /// Per-channel value subtracted from pixels: one number or r,g,b.
    #[arg(long, value_parser = parse_mean)]
    pub mean: Option<[f32; 3]>,
    /// Multiplier applied to pixels after mean subtraction.
    #[arg(long, default_value_t = 1.0)]
    pub pixel_scale: f32,
    /// Space in which the three crop outputs are averaged.
    #[arg(long, value_enum, default_value = "probability")]
    pub averaging: AveragingArg,
}

impl PreArgs {
    fn preprocess(&self, spec: &NetworkSpec) -> Result<Preprocess> {
        let pre = Preprocess {
            mean: self.mean,
            scale: self.pixel_scale,
            ..Preprocess::for_input(spec.input)
        };
        pre.validate()?;
        Ok(pre)
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Keep only these folds of the training manifest.
    #[arg(long, value_delimiter = ',')]
    pub train_folds: Option<Vec<u32>>,
    /// Keep only these folds of the validation manifest.
    #[arg(long, value_delimiter = ',')]
    pub val_folds: Option<Vec<u32>>,
    #[arg(long)]
    pub epochs: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Initial learning rate; a checkpoint with optimizer state keeps its own.
    #[arg(long, default_value_t = SgdConfig::default().lr0)]
    pub lr: f64,
    #[arg(long, default_value_t = SgdConfig::default().momentum)]
    pub momentum: f64,
    #[arg(long, default_value_t = SgdConfig::default().weight_decay)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = SgdConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = SgdConfig::default().lr_factor)]
    pub lr_factor: f64,
    #[arg(long, default_value_t = SgdConfig::default().patience)]
    pub patience: usize,
    #[arg(long, default_value_t = SgdConfig::default().min_lr)]
    pub min_lr: f64,
    #[arg(long, default_value_t = SgdConfig::default().improvement_epsilon)]
    pub improvement_epsilon: f64,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub decay_biases: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the rate of every dropout layer in the model.
    #[arg(long)]
    pub dropout: Option<f32>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub shuffle: bool,
    #[command(flatten)]
    pub pre: PreArgs,
}

impl TrainArgs {
    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            lr0: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            lr_factor: self.lr_factor,
            patience: self.patience,
            min_lr: self.min_lr,
            improvement_epsilon: self.improvement_epsilon,
            decay_biases: self.decay_biases,
        }
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Text file with one image path per line, relative to the file.
    #[arg(long)]
    pub images: PathBuf,
    #[command(flatten)]
    pub pre: PreArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Keep only these folds of the test manifest.
    #[arg(long, value_delimiter = ',')]
    pub folds: Option<Vec<u32>>,
    /// CSV report path; defaults to the model path with `.report.csv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub pre: PreArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
#[group(required = true, multiple = false, id = "source")]
pub struct InspectArgs {
    #[arg(long, group = "source")]
    pub model: Option<PathBuf>,
    #[arg(long, group = "source", value_parser = parse_profile)]
    pub profile: Option<Profile>,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mean(s: &str) -> std::result::Result<[f32; 3], String> {
    let vals: Vec<f32> = s
        .split(',')
        .map(|v| v.trim().parse::<f32>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match *vals.as_slice() {
        [v] => Ok([v; 3]),
        [r, g, b] => Ok([r, g, b]),
        _ => Err(format!("expected 1 or 3 values, got {}", vals.len())),
    }
}

/// Failure of a whole invocation.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Splices `--config FILE` contents into `args` right after the subcommand
/// name, so later command-line flags override them.
fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, Failure> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => match it.next() {
                Some(v) => config = Some(PathBuf::from(v)),
                None => return Err(Failure::Usage("--config needs a file".into())),
            },
            Some(s) if s.starts_with("--config=") => config = Some(PathBuf::from(&s["--config=".len()..])),
            _ => rest.push(a),
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let text = fs::read_to_string(&path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let Some(sub_pos) = rest.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1) else {
        return Ok(rest);
    };
    let sub_name = rest[sub_pos].to_string_lossy().into_owned();
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&sub_name) else { return Ok(rest) };
    let mut injected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        let key = key.trim().replace('_', "-");
        let known_here = sub.get_arguments().any(|a| a.get_long() == Some(key.as_str()));
        if known_here {
            injected.push(OsString::from(format!("--{key}")));
            injected.push(OsString::from(value.trim()));
        } else if !cmd
            .get_subcommands()
            .any(|s| s.get_arguments().any(|a| a.get_long() == Some(key.as_str())))
        {
            return Err(Failure::Usage(format!("{}:{}: unknown key '{key}'", path.display(), i + 1)));
        }
    }
    rest.splice(sub_pos + 1..sub_pos + 1, injected);
    Ok(rest)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Logs go to `out`, diagnostics to `err`.
pub fn run(args: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(Failure::Usage(m) | Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().ansi().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Init(a) => cmd_init(&a)?,
        Command::Surgery(a) => cmd_surgery(&a)?,
        Command::Train(a) => cmd_train(&a, out)?,
        Command::Predict(a) => {
            let failed = cmd_predict(&a, out, err)?;
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} image(s) could not be predicted")));
            }
        }
        Command::Eval(a) => cmd_eval(&a, out)?,
        Command::Inspect(a) => cmd_inspect(&a, out)?,
    }
    Ok(())
}

fn io_err(e: std::io::Error) -> Error {
    Error::Input(format!("writing output: {e}"))
}

fn profile_spec(p: &ProfileArgs, dropout: f32, order: HeadOrder) -> Result<NetworkSpec> {
    build_profile_with(
        p.profile,
        &ProfileOptions {
            lrn: p.lrn,
            dropout,
            order,
        },
    )
}

pub fn cmd_init(a: &InitArgs) -> Result<()> {
    let spec = profile_spec(&a.profile, a.dropout, HeadOrder::default())?;
    let params = network::init_params(&spec, &mut Rng::new(a.seed).fork(stream::INIT))?;
    checkpoint::save(&a.out, &spec, &params, &FreezeMask::all_trainable(&spec), None)
}

pub fn cmd_surgery(a: &SurgeryArgs) -> Result<()> {
    let order = a.head_order.into();
    let target = profile_spec(&a.profile, a.dropout, order)?;
    let trunk = checkpoint::import_trunk(&a.input, &target)?;
    let head = HeadConfig {
        widths: a.head.clone(),
        dropout: a.dropout,
        order,
    };
    let mut rng = Rng::new(a.seed).fork(stream::HEAD);
    let (spec, params, mask) = network::head_replace(&target, &head, &trunk, &mut rng)?;
    checkpoint::save(&a.out, &spec, &params, &mask, None)
}

fn load_filtered(path: &Path, folds: Option<&[u32]>) -> Result<DatasetManifest> {
    let m = load_manifest(path)?;
    Ok(match folds {
        Some(f) => m.filter_folds(f),
        None => m,
    })
}

fn score(ck: &Checkpoint, m: &DatasetManifest, pre: &Preprocess, averaging: Averaging) -> Result<EvalReport> {
    let probs = inference::predict_records(&ck.spec, &ck.params, &m.records, pre, averaging, EVAL_CHUNK)?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p).unwrap_or(0)).collect();
    let truths: Vec<usize> = m.records.iter().map(|r| r.label.index()).collect();
    EvalReport::from_pairs(&preds, &truths)
}

/// Runs the epochs and writes the checkpoint to `--out` after each one.
/// With a checkpoint that already carries optimizer state, training resumes
/// from it: learning rate, velocities, plateau counters, step and epoch.
pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.sgd_config();
    cfg.validate()?;
    let mut ck = checkpoint::load(&a.model)?;
    if let Some(rate) = a.dropout {
        ck.spec.set_dropout(rate)?;
    }
    let train = load_filtered(&a.train, a.train_folds.as_deref())?;
    let val = load_filtered(&a.val, a.val_folds.as_deref())?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation manifests must be non-empty".into()));
    }
    let pre = a.pre.preprocess(&ck.spec)?;
    if a.epochs == 0 {
        return checkpoint::save(&a.out, &ck.spec, &ck.params, &ck.mask, ck.state.as_ref());
    }
    let mut state = match ck.state.take() {
        Some(s) => s,
        None => OptState::new(&ck.params, &ck.mask, &cfg)?,
    };
    let root = Rng::new(a.seed);
    writeln!(out, "epoch,lr,train_loss,val_exact,val_one_off").map_err(io_err)?;
    for _ in 0..a.epochs {
        let epoch = state.epoch;
        let lr = state.lr;
        let order_rng = root.fork(stream::SHUFFLE).fork(epoch);
        let it = data::batches(&train, cfg.batch_size, a.shuffle, &order_rng, &pre)?;
        let loss = optim::train_epoch(&ck.spec, &mut ck.params, &ck.mask, &mut state, &cfg, it, &root)?;
        let report = score(&ck, &val, &pre, a.pre.averaging.into())?;
        optim::plateau_update(&mut state, report.exact_accuracy, &cfg);
        writeln!(
            out,
            "{},{lr:.3e},{loss:.6},{:.6},{:.6}",
            epoch + 1,
            report.exact_accuracy,
            report.one_off_accuracy
        )
        .map_err(io_err)?;
        checkpoint::save(&a.out, &ck.spec, &ck.params, &ck.mask, Some(&state))?;
    }
    Ok(())
}

/// Paths listed one per line; blank lines and `#` comments are skipped.
fn read_image_list(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| (l.to_string(), base.join(l)))
        .collect())
}

/// Writes one CSV line per image that could be scored and reports the rest
/// on `err`. Returns the number of failures.
pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<usize> {
    let ck = checkpoint::load(&a.model)?;
    let pre = a.pre.preprocess(&ck.spec)?;
    let list = read_image_list(&a.images)?;
    let mut failed = 0;
    write!(out, "path,label").map_err(io_err)?;
    for i in 0..LABELS.len() {
        write!(out, ",p{i}").map_err(io_err)?;
    }
    writeln!(out).map_err(io_err)?;
    for group in list.chunks(EVAL_CHUNK) {
        let decoded: Vec<Result<_>> = group.par_iter().map(|(_, p)| read_ppm(p)).collect();
        let ok: Vec<_> = decoded.iter().filter_map(|d| d.as_ref().ok().cloned()).collect();
        let mut probs = inference::predict_proba_many(&ck.spec, &ck.params, &ok, &pre, a.pre.averaging.into())?.into_iter();
        for ((shown, _), d) in group.iter().zip(&decoded) {
            match d {
                Err(e) => {
                    failed += 1;
                    writeln!(err, "error: {shown}: {e}").map_err(io_err)?;
                }
                Ok(_) => {
                    let p = probs.next().expect("one probability row per decoded image");
                    let label = inference::label_from_proba(&p)?;
                    write!(out, "{shown},{label}").map_err(io_err)?;
                    for v in &p {
                        write!(out, ",{v:.6}").map_err(io_err)?;
                    }
                    writeln!(out).map_err(io_err)?;
                }
            }
        }
    }
    Ok(failed)
}

pub fn default_report_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".report.csv");
    PathBuf::from(s)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck = checkpoint::load(&a.model)?;
    let pre = a.pre.preprocess(&ck.spec)?;
    let test = load_filtered(&a.test, a.folds.as_deref())?;
    let report = score(&ck, &test, &pre, a.pre.averaging.into())?;
    write!(out, "{}", metrics::render_report(&report)).map_err(io_err)?;
    let path = a.report.clone().unwrap_or_else(|| default_report_path(&a.model));
    fs::write(&path, metrics::report_csv(&report)).map_err(|e| Error::io(path, e))
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Layer table of a weight file, or of a bare profile with every layer
/// trainable.
pub fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let (spec, mask) = match (&a.model, a.profile) {
        (Some(path), _) => {
            let ck = checkpoint::load(path)?;
            (ck.spec, ck.mask)
        }
        (None, Some(p)) => {
            let spec = build_profile_with(p, &ProfileOptions::default())?;
            let mask = FreezeMask::all_trainable(&spec);
            (spec, mask)
        }
        (None, None) => return Err(Error::Config("inspect needs --model or --profile".into())),
    };
    let shapes = spec.infer_shapes()?;
    let mut text = format!("profile {}\ninput {}\n", spec.profile, dims(&spec.input));
    text.push_str(&format!(
        "{:<10} {:<8} {:>12} {:>12} {:>12} {}\n",
        "layer", "kind", "input", "output", "params", "trainable"
    ));
    let (mut trainable, mut frozen) = (0usize, 0usize);
    for (l, s) in spec.layers.iter().zip(&shapes) {
        let (count, flag) = match l.param_shapes(&s.input)? {
            Some((w, b)) => {
                let n = w.iter().product::<usize>() + b.iter().product::<usize>();
                let on = mask.is_trainable(&l.name);
                if on {
                    trainable += n;
                } else {
                    frozen += n;
                }
                (n.to_string(), if on { "yes" } else { "no" })
            }
            None => ("0".to_string(), "-"),
        };
        text.push_str(&format!(
            "{:<10} {:<8} {:>12} {:>12} {:>12} {flag}\n",
            l.name,
            l.kind.tag(),
            dims(&s.input),
            dims(&s.output),
            count
        ));
    }
    text.push_str(&format!(
        "params total={} trainable={trainable} frozen={frozen}\n",
        trainable + frozen
    ));
    out.write_all(text.as_bytes()).map_err(io_err)
}
