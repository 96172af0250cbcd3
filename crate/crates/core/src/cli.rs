//! The `proface` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 file access or
//! decoding error, 3 image size or model mismatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, WrongRecoveryMode};
use crate::imageio::{self, Image, Role};
use crate::keygen::{self, KeygenConfig, SecretKey};
use crate::metrics;
use crate::obfuscators::{ObfuscatorKind, ObfuscatorSpec, Sticker};
use crate::pipeline::{self, Template};
use crate::trainer::{self, TrainConfig};

pub const KEY_ENV: &str = "PROFACE_KEY";

#[derive(Debug, Parser)]
#[command(name = "proface", version, about = "Reversible, password-protected face obfuscation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Show what a password derives to.
    KeygenInspect(KeygenInspectArgs),
    /// Write a freshly initialized (identity) model.
    InitModel(InitModelArgs),
    /// Protect an image behind an obfuscated look.
    Protect(ProtectArgs),
    /// Recover an image from its protected version.
    Recover(RecoverArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a model on a set of images.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct KeyArg {
    /// Password; falls back to the PROFACE_KEY environment variable.
    #[arg(long, env = KEY_ENV, hide_env_values = true)]
    pub key: String,
}

impl KeyArg {
    fn secret(&self) -> Result<SecretKey> {
        SecretKey::new(self.key.as_bytes())
    }
}

#[derive(Debug, Args)]
pub struct KeygenInspectArgs {
    #[command(flatten)]
    pub key: KeyArg,
    /// Image side the key map is derived for.
    #[arg(long, default_value_t = 112)]
    pub side: usize,
    /// Read salt and iterations from this model instead of the defaults.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Save the +-1 key map as a grayscale image.
    #[arg(long)]
    pub bitmap_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long, default_value_t = 32)]
    pub growth: usize,
    #[arg(long, default_value_t = 112)]
    pub side: usize,
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    /// randwr or obfswr
    #[arg(long, default_value = "randwr")]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ProtectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub key: KeyArg,
    /// gb, pl, mb or ms, with the evaluation settings.
    #[arg(long, conflicts_with = "template", required_unless_present = "template")]
    pub obfuscator: Option<String>,
    /// Use this image as the obfuscated look instead.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// RGBA sticker for the mask obfuscator.
    #[arg(long)]
    pub sticker: Option<PathBuf>,
    /// Also write the protection byproduct here. It can reveal the
    /// original; leave it off unless you need it.
    #[arg(long)]
    pub keep_byproduct: Option<PathBuf>,
    /// Center-crop and resize inputs to the model size instead of failing.
    #[arg(long)]
    pub resize: bool,
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub key: KeyArg,
    /// Also dump the unquantized recovered tensor (see `write_tensor`).
    #[arg(long)]
    pub tensor_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` training options; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Folder of training images; procedural faces are used otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of procedural faces.
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Extra `key=value` options, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Folder of images; procedural faces are used otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub images: usize,
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub key: KeyArg,
    /// Comma-separated obfuscators to evaluate.
    #[arg(long, default_value = "gb,pl,mb,ms")]
    pub obfuscators: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::EmptyKey => 1,
        Error::Io { .. } | Error::Codec { .. } => 2,
        Error::ShapeMismatch { .. }
        | Error::Dimension(_)
        | Error::Format(_)
        | Error::NonScalarLoss { .. }
        | Error::NonFinite(_)
        | Error::Invariant(_) => 3,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::KeygenInspect(a) => keygen_inspect(a),
        Command::InitModel(a) => init_model(a),
        Command::Protect(a) => protect(a),
        Command::Recover(a) => recover(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn load_model(path: &Path) -> Result<FlowModel> {
    Ok(trainer::load_checkpoint(path)?.model)
}

fn load_input(path: &Path, side: usize, resize: bool) -> Result<Image> {
    let img = imageio::decode_image(path)?;
    if img.height() == side && img.width() == side {
        return Ok(img);
    }
    if resize {
        return imageio::center_crop_resize(&img, side);
    }
    Err(Error::shape(
        "input",
        format!(
            "{} is {}x{} but the model works on {side}x{side} (pass --resize to crop)",
            path.display(),
            img.width(),
            img.height()
        ),
    ))
}

fn keygen_inspect(a: KeygenInspectArgs) -> Result<()> {
    let cfg = match &a.model {
        Some(p) => load_model(p)?.config.keygen,
        None => KeygenConfig::default(),
    };
    let key = a.key.secret()?;
    println!("side = {}", a.side);
    println!("iterations = {}", cfg.iterations);
    println!("salt = {}", hex(&cfg.salt));
    let bits = keygen::derive_bitmap(&key, a.side, a.side, &cfg)?;
    let head = keygen::derive_bytes(&key, &cfg, 16);
    println!("first_bytes = {}", hex(&head));
    let ones = bits.signs().iter().filter(|&&s| s > 0).count();
    println!("positive_fraction = {:.4}", ones as f64 / bits.signs().len() as f64);
    let map = keygen::keygen(&key, a.side, a.side, &cfg)?;
    println!("secret_map_shape = {:?}", map.tensor().shape());
    let mut counts = [0usize; 5];
    for v in map.tensor().data() {
        counts[(*v + 2.0) as usize] += 1;
    }
    println!("secret_map_values = -2:{} -1:{} 0:{} 1:{} 2:{}", counts[0], counts[1], counts[2], counts[3], counts[4]);
    if let Some(out) = &a.bitmap_out {
        let t = bits.to_tensor();
        let img = Image::from_fn(a.side, a.side, Role::Original, |_, y, x| {
            (t.data()[y * a.side + x] + 1.0) / 2.0
        });
        imageio::save_image(&img, out)?;
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn init_model(a: InitModelArgs) -> Result<()> {
    let cfg = FlowConfig {
        blocks: a.blocks,
        growth: a.growth,
        alpha: a.alpha,
        side: a.side,
        mode: WrongRecoveryMode::parse(&a.mode)?,
        keygen: KeygenConfig::default(),
    };
    let model = FlowModel::init(cfg, a.seed)?;
    println!(
        "blocks = {}\ngrowth = {}\nside = {}\nalpha = {}\nmode = {}\nseed = {}\nparameters = {}",
        a.blocks,
        a.growth,
        a.side,
        a.alpha,
        model.config.mode.name(),
        a.seed,
        model.param_count()
    );
    trainer::save_checkpoint(&model, None, &a.out)
}

fn protect(a: ProtectArgs) -> Result<()> {
    let key = a.key.secret()?;
    let model = load_model(&a.model)?;
    let side = model.config.side;
    let x = load_input(&a.input, side, a.resize)?;
    println!("model = {}", a.model.display());
    println!("input = {}", a.input.display());
    println!("output = {}", a.out.display());
    let template_img;
    let spec;
    let template = match (&a.obfuscator, &a.template) {
        (_, Some(path)) => {
            template_img = load_input(path, side, a.resize)?;
            println!("template = {}", path.display());
            Template::Image(&template_img)
        }
        (Some(name), None) => {
            let kind: ObfuscatorKind = name.parse()?;
            spec = match (kind, &a.sticker) {
                (ObfuscatorKind::Mask, Some(p)) => {
                    let (color, alpha) = imageio::load_rgba(p)?;
                    ObfuscatorSpec::Mask {
                        sticker: Some(Sticker::new(color, alpha)?),
                        region: None,
                    }
                }
                _ => ObfuscatorSpec::eval(kind),
            };
            println!("obfuscator = {spec:?}");
            Template::Obfuscate(&spec)
        }
        (None, None) => return Err(Error::InvalidConfig("pass --obfuscator or --template".into())),
    };
    let out = pipeline::protect(&model, &x, template, &key)?;
    imageio::save_image(&out.protected, &a.out)?;
    match &a.keep_byproduct {
        Some(path) => {
            imageio::save_image(&out.byproduct, path)?;
            println!("byproduct = {}", path.display());
        }
        None => println!("byproduct = discarded"),
    }
    Ok(())
}

fn recover(a: RecoverArgs) -> Result<()> {
    let key = a.key.secret()?;
    let model = load_model(&a.model)?;
    let protected = load_input(&a.input, model.config.side, false)?.with_role(Role::Protected);
    println!("model = {}", a.model.display());
    println!("input = {}", a.input.display());
    println!("output = {}", a.out.display());
    let out = pipeline::recover(&model, &protected, &key)?;
    imageio::save_image(&out.recovered, &a.out)?;
    if let Some(path) = &a.tensor_out {
        write_tensor(&out.recovered, path)?;
        println!("tensor = {}", path.display());
    }
    Ok(())
}

/// Writes an image's values as three little-endian u32 dimensions
/// (channels, height, width) followed by little-endian f32 samples.
pub fn write_tensor(img: &Image, path: &Path) -> Result<()> {
    let t = img.tensor();
    let mut bytes = Vec::with_capacity(12 + 4 * t.len());
    for d in t.shape() {
        bytes.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(mode) = &a.mode {
        cfg.mode = WrongRecoveryMode::parse(mode)?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let data = match &a.data {
        Some(dir) => trainer::load_folder(dir, cfg.side)?,
        None => trainer::procedural_faces(a.images, cfg.side, cfg.seed),
    };
    print!("{}", cfg.to_text());
    match &a.data {
        Some(dir) => println!("data = {} ({} images)", dir.display(), data.len()),
        None => println!("data = procedural ({} images)", data.len()),
    }
    let mut t = trainer::Trainer::new(cfg.clone(), data)?;
    let report_every = (cfg.steps / 20).max(1);
    while t.log().len() < cfg.steps {
        let r = t.step()?;
        if (r.step + 1) % report_every == 0 || r.step + 1 == cfg.steps {
            println!(
                "step {} L_P {:.5} L_R {:.5} L_WR {:.5} total {:.5}",
                r.step + 1,
                r.protection,
                r.recovery,
                r.wrong_recovery,
                r.total
            );
            let _ = std::io::stdout().flush();
        }
    }
    let (model, log) = t.into_parts();
    trainer::save_checkpoint(&model, Some(&cfg), &a.out)?;
    if let Some(path) = &a.loss_log {
        trainer::write_loss_csv(&log, path)?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let key = a.key.secret()?;
    let model = load_model(&a.model)?;
    let side = model.config.side;
    let images = match &a.data {
        Some(dir) => trainer::load_folder(dir, side)?,
        None => trainer::procedural_faces(a.images, side, a.seed),
    };
    let specs: Vec<ObfuscatorSpec> = a
        .obfuscators
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse().map(ObfuscatorSpec::eval))
        .collect::<Result<_>>()?;
    println!("model = {}", a.model.display());
    println!("mode = {}", model.config.mode.name());
    println!("images = {}", images.len());
    println!("obfuscators = {}", a.obfuscators);
    println!("seed = {}", a.seed);
    let report = metrics::evaluate_suite(&model, &images, &specs, &key, a.seed)?;
    report.write_csv(&a.report)?;
    println!("{:<24} {:>4} {:>9} {:>7} {:>7}", "pair", "obf", "psnr_db", "ssim", "perc");
    for row in report.aggregate() {
        let label = row.pair.label(row.mode);
        println!(
            "{label:<24} {:>4} {:>9.2} {:>7.4} {:>7.4}",
            row.obfuscator.short_name(),
            row.psnr_db,
            row.ssim,
            row.perc
        );
    }
    Ok(())
}
