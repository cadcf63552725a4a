mod commands;
mod config;
mod manifest;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use posdiffae::dataset::Dataset;

use config::{load_config, ConfigError, RunConfig};
use manifest::{hash_outputs, hash_path, InputRecord, RunManifest, CONFIG_FILE};

#[derive(Parser)]
#[command(name = "posdiffae", version, about = "Position-aware diffusion autoencoder for histology patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML configuration file; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed applied to every seeded section of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must be absent or empty.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone, Debug)]
struct ModelData {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand, Clone, Debug)]
enum Command {
    /// Generate the synthetic section dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the autoencoder on clean training patches.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write the latent code of every clean patch.
    Encode {
        #[command(flatten)]
        io: ModelData,
        #[command(flatten)]
        common: Common,
    },
    /// Linear region classifier on latents.
    Classify {
        #[command(flatten)]
        io: ModelData,
        #[command(flatten)]
        common: Common,
    },
    /// Position regression from latents.
    Regress {
        #[command(flatten)]
        io: ModelData,
        #[command(flatten)]
        common: Common,
    },
    /// Inpaint tear artifacts in one image.
    RestoreTear {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Binary mask PNG; detected from the image when omitted.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Remove JPEG artifacts from one PNG or a directory of PNGs.
    RestoreJpeg {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// All probes and restoration metrics on a dataset.
    Evaluate {
        #[command(flatten)]
        io: ModelData,
        #[command(flatten)]
        common: Common,
    },
    /// Two-dimensional projection of validation latents.
    PlotLatents {
        #[command(flatten)]
        io: ModelData,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a recorded command and compare its outputs byte for byte.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Inputs of a run by role, in the order they are recorded.
type Inputs = Vec<(&'static str, PathBuf)>;

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Encode { .. } => "encode",
            Command::Classify { .. } => "classify",
            Command::Regress { .. } => "regress",
            Command::RestoreTear { .. } => "restore-tear",
            Command::RestoreJpeg { .. } => "restore-jpeg",
            Command::Evaluate { .. } => "evaluate",
            Command::PlotLatents { .. } => "plot-latents",
            Command::Replay { .. } => "replay",
        }
    }

    fn split(self) -> (Common, Inputs) {
        let md = |io: ModelData| vec![("model", io.model), ("data", io.data)];
        match self {
            Command::GenData { common } => (common, vec![]),
            Command::Train { data, common } => (common, vec![("data", data)]),
            Command::Encode { io, common }
            | Command::Classify { io, common }
            | Command::Regress { io, common }
            | Command::Evaluate { io, common }
            | Command::PlotLatents { io, common } => (common, md(io)),
            Command::RestoreTear { model, input, mask, common } => {
                let mut v = vec![("model", model), ("input", input)];
                v.extend(mask.map(|m| ("mask", m)));
                (common, v)
            }
            Command::RestoreJpeg { model, input, common } => (common, vec![("model", model), ("input", input)]),
            Command::Replay { .. } => unreachable!("replay has no common arguments"),
        }
    }
}

fn input<'a>(inputs: &'a Inputs, role: &str) -> Result<&'a Path> {
    inputs
        .iter()
        .find(|(r, _)| *r == role)
        .map(|(_, p)| p.as_path())
        .with_context(|| format!("missing input `{role}`"))
}

fn dispatch(command: &str, cfg: &RunConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    let get = |role| input(inputs, role);
    match command {
        "gen-data" => commands::gen_data(cfg, out),
        "train" => commands::train(cfg, get("data")?, out),
        "encode" => commands::encode(cfg, get("model")?, get("data")?, out),
        "classify" => commands::classify(cfg, get("model")?, get("data")?, out),
        "regress" => commands::regress(cfg, get("model")?, get("data")?, out),
        "restore-tear" => commands::restore_tear(cfg, get("model")?, get("input")?, get("mask").ok(), out),
        "restore-jpeg" => commands::restore_jpeg(cfg, get("model")?, get("input")?, out),
        "evaluate" => commands::evaluate(cfg, get("model")?, get("data")?, out),
        "plot-latents" => commands::plot_latents(cfg, get("model")?, get("data")?, out),
        other => bail!("unknown command `{other}`"),
    }
}

fn default_out(command: &str) -> PathBuf {
    match std::env::var_os("POSDIFFAE_OUT") {
        Some(root) => PathBuf::from(root).join(command),
        None => PathBuf::from("runs").join(command),
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            bail!("output path {} is not a directory", out.display());
        }
        if fs::read_dir(out)?.next().is_some() {
            bail!("output directory {} is not empty", out.display());
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Runs one command into a fresh directory and records its manifest.
fn execute(command: &str, mut cfg: RunConfig, inputs: &Inputs, out: &Path) -> Result<RunManifest> {
    // Commands that read a dataset describe their data with the dataset's own generator settings.
    if command != "gen-data" {
        if let Some((_, data)) = inputs.iter().find(|(r, _)| *r == "data") {
            let ds = Dataset::load_filtered(data, |_| false)
                .with_context(|| format!("loading dataset {}", data.display()))?;
            cfg.data = ds.manifest.config;
        }
    }
    let records = inputs
        .iter()
        .map(|(role, path)| {
            Ok(InputRecord {
                role: role.to_string(),
                path: path.clone(),
                sha256: hash_path(path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    prepare_out(out)?;
    let config_text = cfg.to_toml()?;
    fs::write(out.join(CONFIG_FILE), &config_text)?;
    dispatch(command, &cfg, inputs, out)?;
    let m = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config_text,
        inputs: records,
        outputs: hash_outputs(out)?,
    };
    m.write(out)?;
    Ok(m)
}

fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<bool> {
    let recorded = RunManifest::read(manifest_path)?;
    let cfg: RunConfig = toml::from_str(&recorded.config)
        .map_err(|e| ConfigError(format!("recorded config: {e}")))?;
    cfg.validate()?;
    let roles = ["data", "model", "input", "mask"];
    let mut inputs: Inputs = Vec::new();
    for rec in &recorded.inputs {
        let role = roles
            .iter()
            .find(|r| **r == rec.role)
            .with_context(|| format!("unknown input role `{}`", rec.role))?;
        let now = hash_path(&rec.path)?;
        if now != rec.sha256 {
            bail!("input `{}` ({}) changed since the recorded run", rec.role, rec.path.display());
        }
        inputs.push((role, rec.path.clone()));
    }
    let out = out.unwrap_or_else(|| default_out("replay"));
    let fresh = execute(&recorded.command, cfg, &inputs, &out)?;
    let mut same = true;
    for (rel, h) in &recorded.outputs {
        match fresh.outputs.get(rel) {
            Some(g) if g == h => {}
            Some(_) => {
                same = false;
                println!("differs: {rel}");
            }
            None => {
                same = false;
                println!("missing: {rel}");
            }
        }
    }
    for rel in fresh.outputs.keys().filter(|k| !recorded.outputs.contains_key(*k)) {
        same = false;
        println!("extra: {rel}");
    }
    println!(
        "{}: {} outputs compared",
        if same { "identical" } else { "different" },
        recorded.outputs.len()
    );
    Ok(same)
}

fn run(cli: Cli) -> Result<bool> {
    if let Command::Replay { manifest, out } = cli.command {
        return replay(&manifest, out);
    }
    let name = cli.command.name();
    let (common, inputs) = cli.command.split();
    let cfg = load_config(common.config.as_deref(), &common.set, common.seed)?;
    let out = common.out.unwrap_or_else(|| default_out(name));
    execute(name, cfg, &inputs, &out)?;
    println!("{}", out.display());
    Ok(true)
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>() || matches!(c.downcast_ref::<posdiffae::Error>(), Some(posdiffae::Error::InvalidConfig { .. }))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
