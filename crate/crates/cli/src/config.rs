//! Layered run configuration: defaults, then a TOML file, then `--set` overrides.

use std::path::Path;

use anyhow::{Context, Result};
use posdiffae::dataset::DatasetConfig;
use posdiffae::networks::NetConfig;
use posdiffae::restoration::{JpegRestoreConfig, DEFAULT_WHITENESS_THRESHOLD, TEAR_STEPS};
use posdiffae::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Marks errors that should exit with the usage/config status.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `desk`, `tiny` or `full`; the named fields below override it.
    pub preset: String,
    pub f_dim: Option<usize>,
    pub encoder_width: Option<usize>,
    pub denoiser_width: Option<usize>,
    pub time_dim: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            f_dim: None,
            encoder_width: None,
            denoiser_width: None,
            time_dim: None,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreSection {
    pub tear_steps: usize,
    pub whiteness_threshold: f32,
    pub qf: u8,
    /// Overrides the table row for `qf` when set.
    pub t_prime: Option<usize>,
    pub n_steps: Option<usize>,
    pub seed: u64,
}

impl Default for RestoreSection {
    fn default() -> Self {
        Self {
            tear_steps: TEAR_STEPS,
            whiteness_threshold: DEFAULT_WHITENESS_THRESHOLD,
            qf: 5,
            t_prime: None,
            n_steps: None,
            seed: 0,
        }
    }
}

impl RestoreSection {
    pub fn jpeg(&self) -> JpegRestoreConfig {
        let mut cfg = JpegRestoreConfig::for_qf(self.qf);
        if let Some(t) = self.t_prime {
            cfg.t_prime = t;
        }
        if let Some(n) = self.n_steps {
            cfg.n_steps = n;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Subsample every region to the smallest region's count before probing.
    pub balance: bool,
    /// Standardise latent dimensions with training-set statistics.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            balance: true,
            standardize: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub restore: RestoreSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Network shape implied by the preset, its overrides, the patch size and `T`.
    pub fn net(&self) -> Result<NetConfig> {
        let mut net = match self.model.preset.as_str() {
            "desk" => NetConfig::desk(),
            "tiny" => NetConfig::tiny(),
            "full" => NetConfig::full(),
            other => return Err(config_err(format!("model.preset: unknown preset `{other}`"))),
        };
        net.height = self.data.patch;
        net.width = self.data.patch;
        net.steps = self.train.steps;
        if let Some(v) = self.model.f_dim {
            net.f_dim = v;
        }
        if let Some(v) = self.model.encoder_width {
            net.encoder_width = v;
        }
        if let Some(v) = self.model.denoiser_width {
            net.denoiser_width = v;
        }
        if let Some(v) = self.model.time_dim {
            net.time_dim = v;
        }
        net.validate().map_err(|e| config_err(format!("model: {e}")))?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let named = |section: &str, r: posdiffae::Result<()>| {
            r.map_err(|e| config_err(format!("{section}: {e}")))
        };
        named("data", self.data.validate())?;
        named("train", self.train.validate())?;
        self.net()?;
        if self.restore.tear_steps == 0 || self.restore.tear_steps > self.train.steps {
            return Err(config_err(format!(
                "restore.tear_steps: must be in 1..={}",
                self.train.steps
            )));
        }
        let jpeg = self.restore.jpeg();
        if jpeg.t_prime > self.train.steps || jpeg.n_steps == 0 {
            return Err(config_err("restore.t_prime / restore.n_steps: out of range"));
        }
        Ok(())
    }

    /// Applies `--seed` to every seeded section.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self.restore.seed = seed;
        self.eval.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `a.b=value`; the value is read as TOML, falling back to a bare string.
fn parse_override(s: &str) -> Result<Table> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_err(format!("override `{s}` has an empty key")));
    }
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let mut out = Table::new();
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = &mut out;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("fresh table");
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(out)
}

pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut table = Table::try_from(RunConfig::default())?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let file: Table = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
        merge(&mut table, file);
    }
    for o in overrides {
        merge(&mut table, parse_override(o)?);
    }
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(format!("config: {e}")))?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "").unwrap();
        let cfg = load_config(Some(&p), &[], None).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.train.lambda1, cfg.train.lambda2, cfg.train.lambda3), (1.0, 0.001, 0.001));
        assert_eq!(cfg.train.steps, 1000);
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nlambda2 = 0.5\nepochs = 3\n").unwrap();
        let cfg = load_config(Some(&p), &["train.lambda2=0".into(), "model.preset=tiny".into()], Some(4)).unwrap();
        assert_eq!(cfg.train.lambda2, 0.0);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.preset, "tiny");
        assert_eq!((cfg.data.seed, cfg.train.seed), (4, 4));
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        for o in ["train.epochs=0", "train.bogus=1", "nosuch.x=1", "train", "model.preset=huge"] {
            let err = load_config(None, &[o.into()], None).unwrap_err();
            assert!(err.downcast_ref::<ConfigError>().is_some(), "{o}: {err}");
        }
        let err = load_config(None, &["train.epochs=0".into()], None).unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = load_config(None, &["data.sections=4".into()], Some(2)).unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
