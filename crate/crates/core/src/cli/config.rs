// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one TOML file, overridable with `--set key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppo::PpoConfig;
use crate::rng::derive_seed;
use crate::steering::SteeringConfig;
use crate::toylm::PlantedTaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One policy at a single hook layer.
    #[default]
    CrlToken,
    /// One shared policy acting at several layers at once.
    CrlLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSource {
    #[default]
    Planted,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub source: TaskSource,
    /// Used when `source = "planted"`. Its `seed` is derived from the root seed.
    pub planted: PlantedTaskSpec,
    /// The remaining fields describe a `source = "files"` task.
    pub model: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub answers: Vec<usize>,
    pub horizon: usize,
    /// Optional `index<TAB>label` file for reports.
    pub labels: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            source: TaskSource::Planted,
            planted: PlantedTaskSpec::default(),
            model: None,
            train: None,
            heldout: None,
            answers: Vec::new(),
            horizon: 1,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaeSource {
    /// The SAE built alongside the planted task.
    #[default]
    Planted,
    File,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeConfig {
    pub source: SaeSource,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream derives from it by name.
    pub seed: u64,
    pub mode: Mode,
    /// Root for command outputs. Falls back to `$CRL_OUTPUT_ROOT`, then `runs`.
    pub output_dir: Option<PathBuf>,
    pub task: TaskConfig,
    pub sae: SaeConfig,
    pub steering: SteeringConfig,
    pub ppo: PpoConfig,
}

/// Keys that exist in the component structs but are owned by the run.
const DERIVED_KEYS: [(&str, &str); 2] = [
    ("task.planted.seed", "planting seed derives from the root `seed`"),
    ("ppo.seed", "training seed is the root `seed`"),
];

impl RunConfig {
    /// Every semantic problem, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let layers = &self.steering.layers;
        match self.mode {
            Mode::CrlToken if layers.len() != 1 => {
                v.push(format!("mode crl-token needs exactly one steering layer, got {}", layers.len()))
            }
            Mode::CrlLayer if layers.len() < 2 => {
                v.push(format!("mode crl-layer needs at least two steering layers, got {}", layers.len()))
            }
            _ => {}
        }
        v.extend(self.steering.violations());
        v.extend(self.ppo.violations());
        let exists = |v: &mut Vec<String>, key: &str, p: &Option<PathBuf>, required: bool| match p {
            Some(p) if !p.exists() => v.push(format!("{key}: {} does not exist", p.display())),
            None if required => v.push(format!("{key} is required")),
            _ => {}
        };
        match self.task.source {
            TaskSource::Planted => {
                let p = &self.task.planted;
                v.extend(p.violations().into_iter().map(|m| format!("task.planted: {m}")));
                for &l in layers {
                    if l == 0 || l > p.n_layers {
                        v.push(format!("steering layer {l} outside [1, {}]", p.n_layers));
                    }
                }
            }
            TaskSource::Files => {
                exists(&mut v, "task.model", &self.task.model, true);
                exists(&mut v, "task.train", &self.task.train, true);
                exists(&mut v, "task.heldout", &self.task.heldout, true);
                if self.task.answers.is_empty() {
                    v.push("task.answers must list the valid answer tokens".into());
                }
                if self.task.horizon == 0 {
                    v.push("task.horizon must be at least 1".into());
                }
                if self.sae.source == SaeSource::Planted {
                    v.push("sae.source = \"planted\" needs task.source = \"planted\"".into());
                }
            }
        }
        exists(&mut v, "task.labels", &self.task.labels, false);
        exists(&mut v, "sae.path", &self.sae.path, self.sae.source == SaeSource::File);
        v
    }

    pub fn horizon(&self) -> usize {
        match self.task.source {
            TaskSource::Planted => self.task.planted.horizon,
            TaskSource::Files => self.task.horizon,
        }
    }

    /// The planted spec with its seed taken from the root seed's planting stream.
    pub fn planted_spec(&self) -> PlantedTaskSpec {
        PlantedTaskSpec {
            seed: derive_seed(self.seed, "planting", 0),
            ..self.task.planted.clone()
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            seed: self.seed,
            ..self.ppo.clone()
        }
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os("CRL_OUTPUT_ROOT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Canonical TOML, without the derived component seeds.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serialises");
        for (key, _) in DERIVED_KEYS {
            remove_key(&mut table, key);
        }
        toml::to_string_pretty(&table).expect("table serialises")
    }

    /// FNV-1a over the canonical TOML form.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_toml().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn line_of(text: &str, e: &toml::de::Error) -> usize {
    e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0)
}

fn has_key(table: &toml::Table, dotted: &str) -> bool {
    let mut t = table;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match t.get(*p) {
            Some(toml::Value::Table(inner)) if i + 1 < parts.len() => t = inner,
            Some(_) if i + 1 == parts.len() => return true,
            _ => return false,
        }
    }
    false
}

fn remove_key(table: &mut toml::Table, dotted: &str) {
    let (parents, last) = dotted.rsplit_once('.').unwrap_or(("", dotted));
    let mut t = table;
    for p in parents.split('.').filter(|p| !p.is_empty()) {
        match t.get_mut(p) {
            Some(toml::Value::Table(inner)) => t = inner,
            _ => return,
        }
    }
    t.remove(last);
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to a string.
fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::ConfigInvalid(vec![format!("--set {s:?}: expected key=value")]))?;
    let key: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if key.iter().any(String::is_empty) {
        return Err(Error::ConfigInvalid(vec![format!("--set {s:?}: empty key segment")]));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

fn apply_override(table: &mut toml::Table, key: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = key.split_last().expect("nonempty key");
    let mut t = table;
    for p in parents {
        let entry = t.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = match entry {
            toml::Value::Table(inner) => inner,
            _ => {
                return Err(Error::ConfigInvalid(vec![format!(
                    "--set {}: {p} is not a section",
                    key.join(".")
                )]))
            }
        };
    }
    t.insert(last.clone(), value);
    Ok(())
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

/// Parses `text` (relative paths resolve against `base`), applies overrides
/// and validates.
pub fn parse_config(text: &str, base: &Path, overrides: &[String]) -> Result<RunConfig> {
    // Deserialising the file alone first gives errors a line number.
    toml::from_str::<RunConfig>(text).map_err(|e| Error::ConfigParse {
        line: line_of(text, &e),
        message: e.message().to_string(),
    })?;
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::ConfigParse {
        line: line_of(text, &e),
        message: e.message().to_string(),
    })?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        apply_override(&mut table, &k, v)?;
    }
    let mut problems: Vec<String> = DERIVED_KEYS
        .iter()
        .filter(|(k, _)| has_key(&table, k))
        .map(|(k, why)| format!("{k} cannot be set: {why}"))
        .collect();
    let mut cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::ConfigInvalid(vec![format!("override: {}", e.message())]))?;
    for p in [
        &mut cfg.task.model,
        &mut cfg.task.train,
        &mut cfg.task.heldout,
        &mut cfg.task.labels,
        &mut cfg.sae.path,
        &mut cfg.output_dir,
    ] {
        resolve(base, p);
    }
    problems.extend(cfg.violations());
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::ConfigInvalid(problems))
    }
}

/// Loads a config file; `None` means all defaults (the planted task).
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            parse_config(&text, &base, overrides)
        }
        None => parse_config("", Path::new("."), overrides),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steering::Coefficient;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("seed = 7\n[task]\nsource = \"planted\"\n", Path::new("."), &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ppo, PpoConfig::default());
        assert_eq!(cfg.steering, SteeringConfig::default());
        assert_eq!(cfg.mode, Mode::CrlToken);
        assert_eq!(cfg.ppo_config().seed, 7);
    }

    #[test]
    fn crl_layer_needs_two_layers() {
        let err = parse_config("mode = \"crl-layer\"\n", Path::new("."), &[]).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid(ref v) if v[0].contains("at least two")));
        let ok = parse_config(
            "mode = \"crl-layer\"\n[steering]\nlayers = [1, 2]\n",
            Path::new("."),
            &[],
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn round_trip() {
        let cfg = parse_config(
            "seed = 3\n[steering]\ncoefficient = 1.5\n[ppo]\nmax_steps = 10\n",
            Path::new("."),
            &[],
        )
        .unwrap();
        let again = parse_config(&cfg.to_toml(), Path::new("."), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_config("seed = 1\n\n[ppo]\nbogus = 3\n", Path::new("."), &[]).unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 4, .. }), "{err}");
        let err = parse_config("seed = \n", Path::new("."), &[]).unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 1, .. }), "{err}");
    }

    #[test]
    fn violations_are_exhaustive() {
        let text = "[ppo]\nclip_eps = -1.0\nbatch_size = 0\n[task]\nsource = \"files\"\n";
        let Error::ConfigInvalid(v) = parse_config(text, Path::new("."), &[]).unwrap_err() else {
            panic!("expected violations");
        };
        assert!(v.len() >= 6, "{v:?}");
    }

    #[test]
    fn overrides_win_and_derived_seeds_are_rejected() {
        let cfg = parse_config(
            "[steering]\ncoefficient = 2.0\n",
            Path::new("."),
            &["steering.coefficient=0".into(), "ppo.max_steps=5".into(), "task.planted.n_train=16".into()],
        )
        .unwrap();
        assert_eq!(cfg.steering.coefficient, Coefficient::Fixed(0.0));
        assert_eq!(cfg.ppo.max_steps, 5);
        assert_eq!(cfg.task.planted.n_train, 16);
        let cal = parse_config("", Path::new("."), &["steering.coefficient=calibrated".into()]).unwrap();
        assert_eq!(cal.steering.coefficient, Coefficient::Calibrated);
        assert!(parse_config("", Path::new("."), &["ppo.seed=3".into()]).is_err());
        assert!(parse_config("", Path::new("."), &["nokey".into()]).is_err());
        assert!(parse_config("", Path::new("."), &["ppo.nope=1".into()]).is_err());
    }
}
