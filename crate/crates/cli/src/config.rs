use crate::failure::Failure;
use derc::corpus::{GeneratorConfig, DEFAULT_SEED};
use derc::distributions::LossConfig;
use derc::fusion::FULL_INPUT_DIM;
use derc::model::ModelConfig;
use derc::train::{OptimConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use toml::{Table, Value};

/// Everything a command reads from configuration, after overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    /// Full-size architecture and optimizer settings.
    pub fn full_size() -> Self {
        let mut c = RunConfig { model: ModelConfig::full_size(), optim: OptimConfig::full_size(), ..Self::default() };
        c.generator.feature_dim = FULL_INPUT_DIM as i64;
        c
    }

    /// Layers `file`, then each `key=value` override, over the default or
    /// full-size base, then validates the result.
    pub fn resolve(
        file: Option<&Path>,
        full_size: bool,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self, Failure> {
        let base = if full_size { Self::full_size() } else { Self::default() };
        let mut tree = Table::try_from(&base).map_err(|e| Failure::config(format!("cannot encode defaults: {e}")))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
            let table: Table = text.parse().map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, table);
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Failure::config(format!("--set expects key=value, got {item:?}")))?;
            set_path(&mut tree, key.trim(), parse_value(raw.trim()))?;
        }
        if let Some(s) = seed {
            let s =
                i64::try_from(s).map_err(|_| Failure::config(format!("seed {s} exceeds the configurable range")))?;
            tree.insert("seed".into(), Value::Integer(s));
        }
        let config: RunConfig = Value::Table(tree).try_into().map_err(|e| Failure::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.generator.validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig { seed: self.seed, ..self.generator.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { model: self.model.clone(), loss: self.loss, optim: self.optim.clone(), seed: self.seed }
    }
}

/// A table carrying a `kind` tag replaces its target wholesale so that
/// switching variants does not leave stale fields behind.
fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) if !src.contains_key("kind") => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn set_path(tree: &mut Table, key: &str, value: Value) -> Result<(), Failure> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::config(format!("invalid key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = tree;
    for p in parents {
        node = match node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(Failure::config(format!("{key}: {p} is not a table"))),
        };
    }
    let mut patch = Table::new();
    patch.insert(last.to_string(), value);
    merge(node, patch);
    Ok(())
}

/// Reads an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Short digest naming a run: the command, its settings and its inputs.
pub fn run_hash(command: &str, settings: &impl Serialize, inputs: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(settings).expect("settings serialize"));
    for i in inputs {
        h.update([0]);
        h.update(i.as_bytes());
    }
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use derc::distributions::LossMode;
    use derc::model::TeacherForcingSchedule;
    use std::io::Write;

    fn sets(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults_resolve_unchanged() {
        assert_eq!(RunConfig::resolve(None, false, &[], None).unwrap(), RunConfig::default());
        assert_eq!(RunConfig::resolve(None, true, &[], None).unwrap(), RunConfig::full_size());
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = RunConfig::resolve(
            None,
            false,
            &sets(&["optim.epochs=3", "loss.mode=HARD", "generator.p_stay=1", "optim.epochs=4"]),
            Some(9),
        )
        .unwrap();
        assert_eq!(c.optim.epochs, 4);
        assert_eq!(c.loss.mode, LossMode::Hard);
        assert_eq!(c.generator.p_stay, 1.0);
        assert_eq!(c.seed, 9);
        assert_eq!(c.generator_config().seed, 9);
        assert_eq!(c.train_config().seed, 9);
    }

    #[test]
    fn schedule_variant_can_be_switched() {
        let c =
            RunConfig::resolve(None, false, &sets(&["optim.schedule={kind=\"linear\", a=1.0, b=0.01}"]), None).unwrap();
        assert_eq!(c.optim.schedule, TeacherForcingSchedule::Linear { a: 1.0, b: 0.01 });
    }

    #[test]
    fn file_values_sit_between_defaults_and_overrides() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "seed = 5\n[model]\nmodel_dim = 32\nheads = 4\n[optim]\nepochs = 2").unwrap();
        let c = RunConfig::resolve(Some(f.path()), false, &sets(&["optim.epochs=6"]), None).unwrap();
        assert_eq!((c.seed, c.model.model_dim, c.model.heads, c.optim.epochs), (5, 32, 4, 6));
        assert_eq!(c.model.encoder_blocks, ModelConfig::default().encoder_blocks);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::resolve(None, false, &sets(&["model.widht=3"]), None).unwrap_err();
        assert!(e.message.contains("widht"), "{}", e.message);
        let e = RunConfig::resolve(None, false, &sets(&["generator.seed=3"]), None).unwrap_err();
        assert!(e.message.contains("seed"), "{}", e.message);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let e = RunConfig::resolve(None, false, &sets(&["generator.train_dialogues=-4"]), None).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("generator.train_dialogues"), "{}", e.message);
        let e = RunConfig::resolve(None, false, &sets(&["optim.epochs=-1"]), None).unwrap_err();
        assert_eq!(e.code, 2);
    }

    #[test]
    fn hash_depends_on_every_part() {
        let c = RunConfig::default();
        let h = run_hash("train", &c, &["abc"]);
        assert_eq!(h.len(), 12);
        assert_eq!(h, run_hash("train", &c, &["abc"]));
        assert_ne!(h, run_hash("generate", &c, &["abc"]));
        assert_ne!(h, run_hash("train", &c, &["abd"]));
        assert_ne!(h, run_hash("train", &RunConfig { seed: 1, ..c.clone() }, &["abc"]));
    }
}
