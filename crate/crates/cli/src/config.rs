//! Plain-text key-value run configuration: `key = value` lines, `#`
//! comments. Unknown keys are rejected; the effective configuration is
//! echoed into every run directory and hashed into every artifact.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;

use aupt_core::augment::AugmentConfig;
use aupt_core::trainer::TrainConfig;
use sha2::{Digest, Sha256};

pub type CliResult<T> = Result<T, String>;

/// Parsed config file contents; keys are consumed as commands apply them so
/// leftovers can be reported as unknown.
pub struct KvConfig {
    map: BTreeMap<String, String>,
    source: String,
}

impl KvConfig {
    pub fn empty() -> Self {
        KvConfig { map: BTreeMap::new(), source: "<none>".into() }
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(format!("{}:{}: expected `key = value`, got {raw:?}", path.display(), lineno + 1));
            };
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(format!("{}:{}: duplicate key {key:?}", path.display(), lineno + 1));
            }
        }
        Ok(KvConfig { map, source: path.display().to_string() })
    }

    /// Consume one key, parsing it into `slot` when present.
    pub fn take<T: std::str::FromStr>(&mut self, key: &str, slot: &mut T) -> CliResult<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.map.remove(key) {
            *slot = raw.parse().map_err(|e| format!("{}: key {key} = {raw:?}: {e}", self.source))?;
        }
        Ok(())
    }

    pub fn take_optional_usize(&mut self, key: &str, slot: &mut Option<usize>) -> CliResult<()> {
        if let Some(raw) = self.map.remove(key) {
            *slot = if raw == "none" {
                None
            } else {
                Some(raw.parse().map_err(|e| format!("{}: key {key} = {raw:?}: {e}", self.source))?)
            };
        }
        Ok(())
    }

    /// Partition into two sub-configs by key prefix; keys carrying neither
    /// prefix are unknown.
    pub fn split_by_prefixes(self, a: &str, b: &str) -> CliResult<(KvConfig, KvConfig)> {
        let mut map_a = BTreeMap::new();
        let mut map_b = BTreeMap::new();
        let mut unknown = Vec::new();
        for (k, v) in self.map {
            if let Some(rest) = k.strip_prefix(a) {
                map_a.insert(rest.to_string(), v);
            } else if let Some(rest) = k.strip_prefix(b) {
                map_b.insert(rest.to_string(), v);
            } else {
                unknown.push(k);
            }
        }
        if !unknown.is_empty() {
            return Err(format!(
                "{}: keys must be prefixed {a} or {b}; unknown: {}",
                self.source,
                unknown.join(", ")
            ));
        }
        Ok((
            KvConfig { map: map_a, source: format!("{} [{a}]", self.source) },
            KvConfig { map: map_b, source: format!("{} [{b}]", self.source) },
        ))
    }

    /// All keys must have been consumed.
    pub fn finish(self) -> CliResult<()> {
        if self.map.is_empty() {
            Ok(())
        } else {
            let unknown: Vec<&String> = self.map.keys().collect();
            Err(format!(
                "{}: unknown keys: {}",
                self.source,
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ))
        }
    }
}

/// Training keys shared by the pretrain/finetune/ablate commands.
pub fn apply_train_keys(cfg: &mut KvConfig, train: &mut TrainConfig) -> CliResult<()> {
    cfg.take("lr", &mut train.lr)?;
    cfg.take("beta1", &mut train.beta1)?;
    cfg.take("beta2", &mut train.beta2)?;
    cfg.take("eps", &mut train.eps)?;
    cfg.take("batch_size", &mut train.batch_size)?;
    cfg.take("max_epochs", &mut train.max_epochs)?;
    cfg.take_optional_usize("early_stop_patience", &mut train.early_stop_patience)?;
    cfg.take("convergence_tol", &mut train.convergence_tol)?;
    cfg.take("val_fraction", &mut train.val_fraction)?;
    cfg.take("seed", &mut train.seed)?;

    let mut aug = train.augment;
    cfg.take("flip_prob", &mut aug.flip_prob)?;
    cfg.take("max_rotation_deg", &mut aug.max_rotation_deg)?;
    cfg.take("max_shear", &mut aug.max_shear)?;
    let (mut lo, mut hi) = aug.scale_range;
    cfg.take("scale_lo", &mut lo)?;
    cfg.take("scale_hi", &mut hi)?;
    aug.scale_range = (lo, hi);
    train.augment = aug;
    Ok(())
}

/// Canonical `key = value` rendering of the effective configuration.
pub fn canonical(pairs: &[(String, String)]) -> String {
    let mut sorted: Vec<&(String, String)> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    for (k, v) in sorted {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

/// Short hash of the canonical configuration, stamped into every artifact.
pub fn config_hash(canonical_text: &str) -> String {
    let digest = Sha256::digest(canonical_text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Builder for the effective-config listing.
pub struct Effective {
    pairs: Vec<(String, String)>,
}

impl Effective {
    pub fn new(command: &str) -> Self {
        Effective { pairs: vec![("command".into(), command.into())] }
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.pairs.push((key.into(), value.to_string()));
        self
    }

    pub fn set_train(&mut self, t: &TrainConfig) -> &mut Self {
        self.set("lr", t.lr)
            .set("beta1", t.beta1)
            .set("beta2", t.beta2)
            .set("eps", t.eps)
            .set("batch_size", t.batch_size)
            .set("max_epochs", t.max_epochs)
            .set(
                "early_stop_patience",
                t.early_stop_patience.map(|p| p.to_string()).unwrap_or_else(|| "none".into()),
            )
            .set("convergence_tol", t.convergence_tol)
            .set("val_fraction", t.val_fraction)
            .set("seed", t.seed);
        let AugmentConfig { flip_prob, max_rotation_deg, max_shear, scale_range } = t.augment;
        self.set("flip_prob", flip_prob)
            .set("max_rotation_deg", max_rotation_deg)
            .set("max_shear", max_shear)
            .set("scale_lo", scale_range.0)
            .set("scale_hi", scale_range.1)
    }

    /// Canonical text + hash; echoes to stdout.
    pub fn seal(&self) -> (String, String) {
        let text = canonical(&self.pairs);
        let hash = config_hash(&text);
        (text, hash)
    }
}
