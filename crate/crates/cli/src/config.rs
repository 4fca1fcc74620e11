//! Flat `section.key` configuration: defaults, TOML files, `--set` overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use famkd::data::{Augment, SyntheticSpec};
use famkd::distill::{DistillMode, DistillPlan, HeadConfig};
use famkd::fam::Branches;
use famkd::model::ArchDescriptor;
use famkd::trainer::TrainConfig;
use famkd::Error;

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Float(f64),
    Int(u64),
    Bool(bool),
    Str(String),
    List(Vec<u64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Float,
    Int,
    Bool,
    Str,
    List,
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Float(v) => write!(f, "{v}"),
            Value::Int(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Str(v) => write!(f, "{v}"),
            Value::List(v) => write!(f, "{v:?}"),
        }
    }
}

impl Value {
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Float(v) => serde_json::json!(v),
            Value::Int(v) => serde_json::json!(v),
            Value::Bool(v) => serde_json::json!(v),
            Value::Str(v) => serde_json::json!(v),
            Value::List(v) => serde_json::json!(v),
        }
    }
}

/// Every accepted key with its default. The README's key table mirrors this.
fn defaults() -> Vec<(&'static str, Value)> {
    use Value::*;
    vec![
        ("fam.hpf_fraction", Float(0.01)),
        ("fam.global_branch", Bool(true)),
        ("fam.local_branch", Bool(true)),
        ("distill.mode", Str("review".into())),
        ("distill.alpha", Float(1.0)),
        ("distill.teacher_stages", List(vec![0, 1, 2])),
        ("distill.student_stages", List(vec![0, 1, 2])),
        ("la.window", Int(3)),
        ("crossat.scale", Bool(true)),
        ("crossat.dim", Int(16)),
        ("trainer.epochs", Int(60)),
        ("trainer.batch_size", Int(64)),
        ("trainer.lr", Float(0.05)),
        ("trainer.momentum", Float(0.9)),
        ("trainer.weight_decay", Float(5e-4)),
        ("trainer.milestones", List(vec![30, 45])),
        ("trainer.lr_decay", Float(0.1)),
        ("trainer.seed", Int(0)),
        ("model.depth", Int(20)),
        ("model.width", Int(1)),
        ("data.augment", Str("auto".into())),
        ("data.classes", Int(10)),
        ("data.per_class", Int(64)),
        ("data.test_per_class", Int(50)),
        ("data.seed", Int(1)),
        ("data.noise", Float(SyntheticSpec::DEFAULT_NOISE)),
        ("data.angle_jitter", Float(0.0)),
        ("data.freq_jitter", Float(0.0)),
        ("data.distractor", Float(0.0)),
    ]
}

fn kind(v: &Value) -> Kind {
    match v {
        Value::Float(_) => Kind::Float,
        Value::Int(_) => Kind::Int,
        Value::Bool(_) => Kind::Bool,
        Value::Str(_) => Kind::Str,
        Value::List(_) => Kind::List,
    }
}

fn bad(key: &str, msg: impl fmt::Display) -> Error {
    Error::Param(format!("config key '{key}': {msg}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl RunConfig {
    fn expected(&self, key: &str) -> Result<Kind, Error> {
        self.values
            .get(key)
            .map(kind)
            .ok_or_else(|| Error::Param(format!("unknown config key '{key}'")))
    }

    /// Sets `key` from a command-line string, parsed per the key's type.
    pub fn set_str(&mut self, key: &str, raw: &str) -> Result<(), Error> {
        let raw = raw.trim();
        let v = match self.expected(key)? {
            Kind::Float => Value::Float(raw.parse().map_err(|_| bad(key, format!("'{raw}' is not a number")))?),
            Kind::Int => Value::Int(raw.parse().map_err(|_| bad(key, format!("'{raw}' is not a non-negative integer")))?),
            Kind::Bool => Value::Bool(raw.parse().map_err(|_| bad(key, format!("'{raw}' is not true/false")))?),
            Kind::Str => Value::Str(raw.trim_matches('"').to_string()),
            Kind::List => {
                let inner = raw.trim_start_matches('[').trim_end_matches(']');
                let items = inner
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<u64>().map_err(|_| bad(key, format!("'{s}' is not a non-negative integer"))))
                    .collect::<Result<Vec<_>, _>>()?;
                Value::List(items)
            }
        };
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), Error> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Param(format!("override '{assignment}' is not of the form key=value")))?;
        self.set_str(k.trim(), v)
    }

    fn set_toml(&mut self, key: &str, v: &toml::Value) -> Result<(), Error> {
        let val = match (self.expected(key)?, v) {
            (Kind::Float, toml::Value::Float(f)) => Value::Float(*f),
            (Kind::Float, toml::Value::Integer(i)) => Value::Float(*i as f64),
            (Kind::Int, toml::Value::Integer(i)) if *i >= 0 => Value::Int(*i as u64),
            (Kind::Bool, toml::Value::Boolean(b)) => Value::Bool(*b),
            (Kind::Str, toml::Value::String(s)) => Value::Str(s.clone()),
            (Kind::List, toml::Value::Array(items)) => Value::List(
                items
                    .iter()
                    .map(|i| match i {
                        toml::Value::Integer(n) if *n >= 0 => Ok(*n as u64),
                        other => Err(bad(key, format!("list item {other} is not a non-negative integer"))),
                    })
                    .collect::<Result<_, _>>()?,
            ),
            (k, other) => return Err(bad(key, format!("expected {k:?}, found {other}"))),
        };
        self.values.insert(key.to_string(), val);
        Ok(())
    }

    fn merge_table(&mut self, prefix: &str, table: &toml::Table) -> Result<(), Error> {
        for (k, v) in table {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(t) => self.merge_table(&key, t)?,
                other => self.set_toml(&key, other)?,
            }
        }
        Ok(())
    }

    /// Merges a TOML document; nested tables flatten to dotted keys.
    pub fn merge_toml_str(&mut self, text: &str) -> Result<(), Error> {
        let table: toml::Table = text.parse().map_err(|e| Error::Param(format!("config is not valid TOML: {e}")))?;
        self.merge_table("", &table)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Param(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_toml_str(&text)
    }

    /// Replaces values from a sidecar's `config` object.
    pub fn merge_json(&mut self, obj: &serde_json::Map<String, serde_json::Value>) -> Result<(), Error> {
        for (k, v) in obj {
            let raw = match v {
                serde_json::Value::Array(items) => {
                    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
                }
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            self.set_str(k, &raw)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(self.values.iter().map(|(k, v)| (k.clone(), v.to_json())).collect())
    }

    fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("'{key}' has a default"))
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(v) => *v,
            other => panic!("'{key}' holds {other:?}"),
        }
    }

    pub fn int(&self, key: &str) -> u64 {
        match self.get(key) {
            Value::Int(v) => *v,
            other => panic!("'{key}' holds {other:?}"),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        self.int(key) as usize
    }

    pub fn bool(&self, key: &str) -> bool {
        match self.get(key) {
            Value::Bool(v) => *v,
            other => panic!("'{key}' holds {other:?}"),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        match self.get(key) {
            Value::Str(v) => v,
            other => panic!("'{key}' holds {other:?}"),
        }
    }

    pub fn list(&self, key: &str) -> Vec<usize> {
        match self.get(key) {
            Value::List(v) => v.iter().map(|&x| x as usize).collect(),
            other => panic!("'{key}' holds {other:?}"),
        }
    }

    pub fn train_config(&self, synthetic: bool) -> Result<TrainConfig, Error> {
        let augment = match self.str("data.augment") {
            "auto" if synthetic => Augment { crop: true, flip: false },
            "auto" | "standard" => Augment::STANDARD,
            "crop" => Augment { crop: true, flip: false },
            "none" => Augment::NONE,
            other => return Err(bad("data.augment", format!("'{other}' is not one of auto, standard, crop, none"))),
        };
        let cfg = TrainConfig {
            epochs: self.usize("trainer.epochs"),
            batch_size: self.usize("trainer.batch_size"),
            lr: self.float("trainer.lr"),
            momentum: self.float("trainer.momentum"),
            weight_decay: self.float("trainer.weight_decay"),
            milestones: self.list("trainer.milestones"),
            lr_decay: self.float("trainer.lr_decay"),
            seed: self.int("trainer.seed"),
            augment,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn arch(&self, classes: usize) -> Result<ArchDescriptor, Error> {
        ArchDescriptor::new(self.usize("model.depth"), self.usize("model.width"), classes)
    }

    pub fn plan(&self) -> Result<DistillPlan, Error> {
        let mode: DistillMode = self.str("distill.mode").parse()?;
        DistillPlan::new(
            mode,
            &self.list("distill.teacher_stages"),
            &self.list("distill.student_stages"),
            self.float("distill.alpha"),
        )
    }

    pub fn head_config(&self) -> Result<HeadConfig, Error> {
        let branches = Branches {
            global: self.bool("fam.global_branch"),
            local: self.bool("fam.local_branch"),
        };
        if !branches.global && !branches.local {
            return Err(Error::Param("at least one of fam.global_branch / fam.local_branch must be on".into()));
        }
        let window = self.usize("la.window");
        if window.is_multiple_of(2) {
            return Err(bad("la.window", "must be odd"));
        }
        Ok(HeadConfig {
            hpf_fraction: self.float("fam.hpf_fraction"),
            branches,
            la_window: window,
            crossat_dim: self.usize("crossat.dim"),
            crossat_scaled: self.bool("crossat.scale"),
        })
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.usize("data.classes"),
            per_class: self.usize("data.per_class"),
            seed: self.int("data.seed"),
            noise: self.float("data.noise"),
            angle_jitter: self.float("data.angle_jitter"),
            freq_jitter: self.float("data.freq_jitter"),
            distractor: self.float("data.distractor"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_sections_flatten() {
        let mut c = RunConfig::default();
        c.merge_toml_str("[fam]\nhpf_fraction = 0.05\n[trainer]\nmilestones = [3, 6]\nlr = 1\n").unwrap();
        assert_eq!(c.float("fam.hpf_fraction"), 0.05);
        assert_eq!(c.list("trainer.milestones"), vec![3, 6]);
        assert_eq!(c.float("trainer.lr"), 1.0);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.merge_toml_str("[fam]\nhpf = 0.05\n").is_err());
        assert!(c.merge_toml_str("[trainer]\nepochs = \"ten\"\n").is_err());
        assert!(c.apply_override("nope.key=1").is_err());
        assert!(c.apply_override("trainer.epochs").is_err());
    }

    #[test]
    fn overrides_parse_by_type() {
        let mut c = RunConfig::default();
        c.apply_override("distill.student_stages=[0,1]").unwrap();
        c.apply_override("crossat.scale=false").unwrap();
        c.apply_override("distill.mode=layer_to_layer").unwrap();
        assert_eq!(c.list("distill.student_stages"), vec![0, 1]);
        assert!(!c.bool("crossat.scale"));
        assert!(matches!(c.plan(), Err(Error::Plan(_))));
    }

    #[test]
    fn json_round_trip() {
        let mut c = RunConfig::default();
        c.apply_override("trainer.milestones=[2]").unwrap();
        c.apply_override("data.noise=0.25").unwrap();
        let j = c.to_json();
        let mut back = RunConfig::default();
        back.merge_json(j.as_object().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
