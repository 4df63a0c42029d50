//! Run configuration: a JSON object or `key=value` lines, merged with flags.
//!
//! Keys are flat. Nested JSON sections `encoder` and `spec` are accepted and
//! flattened, with `encoder.kind` read as `encoder`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Flat key and its location inside the serialized config.
pub type KeySpec = (&'static str, &'static [&'static str]);

pub const SPEC_KEYS: [KeySpec; 4] = [
    ("dt", &["spec", "dt"]),
    ("M", &["spec", "M"]),
    ("dd", &["spec", "dd"]),
    ("N", &["spec", "N"]),
];

/// Interval keys when the spec is the whole config.
pub const BARE_SPEC_KEYS: [KeySpec; 4] = [
    ("dt", &["dt"]),
    ("M", &["M"]),
    ("dd", &["dd"]),
    ("N", &["N"]),
];

pub const TRAIN_KEYS: [KeySpec; 16] = [
    ("d", &["d"]),
    ("lr", &["lr"]),
    ("epochs", &["epochs"]),
    ("seed", &["seed"]),
    ("optimizer", &["optimizer"]),
    ("beta1", &["beta1"]),
    ("beta2", &["beta2"]),
    ("adam_eps", &["adam_eps"]),
    ("variant", &["variant"]),
    ("seq_len", &["seq_len"]),
    ("head_hidden", &["head_hidden"]),
    ("encoder", &["encoder", "kind"]),
    ("hidden_dim", &["encoder", "hidden_dim"]),
    ("alpha", &["encoder", "alpha"]),
    ("beta", &["encoder", "beta"]),
    ("context_window", &["encoder", "context_window"]),
];

pub const SYNTH_KEYS: [KeySpec; 6] = [
    ("num_users", &["num_users"]),
    ("pois_per_user", &["pois_per_user"]),
    ("bins_per_poi", &["bins_per_poi"]),
    ("events_per_user", &["events_per_user"]),
    ("noise", &["noise"]),
    ("seed", &["seed"]),
];

/// Flat key to value; later insertions replace earlier ones.
#[derive(Debug, Default, Clone)]
pub struct RunConfig {
    pub entries: Map<String, Value>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                Self::parse(&text)
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        if text.trim_start().starts_with('{') {
            let obj: Map<String, Value> =
                serde_json::from_str(text).map_err(|e| format!("config is not valid JSON: {e}"))?;
            let mut entries = Map::new();
            for (k, v) in obj {
                match (k.as_str(), v) {
                    (section @ ("encoder" | "spec"), Value::Object(inner)) => {
                        for (k2, v2) in inner {
                            let key = if section == "encoder" && k2 == "kind" {
                                "encoder".to_string()
                            } else {
                                k2
                            };
                            entries.insert(key, v2);
                        }
                    }
                    (_, v) => {
                        entries.insert(k, v);
                    }
                }
            }
            return Ok(Self { entries });
        }
        let mut entries = Map::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
            let v = v.trim();
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            entries.insert(k.trim().to_string(), value);
        }
        Ok(Self { entries })
    }

    /// Flag values win over file values.
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            let v = serde_json::to_value(v).expect("flag values serialize");
            self.entries.insert(key.to_string(), v);
        }
    }

    /// Remove and return a key the caller handles itself.
    pub fn take<T: DeserializeOwned>(&mut self, key: &str) -> Result<Option<T>, String> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v)
                .map(Some)
                .map_err(|e| format!("bad value for {key}: {e}")),
        }
    }

    /// Overlay the entries on `defaults`; any key not in `keys` is rejected.
    pub fn resolve<T>(&self, defaults: &T, keys: &[&[KeySpec]]) -> Result<T, String>
    where
        T: Serialize + DeserializeOwned,
    {
        let mut tree = serde_json::to_value(defaults).map_err(|e| e.to_string())?;
        for (k, v) in &self.entries {
            let path = keys
                .iter()
                .flat_map(|ks| ks.iter())
                .find(|(name, _)| name == k)
                .map(|(_, p)| *p)
                .ok_or_else(|| format!("unknown config key {k:?}"))?;
            let mut slot = &mut tree;
            for seg in path {
                slot = slot
                    .get_mut(*seg)
                    .ok_or_else(|| format!("config key {k:?} has no slot"))?;
            }
            *slot = v.clone();
        }
        serde_json::from_value(tree).map_err(|e| format!("bad config value: {e}"))
    }
}
