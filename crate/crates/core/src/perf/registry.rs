use std::collections::BTreeMap;
use std::path::Path;

use super::{GpuSpec, ModelProfile};
use crate::error::{Error, Result};

/// Identifiers of the profiles shipped with the crate.
pub const BUILTIN_PROFILE_IDS: [&str; 8] = [
    "mixtral-8x7b",
    "qwen1.5-moe",
    "olmoe-1b-7b",
    "deepseek-moe",
    "phi-3.5-moe",
    "gpt2",
    "llama2-7b",
    "mistral-7b",
];

const BUILTIN_JSON: [(&str, &str); 8] = [
    ("mixtral-8x7b", include_str!("../../profiles/mixtral-8x7b.json")),
    ("qwen1.5-moe", include_str!("../../profiles/qwen1.5-moe.json")),
    ("olmoe-1b-7b", include_str!("../../profiles/olmoe-1b-7b.json")),
    ("deepseek-moe", include_str!("../../profiles/deepseek-moe.json")),
    ("phi-3.5-moe", include_str!("../../profiles/phi-3.5-moe.json")),
    ("gpt2", include_str!("../../profiles/gpt2.json")),
    ("llama2-7b", include_str!("../../profiles/llama2-7b.json")),
    ("mistral-7b", include_str!("../../profiles/mistral-7b.json")),
];

const BUILTIN_GPU_JSON: &str = include_str!("../../profiles/gpu-a100.json");

/// Model profiles by identifier, all sharing one GPU envelope.
#[derive(Clone, Debug)]
pub struct ProfileRegistry {
    pub gpu: GpuSpec<f64>,
    profiles: BTreeMap<String, ModelProfile<f64>>,
}

impl ProfileRegistry {
    pub fn empty(gpu: GpuSpec<f64>) -> Self {
        ProfileRegistry {
            gpu,
            profiles: BTreeMap::new(),
        }
    }

    /// The shipped calibrated profiles.
    pub fn builtin() -> Self {
        let gpu: GpuSpec<f64> = serde_json::from_str(BUILTIN_GPU_JSON).expect("shipped GPU spec parses");
        let mut reg = ProfileRegistry::empty(gpu);
        for (id, json) in BUILTIN_JSON {
            let profile: ModelProfile<f64> = serde_json::from_str(json).expect("shipped profile parses");
            debug_assert_eq!(profile.name, id);
            reg.profiles.insert(id.to_string(), profile);
        }
        reg
    }

    pub fn insert(&mut self, profile: ModelProfile<f64>) -> Result<()> {
        profile.validate(&self.gpu)?;
        self.profiles.insert(profile.name.clone(), profile);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&ModelProfile<f64>> {
        self.profiles
            .get(id)
            .ok_or_else(|| Error::UnknownProfile(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.profiles.keys().map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.profiles.contains_key(id)
    }

    /// Loads every `*.json` profile in `dir` on top of the current entries.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let text = std::fs::read_to_string(&path)?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            // GPU spec files carry no model name.
            if value.get("name").is_none() {
                continue;
            }
            let profile: ModelProfile<f64> = serde_json::from_value(value)?;
            self.insert(profile)?;
        }
        Ok(())
    }
}
