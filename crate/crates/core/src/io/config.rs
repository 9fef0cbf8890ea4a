//! Flat `key = value` run configuration with strict keys and a canonical text form.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{DataConfig, ModalitySpec};
use crate::error::{MapexError, Result};
use crate::eval::FinetuneConfig;
use crate::model::{ModelConfig, RoutingMode};
use crate::pretrain::PretrainConfig;
use crate::prune::PruneSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Uint,
    Float,
    Bool,
    Text,
    Routing,
    UintList,
    Modalities,
}

/// Every accepted key with its kind and default value.
const KEYS: &[(&str, Kind, &str)] = &[
    ("seed", Kind::Uint, "0"),
    // data
    ("modalities", Kind::Modalities, "RGBish:3:0.6,REDEDGEish:2:0.48,SARish:1:0.36,ELEish:1:0.27"),
    ("image_size", Kind::Uint, "32"),
    ("patch_size", Kind::Uint, "8"),
    ("classes", Kind::Uint, "4"),
    ("n_train", Kind::Uint, "512"),
    ("n_val", Kind::Uint, "128"),
    ("n_test", Kind::Uint, "128"),
    ("noise", Kind::Float, "0.3"),
    ("phase_jitter", Kind::Float, "1"),
    ("data_dir", Kind::Text, ""),
    // model
    ("dim", Kind::Uint, "64"),
    ("depth", Kind::Uint, "4"),
    ("heads", Kind::Uint, "4"),
    ("experts", Kind::Uint, "8"),
    ("expert_hidden", Kind::Uint, "128"),
    ("top_k", Kind::Uint, "2"),
    ("routing", Kind::Routing, "modality"),
    ("shared_expert", Kind::Bool, "false"),
    ("decoder_depth", Kind::Uint, "2"),
    ("decoder_dim", Kind::Uint, "48"),
    ("decoder_heads", Kind::Uint, "4"),
    ("mask_ratio", Kind::Float, "0.75"),
    // pretrain
    ("steps", Kind::Uint, "2000"),
    ("batch", Kind::Uint, "8"),
    ("lr", Kind::Float, "0.001"),
    ("alpha", Kind::Float, "0.01"),
    ("dropout", Kind::Float, "0"),
    ("eval_every", Kind::Uint, "250"),
    ("val_samples", Kind::Uint, "64"),
    // checkpoints, pruning and probes
    ("checkpoint", Kind::Text, ""),
    ("prune_modalities", Kind::UintList, "0"),
    ("prune_k", Kind::Uint, "2"),
    ("live_routing", Kind::Bool, "false"),
    ("knn_k", Kind::Uint, "5"),
    ("probe_modalities", Kind::UintList, ""),
    ("ft_epochs", Kind::Uint, "30"),
    ("ft_lr", Kind::Float, "0.01"),
    ("ft_frozen", Kind::Bool, "true"),
    ("ft_batch", Kind::Uint, "32"),
    ("ft_patience", Kind::Uint, "3"),
    ("ft_factor", Kind::Float, "0.5"),
    ("ft_weight_decay", Kind::Float, "0.0001"),
    ("k_shots", Kind::UintList, "10,25"),
    // sweeps
    ("sweep_kind", Kind::Text, "topk"),
    ("sweep_seeds", Kind::UintList, "0"),
    ("sweep_topk", Kind::UintList, "1,2,3,4,5"),
    ("sweep_experts", Kind::UintList, "4,8,16"),
    // verify
    ("verify_probes", Kind::Uint, "8"),
    ("verify_specs", Kind::Uint, "5"),
];

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, kind, _)| *kind)
}

fn parse_uint_list(key: &str, value: &str) -> Result<Vec<u64>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| v.trim().parse::<u64>().map_err(|_| MapexError::config(key, format!("{v:?} is not an integer"))))
        .collect()
}

fn parse_modalities(key: &str, value: &str) -> Result<Vec<ModalitySpec>> {
    let mut out = Vec::new();
    for (i, part) in value.split(',').enumerate() {
        let fields: Vec<&str> = part.trim().split(':').collect();
        let bad = || MapexError::config(key, format!("{part:?} is not name:channels:informativeness"));
        if fields.len() != 3 || fields[0].is_empty() {
            return Err(bad());
        }
        let channels = fields[1].parse::<usize>().map_err(|_| bad())?;
        let info = fields[2].parse::<f64>().map_err(|_| bad())?;
        out.push(ModalitySpec::new(i, fields[0], channels, info));
    }
    Ok(out)
}

/// Validates `value` for `kind` and returns its canonical spelling.
fn canonical(key: &str, kind: Kind, value: &str) -> Result<String> {
    let value = value.trim();
    let err = |what: &str| MapexError::config(key, format!("{value:?} is not {what}"));
    Ok(match kind {
        Kind::Uint => value.parse::<u64>().map_err(|_| err("a non-negative integer"))?.to_string(),
        Kind::Float => {
            let v = value.parse::<f64>().map_err(|_| err("a number"))?;
            if !v.is_finite() {
                return Err(err("a finite number"));
            }
            v.to_string()
        }
        Kind::Bool => match value {
            "true" | "1" | "yes" => "true".into(),
            "false" | "0" | "no" => "false".into(),
            _ => return Err(err("a boolean")),
        },
        Kind::Text => {
            if value.contains('\n') {
                return Err(err("a single line"));
            }
            value.to_string()
        }
        Kind::Routing => value.parse::<RoutingMode>().map_err(|_| err("a routing mode"))?.to_string(),
        Kind::UintList => {
            parse_uint_list(key, value)?.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        }
        Kind::Modalities => parse_modalities(key, value)?
            .iter()
            .map(|m| format!("{}:{}:{}", m.name, m.channels, m.informativeness))
            .collect::<Vec<_>>()
            .join(","),
    })
}

/// Fully resolved configuration: every key present, values in canonical form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|(k, kind, v)| (k.to_string(), canonical(k, *kind, v).expect("valid default")))
            .collect();
        RunConfig { values }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let kind = kind_of(key).ok_or_else(|| MapexError::config(key, "unknown key"))?;
        self.values.insert(key.to_string(), canonical(key, kind, value)?);
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| MapexError::config(line, format!("line {} is not key = value", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Reads `file` (if given) and then applies `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| MapexError::config("config", format!("cannot read {}: {e}", path.display())))?;
            c.apply_text(&text)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Sorted `key = value` lines.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unknown key {key}"))
    }

    pub fn uint(&self, key: &str) -> usize {
        self.get(key).parse().expect("canonical integer")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("canonical integer")
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("canonical number")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn list(&self, key: &str) -> Vec<usize> {
        parse_uint_list(key, self.get(key)).expect("canonical list").into_iter().map(|v| v as usize).collect()
    }

    pub fn u64_list(&self, key: &str) -> Vec<u64> {
        parse_uint_list(key, self.get(key)).expect("canonical list")
    }

    pub fn modality_specs(&self) -> Vec<ModalitySpec> {
        parse_modalities("modalities", self.get("modalities")).expect("canonical modalities")
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            modalities: self.modality_specs(),
            image_size: self.uint("image_size"),
            patch_size: self.uint("patch_size"),
            classes: self.uint("classes"),
            n_train: self.uint("n_train"),
            n_val: self.uint("n_val"),
            n_test: self.uint("n_test"),
            noise: self.float("noise"),
            phase_jitter: self.float("phase_jitter"),
            seed: self.u64("seed"),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.uint("dim"),
            depth: self.uint("depth"),
            heads: self.uint("heads"),
            experts: self.uint("experts"),
            expert_hidden: self.uint("expert_hidden"),
            top_k: self.uint("top_k"),
            routing: self.get("routing").parse().expect("canonical routing"),
            shared_expert: self.flag("shared_expert"),
            decoder_depth: self.uint("decoder_depth"),
            decoder_dim: self.uint("decoder_dim"),
            decoder_heads: self.uint("decoder_heads"),
            patch_size: self.uint("patch_size"),
            image_size: self.uint("image_size"),
            modalities: self.modality_specs(),
            mask_ratio: self.float("mask_ratio"),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.uint("steps"),
            batch: self.uint("batch"),
            lr: self.float("lr"),
            alpha: self.float("alpha"),
            dropout: self.float("dropout"),
            seed: self.u64("seed"),
            eval_every: self.uint("eval_every"),
            val_samples: self.uint("val_samples"),
        }
    }

    pub fn prune_spec(&self) -> PruneSpec {
        PruneSpec::new(&self.list("prune_modalities"), self.uint("prune_k"))
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.uint("ft_epochs"),
            lr: self.float("ft_lr"),
            frozen: self.flag("ft_frozen"),
            batch: self.uint("ft_batch"),
            patience: self.uint("ft_patience"),
            factor: self.float("ft_factor"),
            weight_decay: self.float("ft_weight_decay"),
            seed: self.u64("seed"),
        }
    }
}
