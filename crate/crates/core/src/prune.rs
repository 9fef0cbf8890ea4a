//! Extraction of a modality-specific model: per layer, only the union of the downstream
//! modalities' top-k experts survives, together with those modalities' embedders and tokens.

use std::collections::BTreeSet;

use crate::data::MultiModalSample;
use crate::error::{MapexError, Result};
pub use crate::model::{PruneRecord, PruneSpec};
use crate::model::{topk_select, Layout, MapexModel, RoutingDecision, RoutingMode};

impl PruneSpec {
    pub fn new(modalities: &[usize], k: usize) -> Self {
        PruneSpec { modalities: modalities.to_vec(), k }
    }

    /// Sorted, de-duplicated copy after range checks against `model`.
    pub fn validated(&self, model: &MapexModel) -> Result<PruneSpec> {
        if self.modalities.is_empty() {
            return Err(MapexError::Spec("downstream modality set is empty".into()));
        }
        let set: BTreeSet<usize> = self.modalities.iter().copied().collect();
        for &j in &set {
            if !model.has_modality(j) {
                return Err(MapexError::Spec(format!("modality {j} is not a pretraining modality")));
            }
        }
        if self.k == 0 || self.k > model.config.experts {
            return Err(MapexError::Spec(format!("k={} outside 1..={}", self.k, model.config.experts)));
        }
        Ok(PruneSpec { modalities: set.into_iter().collect(), k: self.k })
    }
}

/// Top-`k` expert set of `modality` at `layer` in the unpruned model.
fn retained_for(model: &MapexModel, layer: usize, modality: usize, k: usize) -> Result<Vec<usize>> {
    match model.config.routing {
        RoutingMode::Deterministic => Ok(vec![modality % model.config.experts]),
        _ => {
            let probs = model.routing_decision(layer, modality)?.probs;
            Ok(topk_select(&probs, k).0)
        }
    }
}

pub fn prune(model: &MapexModel, spec: &PruneSpec) -> Result<MapexModel> {
    if model.prune.is_some() {
        return Err(MapexError::Spec("model is already pruned".into()));
    }
    let spec = spec.validated(model)?;
    let depth = model.config.depth;
    let route_k = model.config.top_k.min(spec.k);

    let mut experts = Vec::with_capacity(depth);
    let mut frozen = Vec::with_capacity(depth);
    for l in 0..depth {
        let mut union = BTreeSet::new();
        let mut decisions = Vec::new();
        for &m in &spec.modalities {
            union.extend(retained_for(model, l, m, spec.k)?);
            if model.config.routing.is_learned() {
                let probs = model.routing_decision(l, m)?.probs;
                let (selected, gates) = topk_select(&probs, route_k);
                decisions.push(RoutingDecision { modality: m, probs, selected, gates });
            }
        }
        experts.push(union.into_iter().collect::<Vec<_>>());
        frozen.push(decisions);
    }

    let layout = Layout { modalities: spec.modalities.clone(), experts: experts.clone() };
    let mut pruned = MapexModel::build(model.config.clone(), &layout, None)?;
    pruned.copy_params_from(model)?;
    for (block, decisions) in pruned.blocks.iter_mut().zip(frozen) {
        for d in decisions {
            block.moe.frozen.insert(d.modality, d);
        }
    }
    pruned.prune = Some(PruneRecord { spec, remap: experts });
    Ok(pruned)
}

/// Maximum absolute difference between pooled features of `full` and `pruned` on `probe`.
pub fn verify_equivalence(
    full: &MapexModel,
    pruned: &MapexModel,
    probe: &[&MultiModalSample],
    modalities: &[usize],
) -> Result<f64> {
    if let Some(&j) = modalities.iter().find(|&&j| !pruned.has_modality(j)) {
        return Err(MapexError::Contract(format!("probe uses modality {j}, which was pruned away")));
    }
    if full.config.shared_expert != pruned.config.shared_expert {
        return Err(MapexError::Contract("shared expert present in only one model".into()));
    }
    let a = full.forward_features(probe, modalities)?;
    let b = pruned.forward_features(probe, modalities)?;
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(&b) {
        for (u, v) in x.iter().zip(y) {
            worst = worst.max((u - v).abs());
        }
    }
    Ok(worst)
}
