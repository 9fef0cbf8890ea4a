//! WebAssembly front end for three small explorations of the model: routing under top-k and load
//! balancing, a synthetic sample with its mask, and modality-aware pruning.
//!
//! Every entry point returns a JSON string; the plain Rust functions are what the native tests call.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use mapex::data::{generate, normalize_dataset, DataConfig, Dataset, MultiModalSample};
use mapex::model::{MapexModel, ModelConfig, RoutingMode};
use mapex::pretrain::{compute_utilization, load_balance_layer, pretrain, sample_mask, PretrainConfig};
use mapex::prune::{prune, verify_equivalence, PruneSpec};
use mapex::{MapexError, Result};

#[derive(Serialize)]
pub struct ModalityRoute {
    pub name: String,
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
    pub gates: Vec<f64>,
}

#[derive(Serialize)]
pub struct LayerRoute {
    pub modalities: Vec<ModalityRoute>,
    pub utilization: Vec<f64>,
    pub spread: f64,
    pub l_load: f64,
}

#[derive(Serialize)]
pub struct RoutingView {
    pub routing: String,
    pub experts: usize,
    pub top_k: usize,
    pub before: Vec<LayerRoute>,
    pub after: Vec<LayerRoute>,
    /// Largest per-layer spread after each training step.
    pub spread_trace: Vec<f64>,
    pub rec_trace: Vec<f64>,
}

fn tiny_data(config: &ModelConfig, seed: u64) -> Result<Dataset> {
    let data = generate(&DataConfig {
        modalities: config.modalities.clone(),
        image_size: config.image_size,
        patch_size: config.patch_size,
        n_train: 48,
        n_val: 8,
        n_test: 8,
        seed,
        ..DataConfig::default()
    })?;
    Ok(normalize_dataset(&data)?.0)
}

fn layer_routes(model: &MapexModel) -> Result<Vec<LayerRoute>> {
    let t = model.config.tokens_per_modality();
    (0..model.config.depth)
        .map(|l| {
            let decisions = model
                .modality_ids()
                .into_iter()
                .map(|m| model.routing_decision(l, m))
                .collect::<Result<Vec<_>>>()?;
            // Every modality contributes the same number of tokens per sample.
            let utilization = compute_utilization(&decisions, &vec![t; decisions.len()])?;
            let e = utilization.len() as f64;
            let spread = utilization.iter().map(|u| (u - 1.0 / e).abs()).fold(0.0, f64::max);
            let l_load = load_balance_layer(&utilization);
            let modalities = decisions
                .into_iter()
                .map(|d| ModalityRoute {
                    name: model.config.modalities[d.modality].name.clone(),
                    probs: d.probs,
                    selected: d.selected,
                    gates: d.gates,
                })
                .collect();
            Ok(LayerRoute { modalities, utilization, spread, l_load })
        })
        .collect()
}

/// Routes a tiny model, trains it for `steps` with load-balance weight `alpha`, and routes again.
/// `token_scale` multiplies the modality tokens at init; large values start the router far from uniform.
pub fn explore_routing(
    routing: &str,
    experts: usize,
    top_k: usize,
    token_scale: f64,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> Result<RoutingView> {
    let routing: RoutingMode = routing.parse()?;
    let config = ModelConfig { routing, experts, top_k, ..ModelConfig::tiny() };
    let mut model = MapexModel::new(config, seed)?;
    for j in model.modality_ids() {
        if let Some(id) = model.store.find(&format!("modality_token.{j}")) {
            model.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= token_scale);
        }
    }
    let before = layer_routes(&model)?;
    let data = tiny_data(&model.config, seed)?;
    let cfg = PretrainConfig { steps, batch: 8, alpha, seed, val_samples: 0, lr: 3e-3, ..PretrainConfig::default() };
    let report = pretrain(&mut model, &data.train, &data.val, &cfg)?;
    let spread_trace = report.metrics.iter().map(|s| s.spread().into_iter().fold(0.0, f64::max)).collect();
    let rec_trace = report.metrics.iter().map(|s| s.loss.l_rec).collect();
    Ok(RoutingView {
        routing: routing.to_string(),
        experts,
        // Deterministic routing always uses one expert, whatever the config says.
        top_k: if routing == RoutingMode::Deterministic { 1 } else { model.config.top_k },
        before,
        after: layer_routes(&model)?,
        spread_trace,
        rec_trace,
    })
}

#[derive(Serialize)]
pub struct PlaneView {
    pub name: String,
    pub channels: usize,
    pub informativeness: f64,
    /// Channel 0, row-major `image_size × image_size`.
    pub pixels: Vec<f64>,
    /// Masked patch indices, row-major over the patch grid.
    pub masked: Vec<usize>,
}

#[derive(Serialize)]
pub struct SampleView {
    pub label: usize,
    pub classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub planes: Vec<PlaneView>,
}

/// One training sample from the default generator, with an independent mask per modality.
pub fn view_sample(seed: u64, index: usize, mask_ratio: f64, noise: f64, phase_jitter: f64) -> Result<SampleView> {
    let config = DataConfig { n_train: 16, n_val: 8, n_test: 8, noise, phase_jitter, seed, ..DataConfig::default() };
    let data = generate(&config)?;
    let sample = &data.train[index % data.train.len()];
    let grid = config.image_size / config.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
    let planes = config
        .modalities
        .iter()
        .map(|spec| {
            let plane = sample.plane(spec.id);
            let n = config.image_size * config.image_size;
            Ok(PlaneView {
                name: spec.name.clone(),
                channels: spec.channels,
                informativeness: spec.informativeness,
                pixels: plane.data()[..n].to_vec(),
                masked: sample_mask(grid * grid, mask_ratio, &mut rng)?.masked,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SampleView {
        label: sample.label,
        classes: config.classes,
        image_size: config.image_size,
        patch_size: config.patch_size,
        planes,
    })
}

#[derive(Serialize)]
pub struct PruneView {
    pub modalities: Vec<usize>,
    pub k: usize,
    pub params_before: usize,
    pub params_after: usize,
    /// Per layer, retained pretraining expert indices.
    pub kept: Vec<Vec<usize>>,
    pub experts: usize,
    /// Largest feature difference between full and pruned model on a few samples.
    pub max_diff: f64,
}

/// Prunes a freshly initialized default-size model to `modalities` (comma separated) at top-`k`.
pub fn explore_pruning(modalities: &str, k: usize, seed: u64) -> Result<PruneView> {
    let ids = modalities
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| MapexError::config("modalities", format!("{s:?} is not an index"))))
        .collect::<Result<Vec<_>>>()?;
    let full = MapexModel::new(ModelConfig::default(), seed)?;
    let pruned = prune(&full, &PruneSpec::new(&ids, k))?;
    let record = pruned.prune.as_ref().ok_or_else(|| MapexError::Contract("pruning left no record".into()))?;
    let data = generate(&DataConfig { n_train: 8, n_val: 8, n_test: 8, seed, ..DataConfig::default() })?;
    let probe: Vec<&MultiModalSample> = data.train.iter().collect();
    let max_diff = verify_equivalence(&full, &pruned, &probe, &record.spec.modalities)?;
    Ok(PruneView {
        modalities: record.spec.modalities.clone(),
        k: record.spec.k,
        params_before: full.param_count(),
        params_after: pruned.param_count(),
        kept: record.remap.clone(),
        experts: full.config.experts,
        max_diff,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    let value = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn routing_explorer(
    routing: &str,
    experts: usize,
    top_k: usize,
    token_scale: f64,
    alpha: f64,
    steps: usize,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(explore_routing(routing, experts, top_k, token_scale, alpha, steps, seed as u64))
}

#[wasm_bindgen]
pub fn sample_viewer(seed: u32, index: usize, mask_ratio: f64, noise: f64, phase_jitter: f64) -> std::result::Result<String, JsValue> {
    to_js(view_sample(seed as u64, index, mask_ratio, noise, phase_jitter))
}

#[wasm_bindgen]
pub fn pruning_explorer(modalities: &str, k: usize, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(explore_pruning(modalities, k, seed as u64))
}
