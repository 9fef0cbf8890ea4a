use std::io::Write;

use super::knn_probe;
use crate::data::Dataset;
use crate::error::Result;
use crate::model::{MapexModel, ModelConfig, RoutingMode};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::prune::{prune, PruneSpec};

pub const SWEEP_HEADER: &str = "sweep_kind,cell_id,param_1,param_2,modality,accuracy,seed,params_count";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: String,
    pub cell_id: String,
    pub param_1: String,
    pub param_2: String,
    pub modality: usize,
    pub accuracy: f64,
    pub seed: u64,
    pub params_count: usize,
}

pub fn write_sweep_csv<W: Write>(out: &mut W, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.kind, r.cell_id, r.param_1, r.param_2, r.modality, r.accuracy, r.seed, r.params_count
        )?;
    }
    Ok(())
}

/// Everything a sweep needs: normalized data, base configurations and the seed schedule.
#[derive(Clone, Debug)]
pub struct SweepContext<'a> {
    pub dataset: &'a Dataset,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub knn_k: usize,
    pub seeds: Vec<u64>,
}

impl SweepContext<'_> {
    /// Pretrains a fresh model; the seed drives both initialization and the training stream.
    pub fn pretrained(&self, model: ModelConfig, pretrain_cfg: PretrainConfig, seed: u64) -> Result<MapexModel> {
        let mut m = MapexModel::new(model, seed)?;
        let cfg = PretrainConfig { seed, ..pretrain_cfg };
        pretrain(&mut m, &self.dataset.train, &self.dataset.val, &cfg)?;
        Ok(m)
    }
}

/// Single-modality k-NN accuracy of `model` for each of its modalities.
pub fn per_modality_knn(model: &MapexModel, dataset: &Dataset, k: usize) -> Result<Vec<f64>> {
    model.modality_ids().iter().map(|&j| Ok(knn_probe(model, dataset, &[j], k)?.accuracy)).collect()
}

fn rows_for(
    kind: &str,
    cell: &str,
    p1: &str,
    p2: &str,
    accuracies: &[f64],
    seed: u64,
    params: usize,
) -> Vec<SweepRow> {
    accuracies
        .iter()
        .enumerate()
        .map(|(m, &accuracy)| SweepRow {
            kind: kind.into(),
            cell_id: format!("{cell}-m{m}-s{seed}"),
            param_1: p1.into(),
            param_2: p2.into(),
            modality: m,
            accuracy,
            seed,
            params_count: params,
        })
        .collect()
}

/// One pretraining per routing mode and seed; per-modality k-NN of the full model.
pub fn routing_sweep(ctx: &SweepContext) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for mode in RoutingMode::ALL {
        for &seed in &ctx.seeds {
            let config = ModelConfig { routing: mode, ..ctx.model.clone() };
            let model = ctx.pretrained(config, ctx.pretrain.clone(), seed)?;
            let acc = per_modality_knn(&model, ctx.dataset, ctx.knn_k)?;
            let name = mode.to_string();
            rows.extend(rows_for("routing", &name, &name, "", &acc, seed, model.param_count()));
        }
    }
    Ok(rows)
}

/// One pretraining per seed, pruned per modality at each `k` in `ks`.
pub fn topk_sweep(ctx: &SweepContext, ks: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &seed in &ctx.seeds {
        let model = ctx.pretrained(ctx.model.clone(), ctx.pretrain.clone(), seed)?;
        for &k in ks {
            for j in model.modality_ids() {
                let pruned = prune(&model, &PruneSpec::new(&[j], k))?;
                let acc = knn_probe(&pruned, ctx.dataset, &[j], ctx.knn_k)?.accuracy;
                rows.push(SweepRow {
                    kind: "topk".into(),
                    cell_id: format!("k{k}-m{j}-s{seed}"),
                    param_1: k.to_string(),
                    param_2: String::new(),
                    modality: j,
                    accuracy: acc,
                    seed,
                    params_count: pruned.param_count(),
                });
            }
        }
    }
    Ok(rows)
}

pub const DROPOUT_GRID: [f64; 3] = [0.0, 0.1, 0.5];

pub fn dropout_sweep(ctx: &SweepContext) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for p in DROPOUT_GRID {
        for &seed in &ctx.seeds {
            let cfg = PretrainConfig { dropout: p, ..ctx.pretrain.clone() };
            let model = ctx.pretrained(ctx.model.clone(), cfg, seed)?;
            let acc = per_modality_knn(&model, ctx.dataset, ctx.knn_k)?;
            let name = format!("p{p}");
            rows.extend(rows_for("dropout", &name, &p.to_string(), "", &acc, seed, model.param_count()));
        }
    }
    Ok(rows)
}

/// `(experts, hidden)` pairs keeping `experts·hidden` fixed; each model is pruned to single
/// modalities at its training `k` and probed on that modality.
pub fn expert_size_sweep(ctx: &SweepContext, pairs: &[(usize, usize)]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &(e, hidden) in pairs {
        for &seed in &ctx.seeds {
            let config = ModelConfig {
                experts: e,
                expert_hidden: hidden,
                top_k: ctx.model.top_k.min(e),
                ..ctx.model.clone()
            };
            let k = config.top_k;
            let model = ctx.pretrained(config, ctx.pretrain.clone(), seed)?;
            for j in model.modality_ids() {
                let pruned = prune(&model, &PruneSpec::new(&[j], k))?;
                let acc = knn_probe(&pruned, ctx.dataset, &[j], ctx.knn_k)?.accuracy;
                rows.push(SweepRow {
                    kind: "expert_size".into(),
                    cell_id: format!("e{e}-h{hidden}-m{j}-s{seed}"),
                    param_1: e.to_string(),
                    param_2: hidden.to_string(),
                    modality: j,
                    accuracy: acc,
                    seed,
                    params_count: pruned.param_count(),
                });
            }
        }
    }
    Ok(rows)
}
