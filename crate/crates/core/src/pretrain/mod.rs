//! Masked-autoencoding pretraining with per-modality masking, modality dropout and a
//! load-balancing penalty on expert utilization.

mod metrics;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use metrics::{write_metrics_csv, StepMetrics};

use crate::autograd::{grad_check_report, AdamWConfig, AdamWState, GradCheckReport, Graph, Tensor, Var};
use crate::data::{generate, DataConfig, MultiModalSample};
use crate::error::{MapexError, Result};
use crate::model::{EncodeRequest, MapexModel, ModelConfig, RoutingDecision};

/// Masked and visible positions of one modality in one sample, both ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

/// Number of masked tokens for `t` positions: `⌊ratio·t + 0.5⌋`.
pub fn masked_count(t: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(MapexError::config("mask_ratio", format!("{ratio} outside (0, 1)")));
    }
    let n = (ratio * t as f64 + 0.5).floor() as usize;
    if n == 0 || n >= t {
        return Err(MapexError::config(
            "mask_ratio",
            format!("ratio {ratio} over {t} tokens leaves no masked or no visible token"),
        ));
    }
    Ok(n)
}

pub fn sample_mask<R: Rng + ?Sized>(t: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    let n = masked_count(t, ratio)?;
    let mut is_masked = vec![false; t];
    for i in sample_indices(rng, t, n) {
        is_masked[i] = true;
    }
    let masked = (0..t).filter(|&i| is_masked[i]).collect();
    let visible = (0..t).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { masked, visible })
}

/// Outcome of one modality-dropout draw for a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropoutDraw {
    /// Bernoulli draws before the survivor guard.
    pub raw: Vec<bool>,
    /// Final zeroed flags; at least one modality survives.
    pub zeroed: Vec<bool>,
}

pub fn modality_dropout<R: Rng + ?Sized>(m: usize, p: f64, rng: &mut R) -> Result<DropoutDraw> {
    if !(0.0..1.0).contains(&p) {
        return Err(MapexError::config("dropout", format!("{p} outside [0, 1)")));
    }
    if p == 0.0 {
        return Ok(DropoutDraw { raw: vec![false; m], zeroed: vec![false; m] });
    }
    let raw: Vec<bool> = (0..m).map(|_| rng.random::<f64>() < p).collect();
    Ok(DropoutDraw { zeroed: guard_survivor(&raw, rng), raw })
}

/// Restores one uniformly chosen modality when every modality was dropped.
pub fn guard_survivor<R: Rng + ?Sized>(raw: &[bool], rng: &mut R) -> Vec<bool> {
    let mut zeroed = raw.to_vec();
    if !zeroed.is_empty() && zeroed.iter().all(|&z| z) {
        let keep = rng.random_range(0..zeroed.len());
        zeroed[keep] = false;
    }
    zeroed
}

/// Soft utilization `U_i = Σ_m (n_m / N)·w_i^m` for one layer.
pub fn compute_utilization(decisions: &[RoutingDecision], counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if decisions.is_empty() || decisions.len() != counts.len() || total == 0 {
        return Err(MapexError::Contract("utilization needs routed tokens".into()));
    }
    let e = decisions[0].probs.len();
    let mut u = vec![0.0; e];
    for (d, &n) in decisions.iter().zip(counts) {
        let w = n as f64 / total as f64;
        for (ui, p) in u.iter_mut().zip(&d.probs) {
            *ui += w * p;
        }
    }
    Ok(u)
}

/// `(1/e)·Σ_i (U_i − 1/e)²` for one layer.
pub fn load_balance_layer(u: &[f64]) -> f64 {
    let e = u.len() as f64;
    u.iter().map(|&x| (x - 1.0 / e) * (x - 1.0 / e)).sum::<f64>() / e
}

/// Layer-averaged load-balancing loss.
pub fn load_balance_loss(layers: &[Vec<f64>]) -> f64 {
    if layers.is_empty() {
        return 0.0;
    }
    layers.iter().map(|u| load_balance_layer(u)).sum::<f64>() / layers.len() as f64
}

/// Differentiable counterpart of [`load_balance_layer`] for a `1×e` utilization row.
pub fn load_balance_graph(g: &mut Graph, u: Var) -> Result<Var> {
    let e = g.value(u).numel();
    let target = g.constant(Tensor::filled(g.shape(u), 1.0 / e as f64));
    let d = g.sub(u, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_load: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_rec: f64, l_load: f64, alpha: f64) -> Self {
        LossBreakdown { l_rec, l_load, alpha, total: l_rec + alpha * l_load }
    }
}

/// Masks and dropout flags for one batch, indexed `[sample][modality]`.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub masks: Vec<Vec<MaskPlan>>,
    pub zeroed: Vec<bool>,
}

impl BatchPlan {
    pub fn draw<R: Rng + ?Sized>(model: &MapexModel, batch: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        let m = model.config.num_modalities();
        let t = model.config.tokens_per_modality();
        let zeroed = modality_dropout(m, dropout, rng)?.zeroed;
        let mut masks = Vec::with_capacity(batch);
        for _ in 0..batch {
            masks.push((0..m).map(|_| sample_mask(t, model.config.mask_ratio, rng)).collect::<Result<_>>()?);
        }
        Ok(BatchPlan { masks, zeroed })
    }
}

/// Graph handles and values of one training objective evaluation.
pub struct StepOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Per-layer utilization values.
    pub utilization: Vec<Vec<f64>>,
    /// Decoder pass length per reconstructed modality.
    pub decoder_lengths: Vec<usize>,
    pub masked_counts: Vec<usize>,
}

/// Builds `L = L_rec + α·L_load` for a batch under `plan`.
pub fn build_loss(
    g: &mut Graph,
    model: &MapexModel,
    samples: &[&MultiModalSample],
    plan: &BatchPlan,
    alpha: f64,
) -> Result<StepOutput> {
    let modalities: Vec<usize> = (0..model.config.num_modalities()).collect();
    if plan.masks.len() != samples.len() {
        return Err(MapexError::Contract("batch plan and batch disagree in size".into()));
    }
    let visible: Vec<Vec<Vec<usize>>> =
        plan.masks.iter().map(|per| per.iter().map(|mp| mp.visible.clone()).collect()).collect();
    let req = EncodeRequest { samples, modalities: &modalities, visible: &visible, zeroed: &plan.zeroed };
    let enc = model.encode(g, &req)?;

    let t = model.config.tokens_per_modality();
    let mut rec_terms = Vec::new();
    let mut decoder_lengths = Vec::new();
    let mut masked_counts = Vec::new();
    for &j in &modalities {
        if plan.zeroed[j] {
            continue;
        }
        let dec = model.decode_modality(g, &enc, j)?;
        let ppc = model.config.patch_pixels(j);
        let mut target = Vec::with_capacity(samples.len() * t * ppc);
        let mut mask = vec![0.0; samples.len() * t * ppc];
        let mut count = 0;
        for (b, s) in samples.iter().enumerate() {
            target.extend_from_slice(model.patchify(s, j).data());
            for &p in &plan.masks[b][j].masked {
                let row = b * t + p;
                mask[row * ppc..(row + 1) * ppc].fill(1.0);
            }
            count += plan.masks[b][j].masked.len();
        }
        let target = Tensor::new(vec![samples.len() * t, ppc], target)?;
        let mask = Tensor::new(vec![samples.len() * t, ppc], mask)?;
        rec_terms.push(g.mse_masked(dec.pred, &target, &mask)?);
        decoder_lengths.push(dec.seq_len);
        masked_counts.push(count / samples.len());
    }
    let mut l_rec = rec_terms[0];
    for &term in &rec_terms[1..] {
        l_rec = g.add(l_rec, term)?;
    }
    if rec_terms.len() > 1 {
        l_rec = g.scale(l_rec, 1.0 / rec_terms.len() as f64);
    }

    // Token counts per routed modality: visible patches plus the end token.
    let counts: Vec<usize> = modalities
        .iter()
        .map(|&j| plan.masks.iter().map(|per| per[j].visible.len() + 1).sum())
        .collect();
    let active: Vec<usize> = (0..modalities.len()).filter(|&i| !plan.zeroed[modalities[i]]).collect();
    let total_active: usize = active.iter().map(|&i| counts[i]).sum();
    let mut utilization = Vec::with_capacity(enc.decisions.len());
    let mut layer_losses = Vec::with_capacity(enc.decisions.len());
    for (l, decisions) in enc.decisions.iter().enumerate() {
        let sel: Vec<RoutingDecision> = active.iter().map(|&i| decisions[i].clone()).collect();
        let sel_counts: Vec<usize> = active.iter().map(|&i| counts[i]).collect();
        utilization.push(compute_utilization(&sel, &sel_counts)?);
        let mut u: Option<Var> = None;
        for &i in &active {
            let w = counts[i] as f64 / total_active as f64;
            let p = match enc.probs[l][i] {
                Some(p) => p,
                None => g.constant(Tensor::new(vec![1, decisions[i].probs.len()], decisions[i].probs.clone())?),
            };
            let term = g.scale(p, w);
            u = Some(match u {
                Some(prev) => g.add(prev, term)?,
                None => term,
            });
        }
        layer_losses.push(load_balance_graph(g, u.expect("at least one active modality"))?);
    }
    let mut l_load = layer_losses[0];
    for &term in &layer_losses[1..] {
        l_load = g.add(l_load, term)?;
    }
    if layer_losses.len() > 1 {
        l_load = g.scale(l_load, 1.0 / layer_losses.len() as f64);
    }
    let weighted = g.scale(l_load, alpha);
    let total = g.add(l_rec, weighted)?;
    let breakdown = LossBreakdown {
        l_rec: g.value(l_rec).item(),
        l_load: g.value(l_load).item(),
        alpha,
        total: g.value(total).item(),
    };
    Ok(StepOutput { total, breakdown, utilization, decoder_lengths, masked_counts })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Held-out reconstruction is measured every this many steps (and at the first and last).
    pub eval_every: usize,
    /// Number of validation samples used for held-out reconstruction.
    pub val_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            alpha: 0.01,
            dropout: 0.0,
            seed: 0,
            eval_every: 250,
            val_samples: 64,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(MapexError::config("batch", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MapexError::config("lr", "must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(MapexError::config("alpha", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MapexError::config("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if self.eval_every == 0 {
            return Err(MapexError::config("eval_every", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub metrics: Vec<StepMetrics>,
    /// `(step, held-out L_rec)`; step 0 is measured before any update.
    pub val_curve: Vec<(usize, f64)>,
}

impl PretrainReport {
    pub fn initial_val(&self) -> Option<f64> {
        self.val_curve.first().map(|v| v.1)
    }

    pub fn final_val(&self) -> Option<f64> {
        self.val_curve.last().map(|v| v.1)
    }

    /// Per-layer `max_i |U_i − 1/e|` at the last step.
    pub fn final_spread(&self) -> Vec<f64> {
        self.metrics.last().map(|m| m.spread()).unwrap_or_default()
    }
}

/// Held-out masked reconstruction MSE with a fixed mask schedule derived from `seed`.
pub fn validation_loss(model: &MapexModel, samples: &[MultiModalSample], batch: usize, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(MapexError::Data("empty validation split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1);
    let mut weighted = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&MultiModalSample> = chunk.iter().collect();
        let plan = BatchPlan::draw(model, refs.len(), 0.0, &mut rng)?;
        let mut g = Graph::new();
        let out = build_loss(&mut g, model, &refs, &plan, 0.0)?;
        weighted += out.breakdown.l_rec * chunk.len() as f64;
    }
    Ok(weighted / samples.len() as f64)
}

pub fn pretrain(
    model: &mut MapexModel,
    train: &[MultiModalSample],
    val: &[MultiModalSample],
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(MapexError::Data("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamWState::new(&model.store, AdamWConfig { lr: config.lr, ..Default::default() });
    let val = &val[..config.val_samples.min(val.len())];
    let mut report = PretrainReport::default();
    if !val.is_empty() {
        report.val_curve.push((0, validation_loss(model, val, config.batch, config.seed)?));
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let plan = BatchPlan::draw(model, batch.len(), config.dropout, &mut rng)?;
        let mut g = Graph::new();
        let out = build_loss(&mut g, model, &batch, &plan, config.alpha)?;
        if !out.breakdown.total.is_finite() {
            return Err(MapexError::NonFiniteLoss { step, value: out.breakdown.total });
        }
        model.store.zero_grad();
        g.backward(out.total)?;
        g.accumulate_param_grads(&mut model.store);
        opt.step(&mut model.store)?;
        report.metrics.push(StepMetrics { step, loss: out.breakdown, utilization: out.utilization });

        let done = step + 1;
        if !val.is_empty() && (done % config.eval_every == 0 || done == config.steps) {
            report.val_curve.push((done, validation_loss(model, val, config.batch, config.seed)?));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;

/// Central-difference check of the whole pretraining loss (reconstruction plus load balancing,
/// α = 0.5) of a fresh model on two generated samples, `per_param` coordinates per tensor.
pub fn model_grad_check(config: &ModelConfig, seed: u64, eps: f64, per_param: usize) -> Result<GradCheckReport> {
    let model = MapexModel::new(config.clone(), seed)?;
    let data = generate(&DataConfig {
        modalities: config.modalities.clone(),
        image_size: config.image_size,
        patch_size: config.patch_size,
        n_train: 4,
        n_val: 4,
        n_test: 4,
        seed,
        ..Default::default()
    })?;
    let refs: Vec<&MultiModalSample> = data.train.iter().take(2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = BatchPlan::draw(&model, 2, 0.0, &mut rng)?;
    let mut store = model.store.replica();
    grad_check_report(&mut store, eps, per_param, |g, s| {
        let mut m = model.clone();
        m.store = s.replica();
        Ok(build_loss(g, &m, &refs, &plan, 0.5)?.total)
    })
}
