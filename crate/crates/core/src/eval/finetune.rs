use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ProbeResult;
use crate::autograd::{AdamWConfig, AdamWState, Graph, ParamId, ParamStore, Tensor};
use crate::data::{few_shot_subset, Dataset, MultiModalSample, Split};
use crate::error::{MapexError, Result};
use crate::model::MapexModel;

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Head-only updates when true; otherwise the encoder is trained as well.
    pub frozen: bool,
    pub batch: usize,
    pub patience: usize,
    pub factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            lr: 1e-2,
            frozen: true,
            batch: 32,
            patience: 3,
            factor: 0.5,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has failed to improve for
/// `patience` consecutive epochs, then starts counting again.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        PlateauScheduler { lr, factor, patience, best: f64::INFINITY, bad_epochs: 0, reductions: 0 }
    }

    /// Records one epoch's loss; returns true when the learning rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            self.reductions += 1;
            return true;
        }
        false
    }
}

/// Pooled features and labels of the three splits.
#[derive(Clone, Debug, Default)]
pub struct FeatureSplits {
    pub train: Vec<Vec<f64>>,
    pub train_labels: Vec<usize>,
    pub val: Vec<Vec<f64>>,
    pub val_labels: Vec<usize>,
    pub test: Vec<Vec<f64>>,
    pub test_labels: Vec<usize>,
}

impl FeatureSplits {
    pub fn extract(model: &MapexModel, train: &[MultiModalSample], dataset: &Dataset, modalities: &[usize]) -> Result<Self> {
        let feats = |s: &[MultiModalSample]| {
            let refs: Vec<&MultiModalSample> = s.iter().collect();
            model.forward_features(&refs, modalities)
        };
        let labels = |s: &[MultiModalSample]| s.iter().map(|x| x.label).collect::<Vec<_>>();
        Ok(FeatureSplits {
            train: feats(train)?,
            train_labels: labels(train),
            val: feats(dataset.split(Split::Val))?,
            val_labels: labels(dataset.split(Split::Val)),
            test: feats(dataset.split(Split::Test))?,
            test_labels: labels(dataset.split(Split::Test)),
        })
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub result: ProbeResult,
    /// Epoch (1-based, 0 = untrained) whose validation loss was lowest.
    pub best_epoch: usize,
    pub val_losses: Vec<f64>,
    pub lr_trace: Vec<f64>,
}

struct Head {
    store: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl Head {
    fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / (dim + classes) as f64).sqrt();
        let w: Vec<f64> = (0..dim * classes).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut store = ParamStore::new();
        let w = store.add("head.w", Tensor::new(vec![dim, classes], w).expect("head shape"));
        let b = store.add("head.b", Tensor::zeros(&[classes]));
        Head { store, w, b }
    }

    /// Mean cross-entropy and argmax predictions on value features.
    fn evaluate(&self, feats: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<usize>)> {
        if feats.is_empty() {
            return Ok((0.0, Vec::new()));
        }
        let mut g = Graph::new();
        let x = g.constant(rows_tensor(feats)?);
        let logits = self.logits(&mut g, x)?;
        let loss = g.cross_entropy(logits, labels)?;
        let lv = g.value(logits);
        let preds = (0..feats.len()).map(|i| argmax(lv.row(i))).collect();
        Ok((g.value(loss).item(), preds))
    }

    fn logits(&self, g: &mut Graph, x: crate::autograd::Var) -> Result<crate::autograd::Var> {
        let w = g.param(&self.store, self.w);
        let b = g.param(&self.store, self.b);
        g.linear(x, w, Some(b))
    }
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Ok(Tensor::from_rows(&refs))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn validate(cfg: &FinetuneConfig) -> Result<()> {
    if cfg.batch == 0 {
        return Err(MapexError::config("batch", "must be positive"));
    }
    if !(cfg.lr > 0.0) || !(cfg.factor > 0.0 && cfg.factor < 1.0) || cfg.patience == 0 {
        return Err(MapexError::config("lr", "learning rate, factor or patience out of range"));
    }
    Ok(())
}

/// Shared epoch loop; `train_epoch` performs one pass of updates at the given learning rate and
/// `features` returns current validation and test features.
fn run_epochs<T, F>(
    cfg: &FinetuneConfig,
    head: &mut Head,
    splits: &FeatureSplits,
    classes: usize,
    mut train_epoch: T,
    mut features: F,
) -> Result<FinetuneOutcome>
where
    T: FnMut(&mut Head, &mut AdamWState, f64, &mut ChaCha8Rng) -> Result<()>,
    F: FnMut() -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e7);
    let mut opt = AdamWState::new(
        &head.store,
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
    );
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.patience, cfg.factor);

    let score = |head: &Head, val: &[Vec<f64>], test: &[Vec<f64>]| -> Result<(f64, ProbeResult)> {
        let (val_loss, _) = head.evaluate(val, &splits.val_labels)?;
        let (_, preds) = head.evaluate(test, &splits.test_labels)?;
        Ok((val_loss, ProbeResult::from_predictions(&preds, &splits.test_labels, classes)))
    };
    let (mut best_loss, mut best) = score(head, &splits.val, &splits.test)?;
    let mut best_epoch = 0;
    let mut val_losses = Vec::with_capacity(cfg.epochs);
    let mut lr_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        lr_trace.push(sched.lr);
        opt.set_lr(sched.lr);
        train_epoch(head, &mut opt, sched.lr, &mut rng)?;
        let (val, test) = features()?;
        let (val_loss, result) = score(head, &val, &test)?;
        if !val_loss.is_finite() {
            return Err(MapexError::NonFiniteLoss { step: epoch, value: val_loss });
        }
        val_losses.push(val_loss);
        if val_loss < best_loss || epoch == 1 {
            best_loss = val_loss;
            best = result;
            best_epoch = epoch;
        }
        sched.observe(val_loss);
    }
    Ok(FinetuneOutcome { result: best, best_epoch, val_losses, lr_trace })
}

/// Trains a linear classifier on fixed features; reports test accuracy at the best validation epoch.
pub fn train_linear_head(splits: &FeatureSplits, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    validate(cfg)?;
    if splits.train.is_empty() {
        return Err(MapexError::Data("empty training features".into()));
    }
    let classes = splits
        .train_labels
        .iter()
        .chain(&splits.val_labels)
        .chain(&splits.test_labels)
        .max()
        .map_or(0, |m| m + 1);
    let dim = splits.train[0].len();
    let mut head = Head::new(dim, classes, cfg.seed);
    let n = splits.train.len();
    let train_epoch = |head: &mut Head, opt: &mut AdamWState, _lr: f64, rng: &mut ChaCha8Rng| -> Result<()> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| splits.train[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| splits.train_labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(rows_tensor(&rows)?);
            let logits = head.logits(&mut g, x)?;
            let loss = g.cross_entropy(logits, &labels)?;
            head.store.zero_grad();
            g.backward(loss)?;
            g.accumulate_param_grads(&mut head.store);
            opt.step(&mut head.store)?;
        }
        Ok(())
    };
    let features = || Ok((splits.val.clone(), splits.test.clone()));
    run_epochs(cfg, &mut head, splits, classes, train_epoch, features)
}

/// Linear-head fine-tuning of `model` on the dataset's train split.
pub fn finetune(
    model: &MapexModel,
    dataset: &Dataset,
    modalities: &[usize],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    validate(cfg)?;
    let train = dataset.split(Split::Train);
    let splits = FeatureSplits::extract(model, train, dataset, modalities)?;
    if cfg.frozen {
        let mut out = train_linear_head(&splits, cfg)?;
        out.result.modalities = modalities.to_vec();
        out.result.seed = cfg.seed;
        return Ok(out);
    }

    let classes = dataset.config.classes;
    let mut head = Head::new(model.config.dim, classes, cfg.seed);
    let mut encoder = model.clone();
    let mut enc_opt = AdamWState::new(
        &encoder.store,
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
    );
    let enc_cell = std::cell::RefCell::new(&mut encoder);
    let train_epoch = |head: &mut Head, opt: &mut AdamWState, lr: f64, rng: &mut ChaCha8Rng| -> Result<()> {
        let mut enc = enc_cell.borrow_mut();
        enc_opt.set_lr(lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&MultiModalSample> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut g = Graph::new();
            let x = enc.pooled_features(&mut g, &batch, modalities)?;
            let logits = head.logits(&mut g, x)?;
            let loss = g.cross_entropy(logits, &labels)?;
            head.store.zero_grad();
            enc.store.zero_grad();
            g.backward(loss)?;
            g.accumulate_param_grads(&mut head.store);
            g.accumulate_param_grads(&mut enc.store);
            opt.step(&mut head.store)?;
            enc_opt.step(&mut enc.store)?;
        }
        Ok(())
    };
    let features = || {
        let enc = enc_cell.borrow();
        let fs = |s: &[MultiModalSample]| {
            let refs: Vec<&MultiModalSample> = s.iter().collect();
            enc.forward_features(&refs, modalities)
        };
        Ok((fs(dataset.split(Split::Val))?, fs(dataset.split(Split::Test))?))
    };
    let mut out = run_epochs(cfg, &mut head, &splits, classes, train_epoch, features)?;
    out.result.modalities = modalities.to_vec();
    out.result.seed = cfg.seed;
    Ok(out)
}

/// Fine-tunes on `k_shot` samples per class drawn with `seed` and scores on the full test split.
pub fn few_shot_eval(
    model: &MapexModel,
    dataset: &Dataset,
    modalities: &[usize],
    k_shot: usize,
    seed: u64,
    cfg: &FinetuneConfig,
) -> Result<ProbeResult> {
    let subset = few_shot_subset(dataset, k_shot, seed)?;
    let cfg = FinetuneConfig { seed, ..cfg.clone() };
    let mut r = finetune(model, &subset, modalities, &cfg)?.result;
    r.k_shot = Some(k_shot);
    r.seed = seed;
    Ok(r)
}
