//! Downstream probes on frozen or fine-tuned encoder features.

mod finetune;
mod sweep;

use std::fmt::Write as _;

pub use finetune::{
    few_shot_eval, finetune, train_linear_head, FeatureSplits, FinetuneConfig, FinetuneOutcome, PlateauScheduler,
};
pub use sweep::{
    dropout_sweep, expert_size_sweep, per_modality_knn, routing_sweep, topk_sweep, write_sweep_csv, SweepContext,
    SweepRow, SWEEP_HEADER,
};

use crate::data::{Dataset, MultiModalSample, Split};
use crate::error::{MapexError, Result};
use crate::model::MapexModel;
use crate::prune::{prune, PruneSpec};

/// Probe accuracy with a configuration echo.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub modalities: Vec<usize>,
    pub k: usize,
    pub checkpoint: String,
    pub seed: u64,
    pub k_shot: Option<usize>,
}

pub const PROBE_HEADER: &str = "accuracy,per_class,modalities,k,checkpoint,seed,k_shot";

impl ProbeResult {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], classes: usize) -> Self {
        let mut hits = vec![0usize; classes];
        let mut totals = vec![0usize; classes];
        for (&p, &y) in predicted.iter().zip(labels) {
            totals[y] += 1;
            hits[y] += (p == y) as usize;
        }
        let correct: usize = hits.iter().sum();
        ProbeResult {
            accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
            per_class: hits
                .iter()
                .zip(&totals)
                .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
                .collect(),
            modalities: Vec::new(),
            k: 0,
            checkpoint: String::new(),
            seed: 0,
            k_shot: None,
        }
    }

    pub fn csv_row(&self) -> String {
        let join = |v: Vec<String>| v.join(";");
        let mut row = String::new();
        write!(
            row,
            "{},{},{},{},{},{},{}",
            self.accuracy,
            join(self.per_class.iter().map(|a| a.to_string()).collect()),
            join(self.modalities.iter().map(|m| m.to_string()).collect()),
            self.k,
            self.checkpoint,
            self.seed,
            self.k_shot.map_or(String::new(), |k| k.to_string()),
        )
        .expect("write to string");
        row
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority label among the `k` nearest training points. Equal distances resolve to the lower
/// training index; vote ties to the lower class index.
pub fn knn_predict(train: &[Vec<f64>], labels: &[usize], query: &[f64], k: usize, classes: usize) -> usize {
    let mut order: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, x)| (sq_dist(x, query), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes = vec![0usize; classes];
    for &(_, i) in order.iter().take(k) {
        votes[labels[i]] += 1;
    }
    let best = *votes.iter().max().expect("classes > 0");
    votes.iter().position(|&v| v == best).expect("max exists")
}

/// Indices of the `k` nearest training points, nearest first.
pub fn knn_neighbors(train: &[Vec<f64>], query: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, x)| (sq_dist(x, query), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn knn_eval(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    k: usize,
) -> Result<ProbeResult> {
    if train.is_empty() || test.is_empty() {
        return Err(MapexError::Data("k-NN needs non-empty train and test sets".into()));
    }
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(MapexError::Data("features and labels differ in length".into()));
    }
    if k == 0 || k > train.len() {
        return Err(MapexError::Data(format!("k={k} with {} training points", train.len())));
    }
    let dim = train[0].len();
    if train.iter().chain(test).any(|x| x.len() != dim) {
        return Err(MapexError::dim("k-NN feature dimensions differ"));
    }
    let classes = train_labels.iter().chain(test_labels).max().map_or(0, |m| m + 1);
    let predicted: Vec<usize> = test.iter().map(|q| knn_predict(train, train_labels, q, k, classes)).collect();
    let mut r = ProbeResult::from_predictions(&predicted, test_labels, classes);
    r.k = k;
    Ok(r)
}

fn labels(samples: &[MultiModalSample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

/// k-NN from pooled features of `modalities`, fit on the train split and scored on the test split.
pub fn knn_probe(model: &MapexModel, dataset: &Dataset, modalities: &[usize], k: usize) -> Result<ProbeResult> {
    let train: Vec<&MultiModalSample> = dataset.split(Split::Train).iter().collect();
    let test: Vec<&MultiModalSample> = dataset.split(Split::Test).iter().collect();
    let ftrain = model.forward_features(&train, modalities)?;
    let ftest = model.forward_features(&test, modalities)?;
    let mut r = knn_eval(&ftrain, &labels(&dataset.train), &ftest, &labels(&dataset.test), k)?;
    r.modalities = modalities.to_vec();
    Ok(r)
}

/// Row `r` is the model pruned for modality `r`; column `c` is the input modality.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecializationMatrix {
    pub modalities: Vec<usize>,
    pub accuracy: Vec<Vec<f64>>,
}

impl SpecializationMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        let n = self.accuracy.len();
        (0..n).map(|i| self.accuracy[i][i]).sum::<f64>() / n as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.accuracy.len();
        if n < 2 {
            return 0.0;
        }
        let total: f64 = self.accuracy.iter().flatten().sum();
        let diag: f64 = (0..n).map(|i| self.accuracy[i][i]).sum();
        (total - diag) / (n * (n - 1)) as f64
    }

    /// `mean(diagonal) − mean(off-diagonal)`.
    pub fn dominance(&self) -> f64 {
        self.diagonal_mean() - self.off_diagonal_mean()
    }
}

/// For each modality `r`, prune to `{r}` and probe with every input modality `c`; foreign
/// modalities borrow their embedder and tokens from `full` and follow `r`'s routing.
pub fn specialization_matrix(
    full: &MapexModel,
    dataset: &Dataset,
    prune_k: usize,
    knn_k: usize,
) -> Result<SpecializationMatrix> {
    let modalities = full.modality_ids();
    let mut accuracy = Vec::with_capacity(modalities.len());
    for &r in &modalities {
        let pruned = prune(full, &PruneSpec::new(&[r], prune_k))?;
        let mut row = Vec::with_capacity(modalities.len());
        for &c in &modalities {
            let probe_model = if c == r { pruned.clone() } else { pruned.with_foreign_modality(full, c, r)? };
            row.push(knn_probe(&probe_model, dataset, &[c], knn_k)?.accuracy);
        }
        accuracy.push(row);
    }
    Ok(SpecializationMatrix { modalities, accuracy })
}
