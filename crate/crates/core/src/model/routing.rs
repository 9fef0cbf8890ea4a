use super::config::RoutingMode;
use super::pos::sincos_1d;

/// Routing outcome for one modality at one MoE layer. Expert indices refer to the
/// pretraining expert numbering.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub modality: usize,
    pub probs: Vec<f64>,
    /// Ascending expert indices.
    pub selected: Vec<usize>,
    /// Renormalized weights, aligned with `selected`.
    pub gates: Vec<f64>,
}

impl RoutingDecision {
    pub fn deterministic(modality: usize, experts: usize) -> Self {
        let target = modality % experts;
        let mut probs = vec![0.0; experts];
        probs[target] = 1.0;
        RoutingDecision { modality, probs, selected: vec![target], gates: vec![1.0] }
    }

    pub fn gate_of(&self, expert: usize) -> Option<f64> {
        self.selected.iter().position(|&e| e == expert).map(|i| self.gates[i])
    }
}

/// Indices of the `k` largest probabilities (ties toward the lowest index), returned in ascending
/// order with their probabilities renormalized to sum to one.
pub fn topk_select(probs: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    assert!(k >= 1 && k <= probs.len(), "top-k with k={k} over {} experts", probs.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();
    let total: f64 = selected.iter().map(|&i| probs[i]).sum();
    let gates = selected.iter().map(|&i| probs[i] / total).collect();
    (selected, gates)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Router input for a modality under a learned routing mode.
pub fn router_input(mode: RoutingMode, modality: usize, modality_token: &[f64]) -> Vec<f64> {
    match mode {
        RoutingMode::PosEmbed => sincos_1d(modality as f64, modality_token.len()),
        _ => modality_token.to_vec(),
    }
}

/// `softmax(input · W_r)` followed by top-k, for `W_r` stored as `dim × experts`.
pub fn route_with(router: &[f64], input: &[f64], experts: usize, k: usize, modality: usize) -> RoutingDecision {
    let mut logits = vec![0.0; experts];
    for (d, &x) in input.iter().enumerate() {
        for (e, l) in logits.iter_mut().enumerate() {
            *l += x * router[d * experts + e];
        }
    }
    let probs = softmax(&logits);
    let (selected, gates) = topk_select(&probs, k);
    RoutingDecision { modality, probs, selected, gates }
}
