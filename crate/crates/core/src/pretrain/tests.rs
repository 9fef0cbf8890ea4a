use super::*;
use crate::data::{generate, DataConfig};
use crate::model::{ModelConfig, RoutingMode};

fn tiny_data(config: &ModelConfig, n: usize) -> crate::data::Dataset {
    let dc = DataConfig {
        modalities: config.modalities.clone(),
        image_size: config.image_size,
        patch_size: config.patch_size,
        n_train: n,
        n_val: 8,
        n_test: 4,
        ..Default::default()
    };
    generate(&dc).unwrap()
}

#[test]
fn mask_counts_and_determinism() {
    assert_eq!(masked_count(16, 0.75).unwrap(), 12);
    assert_eq!(masked_count(4, 0.75).unwrap(), 3);
    assert!(masked_count(1, 0.75).is_err());
    assert!(masked_count(16, 0.01).is_err());
    let mut a = ChaCha8Rng::seed_from_u64(3);
    let mut b = ChaCha8Rng::seed_from_u64(3);
    let ma = sample_mask(16, 0.75, &mut a).unwrap();
    assert_eq!(ma, sample_mask(16, 0.75, &mut b).unwrap());
    assert_eq!(ma.masked.len(), 12);
    assert_eq!(ma.visible.len(), 4);
    let mut all: Vec<usize> = ma.masked.iter().chain(&ma.visible).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..16).collect::<Vec<_>>());
}

#[test]
fn mask_positions_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut hits = [0usize; 16];
    let draws = 10_000;
    for _ in 0..draws {
        for p in sample_mask(16, 0.75, &mut rng).unwrap().masked {
            hits[p] += 1;
        }
    }
    for h in hits {
        let f = h as f64 / draws as f64;
        assert!((f - 0.75).abs() <= 0.02, "frequency {f}");
    }
}

#[test]
fn masks_of_two_modalities_are_independent() {
    // 2x2 contingency table of "position 0 masked" across two modalities of the same sample.
    let config = ModelConfig::tiny();
    let model = MapexModel::new(config, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut table = [[0.0f64; 2]; 2];
    let n = 4000;
    for _ in 0..n / 8 {
        let plan = BatchPlan::draw(&model, 8, 0.0, &mut rng).unwrap();
        for per in &plan.masks {
            let a = per[0].masked.contains(&0) as usize;
            let b = per[1].masked.contains(&0) as usize;
            table[a][b] += 1.0;
        }
    }
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut chi2 = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let expected = rows[a] * cols[b] / n as f64;
            chi2 += (table[a][b] - expected).powi(2) / expected;
        }
    }
    // 0.1% critical value of chi-square with one degree of freedom.
    assert!(chi2 < 10.83, "chi2 {chi2}");
}

#[test]
fn dropout_frequencies_and_guard() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(modality_dropout(4, 0.0, &mut rng).unwrap().zeroed, vec![false; 4]);
    let mut raw_hits = [0usize; 4];
    let trials = 10_000;
    for _ in 0..trials {
        let d = modality_dropout(4, 0.5, &mut rng).unwrap();
        assert!(d.zeroed.iter().any(|z| !z));
        for (h, r) in raw_hits.iter_mut().zip(&d.raw) {
            *h += *r as usize;
        }
    }
    for h in raw_hits {
        assert!((h as f64 / trials as f64 - 0.5).abs() <= 0.02);
    }
    let guarded = guard_survivor(&[true; 4], &mut rng);
    assert_eq!(guarded.iter().filter(|z| !**z).count(), 1);
    assert!(modality_dropout(4, 1.0, &mut rng).is_err());
}

#[test]
fn load_balance_values_are_exact() {
    assert_eq!(load_balance_layer(&[0.25; 4]), 0.0);
    assert_eq!(load_balance_layer(&[1.0, 0.0, 0.0, 0.0]), 3.0 / 16.0);
    assert_eq!(load_balance_layer(&[0.5, 0.5, 0.0, 0.0]), 0.0625);
    assert_eq!(load_balance_loss(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.25; 4]]), 3.0 / 32.0);

    let mut g = Graph::new();
    let u = g.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let l = load_balance_graph(&mut g, u).unwrap();
    assert_eq!(g.value(l).item(), 0.1875);
}

#[test]
fn utilization_examples() {
    let uniform = RoutingDecision { modality: 0, probs: vec![0.25; 4], selected: vec![0, 1], gates: vec![0.5, 0.5] };
    assert_eq!(compute_utilization(&[uniform], &[5]).unwrap(), vec![0.25; 4]);
    let a = RoutingDecision::deterministic(0, 4);
    let b = RoutingDecision::deterministic(1, 4);
    assert_eq!(compute_utilization(&[a, b], &[3, 3]).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
}

#[test]
fn deterministic_routing_with_m_equal_e_is_balanced() {
    let config = ModelConfig { routing: RoutingMode::Deterministic, ..ModelConfig::tiny() };
    assert_eq!(config.experts, config.num_modalities());
    let model = MapexModel::new(config.clone(), 1).unwrap();
    let data = tiny_data(&config, 4);
    let refs: Vec<&MultiModalSample> = data.train.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plan = BatchPlan::draw(&model, 4, 0.0, &mut rng).unwrap();
    let mut g = Graph::new();
    let out = build_loss(&mut g, &model, &refs, &plan, 0.01).unwrap();
    assert_eq!(out.breakdown.l_load, 0.0);
    for u in &out.utilization {
        assert!(u.iter().all(|&x| x == 0.25));
    }
}

#[test]
fn loss_breakdown_identity_and_alpha_zero() {
    let config = ModelConfig::tiny();
    let model = MapexModel::new(config.clone(), 2).unwrap();
    let data = tiny_data(&config, 4);
    let refs: Vec<&MultiModalSample> = data.train.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let plan = BatchPlan::draw(&model, 4, 0.0, &mut rng).unwrap();
    for alpha in [0.0, 0.01, 0.7] {
        let mut g = Graph::new();
        let out = build_loss(&mut g, &model, &refs, &plan, alpha).unwrap();
        let b = out.breakdown;
        assert_eq!(b.total, b.l_rec + b.alpha * b.l_load);
        assert_eq!(b, LossBreakdown::new(b.l_rec, b.l_load, alpha));
        if alpha == 0.0 {
            assert_eq!(b.total, b.l_rec);
        }
        assert!(b.l_load > 0.0);
        for u in &out.utilization {
            assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(out.decoder_lengths.iter().all(|&t| t == config.tokens_per_modality()));
        assert!(out.masked_counts.iter().all(|&n| n == 3));
    }
}

#[test]
fn dropped_modality_gets_no_embedder_gradient() {
    let config = ModelConfig::tiny();
    let mut model = MapexModel::new(config.clone(), 3).unwrap();
    let data = tiny_data(&config, 4);
    let refs: Vec<&MultiModalSample> = data.train.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut plan = BatchPlan::draw(&model, 4, 0.0, &mut rng).unwrap();
    plan.zeroed = vec![false, true, false, true];
    let mut g = Graph::new();
    let out = build_loss(&mut g, &model, &refs, &plan, 0.01).unwrap();
    assert_eq!(out.decoder_lengths.len(), 2);
    model.store.zero_grad();
    g.backward(out.total).unwrap();
    g.accumulate_param_grads(&mut model.store);
    for j in 0..4 {
        let w = model.store.find(&format!("embed.{j}.w")).unwrap();
        let norm: f64 = model.store.grad(w).data().iter().map(|x| x.abs()).sum();
        assert_eq!(norm == 0.0, plan.zeroed[j], "modality {j}");
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let r = model_grad_check(&ModelConfig::tiny(), 7, 1e-5, 12).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    let shared = ModelConfig { shared_expert: true, routing: RoutingMode::PosEmbed, ..ModelConfig::tiny() };
    let r = model_grad_check(&shared, 8, 1e-5, 12).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn short_pretraining_reduces_reconstruction_loss() {
    let config = ModelConfig::tiny();
    let mut model = MapexModel::new(config.clone(), 0).unwrap();
    let data = tiny_data(&config, 16);
    let cfg = PretrainConfig { steps: 30, batch: 4, eval_every: 10, val_samples: 8, ..Default::default() };
    let report = pretrain(&mut model, &data.train, &data.val, &cfg).unwrap();
    assert_eq!(report.metrics.len(), 30);
    assert_eq!(report.val_curve.iter().map(|v| v.0).collect::<Vec<_>>(), vec![0, 10, 20, 30]);
    assert!(report.final_val().unwrap() < report.initial_val().unwrap());

    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &report.metrics).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,l_rec,l_load,total,layer,u_0,u_1,u_2,u_3\n"));
    assert_eq!(text.lines().count(), 1 + 30 * config.depth);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let config = ModelConfig::tiny();
    let mut model = MapexModel::new(config.clone(), 0).unwrap();
    let id = model.store.find("decoder.head.0.b").unwrap();
    model.store.value_mut(id).data_mut()[0] = f64::NAN;
    let data = tiny_data(&config, 8);
    let cfg = PretrainConfig { steps: 3, batch: 2, val_samples: 0, ..Default::default() };
    match pretrain(&mut model, &data.train, &data.val, &cfg) {
        Err(MapexError::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected non-finite loss error, got {:?}", other.map(|_| ())),
    }
}
