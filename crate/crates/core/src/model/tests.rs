use super::*;
use crate::data::{generate, DataConfig};

fn tiny_data(config: &ModelConfig, n: usize) -> Vec<MultiModalSample> {
    let dc = DataConfig {
        modalities: config.modalities.clone(),
        image_size: config.image_size,
        patch_size: config.patch_size,
        n_train: n,
        n_val: 4,
        n_test: 4,
        ..Default::default()
    };
    generate(&dc).unwrap().train
}

fn all_visible(config: &ModelConfig, nb: usize, nm: usize) -> Vec<Vec<Vec<usize>>> {
    vec![vec![(0..config.tokens_per_modality()).collect(); nm]; nb]
}

#[test]
fn encoder_sequence_layout() {
    let config = ModelConfig::tiny();
    let model = MapexModel::new(config.clone(), 1).unwrap();
    let data = tiny_data(&config, 4);
    let refs: Vec<&MultiModalSample> = data.iter().take(2).collect();
    let modalities = [0, 2];
    let visible = vec![vec![vec![0, 3], vec![1]], vec![vec![1, 2], vec![0]]];
    let zeroed = [false, false];
    let mut g = Graph::new();
    let req = EncodeRequest { samples: &refs, modalities: &modalities, visible: &visible, zeroed: &zeroed };
    let enc = model.encode(&mut g, &req).unwrap();
    // 2 + 1 visible patches plus one end token per modality, per sample.
    assert_eq!(enc.seg_len, 5);
    assert_eq!(g.shape(enc.out), &[10, config.dim]);
    assert_eq!(enc.rows[0], TokenRow { sample: 0, modality: 0, position: Some(0) });
    assert_eq!(enc.rows[2], TokenRow { sample: 0, modality: 0, position: None });
    assert_eq!(enc.rows[9], TokenRow { sample: 1, modality: 2, position: None });

    let dec = model.decode_modality(&mut g, &enc, 0).unwrap();
    assert_eq!(dec.seq_len, config.tokens_per_modality());
    assert_eq!(dec.mask_insertions, 2 * (config.tokens_per_modality() - 2));
    assert_eq!(g.shape(dec.pred), &[2 * config.tokens_per_modality(), config.patch_pixels(0)]);
}

#[test]
fn routing_depends_only_on_modality() {
    let config = ModelConfig::tiny();
    let model = MapexModel::new(config, 3).unwrap();
    for l in 0..2 {
        for m in 0..4 {
            let a = model.route(l, m, &[0.0; 16]).unwrap();
            let b = model.route(l, m, &[5.0; 16]).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.selected.len(), 2);
            assert!((a.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn routing_in_graph_matches_value_path() {
    let config = ModelConfig::tiny();
    let model = MapexModel::new(config.clone(), 5).unwrap();
    let data = tiny_data(&config, 4);
    let refs: Vec<&MultiModalSample> = data.iter().collect();
    let modalities = [0, 1, 2, 3];
    let visible = all_visible(&config, 4, 4);
    let zeroed = [false; 4];
    let mut g = Graph::new();
    let req = EncodeRequest { samples: &refs, modalities: &modalities, visible: &visible, zeroed: &zeroed };
    let enc = model.encode(&mut g, &req).unwrap();
    for l in 0..config.depth {
        for (i, &m) in modalities.iter().enumerate() {
            assert_eq!(enc.decisions[l][i], model.routing_decision(l, m).unwrap());
        }
        assert_eq!(enc.expert_calls[l].iter().sum::<usize>(), 4 * config.top_k);
    }
}

#[test]
fn deterministic_routing_uses_one_expert_per_modality() {
    let config = ModelConfig { routing: RoutingMode::Deterministic, ..ModelConfig::tiny() };
    let model = MapexModel::new(config.clone(), 0).unwrap();
    assert!(model.blocks.iter().all(|b| b.moe.router.is_none()));
    for m in 0..4 {
        let d = model.routing_decision(1, m).unwrap();
        assert_eq!(d.selected, vec![m % config.experts]);
        assert_eq!(d.gates, vec![1.0]);
    }
}

#[test]
fn features_are_pooled_and_finite() {
    let config = ModelConfig::tiny();
    let model = MapexModel::new(config.clone(), 2).unwrap();
    let data = tiny_data(&config, 4);
    let refs: Vec<&MultiModalSample> = data.iter().collect();
    let f = model.forward_features(&refs, &[1, 3]).unwrap();
    assert_eq!(f.len(), 4);
    assert!(f.iter().all(|v| v.len() == config.dim && v.iter().all(|x| x.is_finite())));
}

#[test]
fn same_seed_same_parameters() {
    let a = MapexModel::new(ModelConfig::tiny(), 9).unwrap();
    let b = MapexModel::new(ModelConfig::tiny(), 9).unwrap();
    let c = MapexModel::new(ModelConfig::tiny(), 10).unwrap();
    let vals = |m: &MapexModel| m.store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(vals(&a), vals(&b));
    assert_ne!(vals(&a), vals(&c));
    assert_eq!(a.param_count(), b.param_count());
}

#[test]
fn skeleton_build_and_copy_reproduce_model() {
    let config = ModelConfig::tiny();
    let model = MapexModel::new(config.clone(), 4).unwrap();
    let mut copy = MapexModel::build(config.clone(), &model.layout(), None).unwrap();
    assert_eq!(copy.param_count(), model.param_count());
    copy.copy_params_from(&model).unwrap();
    let data = tiny_data(&config, 4);
    let refs: Vec<&MultiModalSample> = data.iter().collect();
    assert_eq!(model.forward_features(&refs, &[0, 1]).unwrap(), copy.forward_features(&refs, &[0, 1]).unwrap());
}

#[test]
fn missing_modality_is_reported() {
    let config = ModelConfig::tiny();
    let layout = Layout { modalities: vec![0, 1], ..Layout::full(&config) };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = MapexModel::build(config.clone(), &layout, Some(&mut rng)).unwrap();
    let data = tiny_data(&config, 4);
    let refs: Vec<&MultiModalSample> = data.iter().collect();
    assert!(matches!(model.forward_features(&refs, &[2]), Err(MapexError::ModalityUnavailable(2))));
}

#[test]
fn patchify_matches_plane_layout() {
    let config = ModelConfig::tiny();
    let model = MapexModel::new(config.clone(), 0).unwrap();
    let data = tiny_data(&config, 4);
    let t = model.patchify(&data[0], 0);
    assert_eq!(t.shape(), &[4, 3 * 16]);
    let plane = data[0].plane(0);
    // Patch 3 is the bottom-right 4x4 block; its second channel, row 1, column 2.
    let want = plane.data()[64 + (4 + 1) * 8 + 4 + 2];
    assert_eq!(t.data()[3 * 48 + 16 + 4 + 2], want);
}
