use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DataConfig, Dataset, DatasetStats, MultiModalSample};
use crate::autograd::Tensor;
use crate::error::{MapexError, Result};

/// Per-modality frequency multiplier, so modalities differ in texture scale.
const MODALITY_FREQ: [f64; 6] = [1.0, 1.5, 0.75, 2.0, 1.25, 1.75];

fn validate(config: &DataConfig) -> Result<()> {
    let m = config.modalities.len();
    if m < 2 {
        return Err(MapexError::config("modalities", "need at least two modalities"));
    }
    for (i, spec) in config.modalities.iter().enumerate() {
        if spec.id != i {
            return Err(MapexError::config("modalities", "modality ids must be contiguous from 0"));
        }
        if spec.channels == 0 {
            return Err(MapexError::config("modalities", format!("{} has no channels", spec.name)));
        }
    }
    if config.classes < 2 {
        return Err(MapexError::config("classes", "need at least two classes"));
    }
    if config.patch_size == 0 || config.image_size == 0 || config.image_size % config.patch_size != 0 {
        return Err(MapexError::config(
            "image_size",
            format!("{} not divisible by patch size {}", config.image_size, config.patch_size),
        ));
    }
    for (key, n) in [("n_train", config.n_train), ("n_val", config.n_val), ("n_test", config.n_test)] {
        if n == 0 || n % config.classes != 0 {
            return Err(MapexError::config(key, format!("{n} is not a positive multiple of classes")));
        }
    }
    if config.noise < 0.0 || !config.noise.is_finite() {
        return Err(MapexError::config("noise", "must be finite and non-negative"));
    }
    if !(0.0..=1.0).contains(&config.phase_jitter) {
        return Err(MapexError::config("phase_jitter", "must lie in [0, 1]"));
    }
    Ok(())
}

/// Orientation, spatial frequency (cycles per image) and phase of class `c`'s grating.
/// Orientations share a 45° fan, so classes are close enough that features must be learned.
fn class_pattern(class: usize, classes: usize) -> (f64, f64, f64) {
    let theta = 0.25 * PI * class as f64 / classes as f64;
    let freq = 1.0 + 0.5 * (class % 2) as f64;
    let phase = 0.9 * class as f64;
    (theta, freq, phase)
}

fn stream(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

fn make_sample(config: &DataConfig, id: usize, label: usize) -> MultiModalSample {
    let mut rng = stream(config.seed, id);
    let size = config.image_size;
    let (theta, freq, phase) = class_pattern(label, config.classes);
    let (ct, st) = (theta.cos(), theta.sin());
    // A shift along the grating normal, shared by all modalities of the sample (they are co-located).
    let offset = config.phase_jitter * 2.0 * PI * rng.random::<f64>();
    let planes = config
        .modalities
        .iter()
        .map(|spec| {
            let mult = MODALITY_FREQ[spec.id % MODALITY_FREQ.len()];
            let f = freq * mult;
            let mut data = Vec::with_capacity(spec.channels * size * size);
            for ch in 0..spec.channels {
                let shift = ch as f64 * PI / 3.0;
                let amp = spec.informativeness * (1.0 - 0.15 * ch as f64);
                for y in 0..size {
                    for x in 0..size {
                        let u = (x as f64 * ct + y as f64 * st) / size as f64;
                        let signal = amp * (2.0 * PI * f * u + phase + shift + mult * offset).cos();
                        let noise: f64 = if config.noise > 0.0 {
                            config.noise * rng.sample::<f64, _>(StandardNormal)
                        } else {
                            0.0
                        };
                        data.push(signal + noise);
                    }
                }
            }
            Tensor::new(vec![spec.channels, size, size], data).expect("plane shape")
        })
        .collect();
    MultiModalSample { id, label, planes }
}

/// Generates all three splits. Sample `i` depends only on `(config, i)`.
pub fn generate(config: &DataConfig) -> Result<Dataset> {
    validate(config)?;
    let make_split = |start: usize, n: usize| -> Vec<MultiModalSample> {
        (0..n).map(|i| make_sample(config, start + i, i % config.classes)).collect()
    };
    let train = make_split(0, config.n_train);
    let val = make_split(config.n_train, config.n_val);
    let test = make_split(config.n_train + config.n_val, config.n_test);
    Ok(Dataset { config: config.clone(), train, val, test })
}

pub fn compute_stats(train: &[MultiModalSample]) -> Result<DatasetStats> {
    let first = train.first().ok_or_else(|| MapexError::Data("empty training split".into()))?;
    let channels: usize = first.planes.iter().map(|p| p.shape()[0]).sum();
    let mut sum = vec![0.0; channels];
    let mut count = vec![0usize; channels];
    for s in train {
        let mut c0 = 0;
        for p in &s.planes {
            let (c, plane) = (p.shape()[0], p.shape()[1] * p.shape()[2]);
            for ch in 0..c {
                sum[c0 + ch] += p.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                count[c0 + ch] += plane;
            }
            c0 += c;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let mut sq = vec![0.0; channels];
    for s in train {
        let mut c0 = 0;
        for p in &s.planes {
            let (c, plane) = (p.shape()[0], p.shape()[1] * p.shape()[2]);
            for ch in 0..c {
                let mu = mean[c0 + ch];
                sq[c0 + ch] +=
                    p.data()[ch * plane..(ch + 1) * plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            c0 += c;
        }
    }
    let std: Vec<f64> = sq.iter().zip(&count).map(|(s, &n)| (s / n as f64).sqrt()).collect();
    if let Some(channel) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(MapexError::DegenerateChannel { channel });
    }
    Ok(DatasetStats { mean, std })
}

pub fn normalize(sample: &MultiModalSample, stats: &DatasetStats) -> MultiModalSample {
    let mut out = sample.clone();
    let mut c0 = 0;
    for p in &mut out.planes {
        let c = p.shape()[0];
        let plane = p.numel() / c;
        for ch in 0..c {
            let (mu, sd) = (stats.mean[c0 + ch], stats.std[c0 + ch]);
            for v in &mut p.data_mut()[ch * plane..(ch + 1) * plane] {
                *v = (*v - mu) / sd;
            }
        }
        c0 += c;
    }
    out
}

/// Normalizes every split with statistics from the training split.
pub fn normalize_dataset(dataset: &Dataset) -> Result<(Dataset, DatasetStats)> {
    let stats = compute_stats(&dataset.train)?;
    let apply = |split: &[MultiModalSample]| split.iter().map(|s| normalize(s, &stats)).collect();
    let out = Dataset {
        config: dataset.config.clone(),
        train: apply(&dataset.train),
        val: apply(&dataset.val),
        test: apply(&dataset.test),
    };
    Ok((out, stats))
}

/// Keeps exactly `k_shot` training samples per class; val/test are untouched.
pub fn few_shot_subset(dataset: &Dataset, k_shot: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for class in 0..dataset.config.classes {
        let members: Vec<usize> =
            (0..dataset.train.len()).filter(|&i| dataset.train[i].label == class).collect();
        if members.len() < k_shot {
            return Err(MapexError::Data(format!(
                "class {class} has {} training samples, {k_shot} requested",
                members.len()
            )));
        }
        keep.extend(sample_indices(&mut rng, members.len(), k_shot).into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    let mut out = dataset.clone();
    out.train = keep.into_iter().map(|i| dataset.train[i].clone()).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use std::collections::HashSet;

    fn small() -> DataConfig {
        DataConfig { n_train: 40, n_val: 8, n_test: 8, ..Default::default() }
    }

    #[test]
    fn noise_free_same_class_samples_identical() {
        let cfg = DataConfig { noise: 0.0, phase_jitter: 0.0, ..small() };
        let a = make_sample(&cfg, 3, 1);
        let b = make_sample(&cfg, 17, 1);
        assert_eq!(a.planes, b.planes);
        assert_ne!(a.planes, make_sample(&cfg, 4, 2).planes);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = generate(&DataConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(generate(&small()).unwrap().train[0], other.train[0]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small();
        cfg.modalities.truncate(1);
        assert!(generate(&cfg).is_err());
        assert!(generate(&DataConfig { image_size: 30, ..small() }).is_err());
        assert!(generate(&DataConfig { classes: 1, ..small() }).is_err());
        assert!(generate(&DataConfig { n_train: 41, ..small() }).is_err());
    }

    #[test]
    fn splits_disjoint_and_balanced() {
        let d = generate(&small()).unwrap();
        let mut ids = HashSet::new();
        for split in Split::ALL {
            let s = d.split(split);
            for x in s {
                assert!(ids.insert(x.id), "duplicate id {}", x.id);
            }
            for c in 0..4 {
                assert_eq!(s.iter().filter(|x| x.label == c).count(), s.len() / 4);
            }
        }
    }

    #[test]
    fn normalize_closed_form_and_zero_mean() {
        let stats = DatasetStats { mean: vec![5.0], std: vec![2.0] };
        let s = MultiModalSample {
            id: 0,
            label: 0,
            planes: vec![Tensor::new(vec![1, 1, 1], vec![9.0]).unwrap()],
        };
        assert_eq!(normalize(&s, &stats).planes[0].data(), &[2.0]);

        let d = generate(&small()).unwrap();
        let (n, _) = normalize_dataset(&d).unwrap();
        let again = compute_stats(&n.train).unwrap();
        for (mu, sd) in again.mean.iter().zip(&again.std) {
            assert!(mu.abs() < 1e-10, "mean {mu}");
            assert!((sd - 1.0).abs() < 1e-10, "std {sd}");
        }
    }

    #[test]
    fn normalized_output_invariant_to_constant_shift() {
        let d = generate(&small()).unwrap();
        let mut shifted = d.clone();
        for s in &mut shifted.train {
            for p in &mut s.planes {
                p.data_mut().iter_mut().for_each(|v| *v += 3.5);
            }
        }
        let (a, _) = normalize_dataset(&d).unwrap();
        let (b, _) = normalize_dataset(&shifted).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            for (p, q) in x.planes.iter().zip(&y.planes) {
                assert!(p.max_abs_diff(q) < 1e-9);
            }
        }
    }

    #[test]
    fn zero_std_channel_is_error() {
        let s = MultiModalSample {
            id: 0,
            label: 0,
            planes: vec![Tensor::new(vec![1, 2, 2], vec![1.0; 4]).unwrap()],
        };
        assert!(matches!(compute_stats(&[s]), Err(MapexError::DegenerateChannel { channel: 0 })));
    }

    #[test]
    fn few_shot_counts_and_determinism() {
        let d = generate(&small()).unwrap();
        let f = few_shot_subset(&d, 10, 7).unwrap();
        assert_eq!(f.train.len(), 40);
        for c in 0..4 {
            assert_eq!(f.train.iter().filter(|x| x.label == c).count(), 10);
        }
        assert_eq!(f.val, d.val);
        assert_eq!(f.test, d.test);
        assert_eq!(f, few_shot_subset(&d, 10, 7).unwrap());
        assert!(few_shot_subset(&d, 11, 0).is_err());

        let few = few_shot_subset(&d, 3, 0).unwrap();
        assert_eq!(few.train.len(), 12);
        for pair in 0..5u64 {
            let a = few_shot_subset(&d, 3, 2 * pair).unwrap();
            let b = few_shot_subset(&d, 3, 2 * pair + 1).unwrap();
            let ids = |x: &Dataset| x.train.iter().map(|s| s.id).collect::<Vec<_>>();
            assert_ne!(ids(&a), ids(&b));
        }
    }
}
