//! Directory layout: `manifest.txt` (key=value) plus `{train,val,test}.f32`, each holding the
//! split's samples back to back as little-endian f32, channels of all modalities stacked in
//! modality order, row-major `C×H×W`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DataConfig, Dataset, ModalitySpec, MultiModalSample, Split};
use crate::autograd::Tensor;
use crate::error::{MapexError, Result};

const FORMAT: &str = "mapex-dataset-v1";

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = &dataset.config;
    let mut manifest = String::new();
    let mut kv = |k: &str, v: String| {
        manifest.push_str(k);
        manifest.push('=');
        manifest.push_str(&v);
        manifest.push('\n');
    };
    kv("format", FORMAT.into());
    kv(
        "modalities",
        join(c.modalities.iter().map(|m| format!("{}:{}:{}", m.name, m.channels, m.informativeness))),
    );
    kv("image_size", c.image_size.to_string());
    kv("patch_size", c.patch_size.to_string());
    kv("classes", c.classes.to_string());
    kv("noise", c.noise.to_string());
    kv("phase_jitter", c.phase_jitter.to_string());
    kv("seed", c.seed.to_string());
    for split in Split::ALL {
        let s = dataset.split(split);
        kv(&format!("{}.count", split.name()), s.len().to_string());
        kv(&format!("{}.ids", split.name()), join(s.iter().map(|x| x.id)));
        kv(&format!("{}.labels", split.name()), join(s.iter().map(|x| x.label)));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;

    for split in Split::ALL {
        let mut bytes = Vec::new();
        for sample in dataset.split(split) {
            for plane in &sample.planes {
                for &v in plane.data() {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        fs::write(dir.join(format!("{}.f32", split.name())), bytes)?;
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.parse().map_err(|_| MapexError::Data(format!("bad value in {key}: {x}"))))
        .collect()
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let map: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| map.get(k).copied().ok_or_else(|| MapexError::Data(format!("manifest lacks {k}")));
    if get("format")? != FORMAT {
        return Err(MapexError::Data(format!("unsupported dataset format {}", get("format")?)));
    }
    let num = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| MapexError::Data(format!("bad number for {k}")))
    };
    let mut modalities = Vec::new();
    for (id, entry) in get("modalities")?.split(',').enumerate() {
        let parts: Vec<&str> = entry.split(':').collect();
        if parts.len() != 3 {
            return Err(MapexError::Data(format!("bad modality entry {entry}")));
        }
        let channels = parts[1].parse().map_err(|_| MapexError::Data(format!("bad channels in {entry}")))?;
        let info = parts[2].parse().map_err(|_| MapexError::Data(format!("bad weight in {entry}")))?;
        modalities.push(ModalitySpec::new(id, parts[0], channels, info));
    }
    let size = num("image_size")? as usize;
    let mut config = DataConfig {
        modalities,
        image_size: size,
        patch_size: num("patch_size")? as usize,
        classes: num("classes")? as usize,
        n_train: 0,
        n_val: 0,
        n_test: 0,
        noise: num("noise")?,
        phase_jitter: num("phase_jitter")?,
        seed: get("seed")?.parse().map_err(|_| MapexError::Data("bad seed".into()))?,
    };
    let per_sample: usize = config.total_channels() * size * size;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let name = split.name();
        let ids: Vec<usize> = parse_list(name, get(&format!("{name}.ids"))?)?;
        let labels: Vec<usize> = parse_list(name, get(&format!("{name}.labels"))?)?;
        let count = num(&format!("{name}.count"))? as usize;
        if ids.len() != count || labels.len() != count {
            return Err(MapexError::Data(format!("{name}: count/ids/labels disagree")));
        }
        let bytes = fs::read(dir.join(format!("{name}.f32")))?;
        if bytes.len() != count * per_sample * 4 {
            return Err(MapexError::Data(format!(
                "{name}.f32 holds {} bytes, expected {}",
                bytes.len(),
                count * per_sample * 4
            )));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let mut samples = Vec::with_capacity(count);
        for (&id, &label) in ids.iter().zip(&labels) {
            let planes = config
                .modalities
                .iter()
                .map(|m| {
                    let data: Vec<f64> = values.by_ref().take(m.channels * size * size).collect();
                    Tensor::new(vec![m.channels, size, size], data)
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(MultiModalSample { id, label, planes });
        }
        splits.push(samples);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    config.n_train = train.len();
    config.n_val = val.len();
    config.n_test = test.len();
    Ok(Dataset { config, train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    #[test]
    fn export_import_preserves_labels_and_f32_values() {
        let cfg = DataConfig { n_train: 8, n_val: 4, n_test: 4, ..Default::default() };
        let d = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&d, dir.path()).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back.config, d.config);
        for split in Split::ALL {
            for (a, b) in d.split(split).iter().zip(back.split(split)) {
                assert_eq!((a.id, a.label), (b.id, b.label));
                for (p, q) in a.planes.iter().zip(&b.planes) {
                    let rounded: Vec<f64> = p.data().iter().map(|&v| v as f32 as f64).collect();
                    assert_eq!(rounded, q.data());
                }
            }
        }
    }

    #[test]
    fn truncated_split_file_rejected() {
        let cfg = DataConfig { n_train: 4, n_val: 4, n_test: 4, ..Default::default() };
        let d = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join("val.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(import_dataset(dir.path()).is_err());
    }
}
