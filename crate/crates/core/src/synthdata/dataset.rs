use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::seeds;

use super::{degrade, generate_scene, write_mask_pgm, write_pnm, Degradation, Sample, SceneConfig, SynthError};

const MANIFEST_VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub scene: SceneConfig,
    pub degradation: Degradation,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Builds sample `index` of `split`. Pure in `(dataset_seed, split, index)`.
pub fn make_sample(
    dataset_seed: u64,
    split: Split,
    index: usize,
    scene: &SceneConfig,
    degradation: &Degradation,
) -> Result<Sample, SynthError> {
    let sample_seed = seeds::derive(dataset_seed, split.tag(), index as u64);
    let s = generate_scene(sample_seed, scene)?;
    let degraded = degrade(&s.clean, degradation, seeds::derive(sample_seed, "noise", 0))?;
    Ok(Sample {
        clean: s.clean,
        degraded,
        label: s.label,
        mask: s.mask,
        sample_seed,
    })
}

/// All samples of one split, generated over `exec` and returned in index
/// order.
pub fn make_split(
    dataset_seed: u64,
    split: Split,
    n: usize,
    scene: &SceneConfig,
    degradation: &Degradation,
    exec: Exec,
) -> Result<Vec<Sample>, SynthError> {
    scene.validate()?;
    degradation.validate()?;
    exec.map_indexed(n, |i| make_sample(dataset_seed, split, i, scene, degradation))
        .into_iter()
        .collect()
}

pub fn make_dataset(
    dataset_seed: u64,
    n_train: usize,
    n_eval: usize,
    scene: &SceneConfig,
    degradation: &Degradation,
    exec: Exec,
) -> Result<Dataset, SynthError> {
    if n_train == 0 || n_eval == 0 {
        return Err(SynthError::Config("both splits need at least one sample".into()));
    }
    Ok(Dataset {
        seed: dataset_seed,
        scene: scene.clone(),
        degradation: degradation.clone(),
        train: make_split(dataset_seed, Split::Train, n_train, scene, degradation, exec)?,
        eval: make_split(dataset_seed, Split::Eval, n_eval, scene, degradation, exec)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub sample_seed: u64,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dataset_seed: u64,
    pub scene: SceneConfig,
    pub degradation: String,
    pub train: Vec<ManifestEntry>,
    pub eval: Vec<ManifestEntry>,
}

fn entries(samples: &[Sample]) -> Vec<ManifestEntry> {
    samples
        .iter()
        .enumerate()
        .map(|(index, s)| ManifestEntry {
            index,
            sample_seed: s.sample_seed,
            label: s.label,
        })
        .collect()
}

/// Writes `train/` and `eval/` image folders (16-bit clean and degraded
/// images, 0/1 masks) and `manifest.json`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), SynthError> {
    for (split, samples) in [(Split::Train, &dataset.train), (Split::Eval, &dataset.eval)] {
        let sub = dir.join(split.tag());
        fs::create_dir_all(&sub)?;
        for (i, s) in samples.iter().enumerate() {
            let (h, w) = (s.clean.shape()[1], s.clean.shape()[2]);
            let ext = if s.clean.shape()[0] == 1 { "pgm" } else { "ppm" };
            write_pnm(&sub.join(format!("{i:05}_clean.{ext}")), &s.clean)?;
            write_pnm(&sub.join(format!("{i:05}_degraded.{ext}")), &s.degraded)?;
            write_mask_pgm(&sub.join(format!("{i:05}_mask.pgm")), &s.mask, h, w)?;
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dataset_seed: dataset.seed,
        scene: dataset.scene.clone(),
        degradation: dataset.degradation.to_string(),
        train: entries(&dataset.train),
        eval: entries(&dataset.eval),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Rebuilds a dataset from its manifest. Samples are regenerated from their
/// seeds at full precision, then checked against the recorded labels.
pub fn load_dataset(dir: &Path, exec: Exec) -> Result<Dataset, SynthError> {
    let path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(SynthError::Format {
            path: path.display().to_string(),
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let degradation: Degradation = manifest.degradation.parse()?;
    let dataset = make_dataset(
        manifest.dataset_seed,
        manifest.train.len(),
        manifest.eval.len(),
        &manifest.scene,
        &degradation,
        exec,
    )?;
    let consistent = [(&dataset.train, &manifest.train), (&dataset.eval, &manifest.eval)]
        .iter()
        .all(|(samples, entries)| {
            samples
                .iter()
                .zip(entries.iter())
                .all(|(s, e)| s.sample_seed == e.sample_seed && s.label == e.label)
        });
    if !consistent {
        return Err(SynthError::Format {
            path: path.display().to_string(),
            reason: "manifest seeds or labels do not match regenerated samples".into(),
        });
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((
                        p.strip_prefix(dir).unwrap().display().to_string(),
                        fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_writes_identical_bytes() {
        let deg: Degradation = "gaussian:0.1".parse().unwrap();
        let scene = SceneConfig::default();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let d1 = make_dataset(11, 6, 3, &scene, &deg, Exec::Parallel).unwrap();
        let d2 = make_dataset(11, 6, 3, &scene, &deg, Exec::Sequential).unwrap();
        assert_eq!(d1, d2);
        write_dataset(a.path(), &d1).unwrap();
        write_dataset(b.path(), &d2).unwrap();
        assert_eq!(read_tree(a.path()), read_tree(b.path()));
        assert_eq!(load_dataset(a.path(), Exec::Sequential).unwrap(), d1);
    }

    #[test]
    fn train_and_eval_seeds_are_disjoint() {
        let deg: Degradation = "gaussian:0.1".parse().unwrap();
        let d = make_dataset(3, 200, 200, &SceneConfig::default(), &deg, Exec::default()).unwrap();
        let train: std::collections::HashSet<u64> = d.train.iter().map(|s| s.sample_seed).collect();
        assert!(d.eval.iter().all(|s| !train.contains(&s.sample_seed)));
    }

    #[test]
    fn labels_roughly_balanced() {
        let deg = Degradation::Gaussian { sigma: 0.0 };
        let d = make_dataset(1, 1000, 1, &SceneConfig::default(), &deg, Exec::default()).unwrap();
        let mut counts = [0usize; 3];
        d.train.iter().for_each(|s| counts[s.label] += 1);
        for c in counts {
            let f = c as f64 / 1000.0;
            assert!((0.25..=0.42).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn sr_pipeline_downsamples() {
        let deg: Degradation = "downsample:2".parse().unwrap();
        let s = make_sample(0, Split::Train, 0, &SceneConfig::default(), &deg).unwrap();
        assert_eq!(s.degraded.shape(), &[1, 16, 16]);
    }
}
