//! Dataset ingestion: procedural synthetic identities or a directory of
//! labeled images, resized and normalized to `[-1, 1]`.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{derive_seed, seeded_rng, Tensor};
use crate::pipeline::imgio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DatasetSource {
    /// Procedurally generated per-identity textures.
    SyntheticFaces,
    /// A directory with one subdirectory per identity.
    ImageDirectory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub image_size: usize,
    pub identities: usize,
    pub images_per_identity: usize,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DatasetSource::SyntheticFaces,
            image_size: 64,
            identities: 10,
            images_per_identity: 20,
            split_fraction: 0.5,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::invalid("need at least 2 identities"));
        }
        if self.images_per_identity < 2 {
            return Err(Error::invalid("need at least 2 images per identity"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::invalid("split fraction must lie in (0, 1)"));
        }
        if self.image_size < 12 || self.image_size % 2 != 0 {
            return Err(Error::invalid("image size must be even and at least 12"));
        }
        Ok(())
    }
}

/// Loaded dataset: images in `[-1, 1]` with integer identity labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<u32>,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_identities(&self) -> usize {
        let mut labels: Vec<u32> = self.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        labels.len()
    }

    /// SHA-256 over all pixel data and labels, for reproducibility checks.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (img, label) in self.images.iter().zip(&self.labels) {
            hasher.update(label.to_le_bytes());
            hasher.update(img.le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameters of one procedural identity.
struct IdentityPattern {
    base: [f64; 3],
    waves: Vec<Wave>,
    blob: Blob,
}

struct Wave {
    freq: f64,
    angle: f64,
    phase: f64,
    amp: [f64; 3],
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    amp: [f64; 3],
}

fn identity_pattern(rng: &mut ChaCha8Rng) -> IdentityPattern {
    let mut tri = |lo: f64, hi: f64| -> [f64; 3] {
        [
            rng.gen_range(lo..hi),
            rng.gen_range(lo..hi),
            rng.gen_range(lo..hi),
        ]
    };
    let base = tri(-0.35, 0.35);
    let waves = (0..3)
        .map(|_| Wave {
            freq: rng.gen_range(1.5..5.5),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: [
                rng.gen_range(0.08..0.3),
                rng.gen_range(0.08..0.3),
                rng.gen_range(0.08..0.3),
            ],
        })
        .collect();
    let blob = Blob {
        cx: rng.gen_range(0.25..0.75),
        cy: rng.gen_range(0.25..0.75),
        radius: rng.gen_range(0.15..0.3),
        amp: [
            rng.gen_range(-0.45..0.45),
            rng.gen_range(-0.45..0.45),
            rng.gen_range(-0.45..0.45),
        ],
    };
    IdentityPattern { base, waves, blob }
}

fn render_identity_image(
    pattern: &IdentityPattern,
    size: usize,
    jitter_rng: &mut ChaCha8Rng,
) -> Tensor {
    let phase_jitter: Vec<f64> = pattern
        .waves
        .iter()
        .map(|_| jitter_rng.gen_range(-0.7..0.7))
        .collect();
    let dx = jitter_rng.gen_range(-0.06..0.06);
    let dy = jitter_rng.gen_range(-0.06..0.06);
    let brightness = jitter_rng.gen_range(-0.08..0.08);
    let mut t = Tensor::zeros(&[3, size, size]);
    let noise_sigma = 0.02;
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, noise_sigma).unwrap();
    for hi in 0..size {
        for wi in 0..size {
            let u = wi as f64 / size as f64;
            let v = hi as f64 / size as f64;
            let mut px = [0.0f64; 3];
            for c in 0..3 {
                px[c] = pattern.base[c] + brightness;
            }
            for (w, pj) in pattern.waves.iter().zip(&phase_jitter) {
                let coord = w.angle.cos() * u + w.angle.sin() * v;
                let s = (std::f64::consts::TAU * w.freq * coord + w.phase + pj).sin();
                for c in 0..3 {
                    px[c] += w.amp[c] * s;
                }
            }
            let r2 = (u - pattern.blob.cx - dx).powi(2) + (v - pattern.blob.cy - dy).powi(2);
            let blob = (-r2 / (2.0 * pattern.blob.radius.powi(2))).exp();
            for c in 0..3 {
                px[c] += pattern.blob.amp[c] * blob;
            }
            for c in 0..3 {
                let noisy = px[c] + normal.sample(jitter_rng);
                t.data[(c * size + hi) * size + wi] = noisy.clamp(-0.92, 0.92);
            }
        }
    }
    t
}

/// Load or synthesize the dataset described by the spec.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    match &spec.source {
        DatasetSource::SyntheticFaces => {
            let mut images = Vec::with_capacity(spec.identities * spec.images_per_identity);
            let mut labels = Vec::with_capacity(images.capacity());
            for id in 0..spec.identities {
                let mut id_rng =
                    seeded_rng(derive_seed(spec.seed, &format!("identity-{id}")));
                let pattern = identity_pattern(&mut id_rng);
                let mut jitter_rng =
                    seeded_rng(derive_seed(spec.seed, &format!("jitter-{id}")));
                for _ in 0..spec.images_per_identity {
                    images.push(render_identity_image(&pattern, spec.image_size, &mut jitter_rng));
                    labels.push(id as u32);
                }
            }
            Ok(Dataset {
                images,
                labels,
                image_size: spec.image_size,
            })
        }
        DatasetSource::ImageDirectory { path } => {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path.clone(), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            entries.sort();
            if entries.len() < 2 {
                return Err(Error::invalid(format!(
                    "{} must contain at least 2 identity subdirectories",
                    path.display()
                )));
            }
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for (label, dir) in entries.iter().enumerate() {
                let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| Error::io(dir.clone(), e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        matches!(
                            p.extension().and_then(|e| e.to_str()),
                            Some("png") | Some("jpg") | Some("jpeg")
                        )
                    })
                    .collect();
                files.sort();
                for f in files {
                    let img = imgio::load_image(&f, spec.image_size)?;
                    images.push(img);
                    labels.push(label as u32);
                }
            }
            if images.is_empty() {
                return Err(Error::invalid(format!(
                    "no readable images under {}",
                    path.display()
                )));
            }
            Ok(Dataset {
                images,
                labels,
                image_size: spec.image_size,
            })
        }
    }
}

/// Split into disjoint reference and probe sets so every identity appears
/// in both. Deterministic per seed.
pub fn split_reference_probe(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("split fraction must lie in (0, 1)"));
    }
    let mut by_identity: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &label) in dataset.labels.iter().enumerate() {
        by_identity.entry(label).or_default().push(i);
    }
    let mut rng = seeded_rng(derive_seed(seed, "reference-probe-split"));
    let mut reference = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        image_size: dataset.image_size,
    };
    let mut probe = reference.clone();
    for (label, mut indices) in by_identity {
        if indices.len() < 2 {
            return Err(Error::invalid(format!(
                "identity {label} has a single image and cannot be split"
            )));
        }
        indices.shuffle(&mut rng);
        let n_ref = ((indices.len() as f64 * fraction).round() as usize)
            .clamp(1, indices.len() - 1);
        for (slot, &i) in indices.iter().enumerate() {
            let target = if slot < n_ref { &mut reference } else { &mut probe };
            target.images.push(dataset.images[i].clone());
            target.labels.push(label);
        }
    }
    Ok((reference, probe))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> DatasetSpec {
        DatasetSpec {
            source: DatasetSource::SyntheticFaces,
            image_size: 16,
            identities: 4,
            images_per_identity: 6,
            split_fraction: 0.5,
            seed: 3,
        }
    }

    #[test]
    fn synthetic_counts_and_range() {
        let spec = DatasetSpec {
            identities: 10,
            images_per_identity: 20,
            image_size: 16,
            ..toy_spec()
        };
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 200);
        let mut labels: Vec<u32> = ds.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels, (0..10).collect::<Vec<u32>>());
        for img in &ds.images {
            assert!(img.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = load_dataset(&toy_spec()).unwrap();
        let b = load_dataset(&toy_spec()).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let other = load_dataset(&DatasetSpec {
            seed: 4,
            ..toy_spec()
        })
        .unwrap();
        assert_ne!(a.content_hash(), other.content_hash());
    }

    #[test]
    fn spec_validation() {
        assert!(load_dataset(&DatasetSpec {
            identities: 1,
            ..toy_spec()
        })
        .is_err());
        assert!(load_dataset(&DatasetSpec {
            split_fraction: 1.0,
            ..toy_spec()
        })
        .is_err());
        assert!(load_dataset(&DatasetSpec {
            image_size: 15,
            ..toy_spec()
        })
        .is_err());
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let ds = load_dataset(&toy_spec()).unwrap();
        let (reference, probe) = split_reference_probe(&ds, 0.5, 9).unwrap();
        assert_eq!(reference.len(), 12);
        assert_eq!(probe.len(), 12);
        assert_eq!(reference.len() + probe.len(), ds.len());
        assert_eq!(reference.n_identities(), 4);
        assert_eq!(probe.n_identities(), 4);

        // Disjointness via pixel hashes.
        let hash = |t: &Tensor| {
            use sha2::{Digest, Sha256};
            let mut h = Sha256::new();
            h.update(t.le_bytes());
            format!("{:x}", h.finalize())
        };
        let ref_hashes: std::collections::BTreeSet<String> =
            reference.images.iter().map(hash).collect();
        for img in &probe.images {
            assert!(!ref_hashes.contains(&hash(img)));
        }

        // Union covers the dataset.
        let mut all: Vec<String> = ds.images.iter().map(hash).collect();
        let mut split_all: Vec<String> = reference
            .images
            .iter()
            .chain(&probe.images)
            .map(hash)
            .collect();
        all.sort();
        split_all.sort();
        assert_eq!(all, split_all);
    }

    #[test]
    fn split_rejects_single_image_identities() {
        let ds = Dataset {
            images: vec![Tensor::zeros(&[3, 16, 16]); 3],
            labels: vec![0, 0, 1],
            image_size: 16,
        };
        assert!(split_reference_probe(&ds, 0.5, 0).is_err());
    }

    #[test]
    fn identities_are_separable_by_design() {
        // Mean inter-identity pixel distance should exceed intra-identity
        // distance; this keeps the toy embedder's job feasible.
        let ds = load_dataset(&toy_spec()).unwrap();
        let dist = |a: &Tensor, b: &Tensor| -> f64 {
            a.data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / a.numel() as f64
        };
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for i in 0..ds.len() {
            for j in (i + 1)..ds.len() {
                let d = dist(&ds.images[i], &ds.images[j]);
                if ds.labels[i] == ds.labels[j] {
                    intra.push(d);
                } else {
                    inter.push(d);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&inter) > 2.0 * mean(&intra),
            "inter {} vs intra {}",
            mean(&inter),
            mean(&intra)
        );
    }
}
