//! The toy face-embedding model, closed-set identification, the protection
//! success rate, and full-reference image quality metrics.
//!
//! Quality metrics are computed in the [0, 1] pixel domain after mapping
//! from [-1, 1]; every report that carries them records this.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{check_image, seeded_rng, AdamState, Conv2d, Dense, Graph, Grads, NodeId, ParamVisit, Tensor};

/// Unit-normalized identity embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub h: Vec<f64>,
}

/// Reference embeddings per identity. Labels are unique and each has at
/// least one reference.
#[derive(Debug, Clone)]
pub struct Gallery {
    entries: Vec<(u32, Vec<Embedding>)>,
}

impl Gallery {
    pub fn new(mut entries: Vec<(u32, Vec<Embedding>)>) -> Result<Gallery> {
        if entries.is_empty() {
            return Err(Error::invalid("gallery must not be empty"));
        }
        entries.sort_by_key(|(label, _)| *label);
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::invalid(format!("duplicate gallery label {}", pair[0].0)));
            }
        }
        if entries.iter().any(|(_, refs)| refs.is_empty()) {
            return Err(Error::invalid("every gallery identity needs a reference"));
        }
        Ok(Gallery { entries })
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|(l, _)| *l)
    }

    pub fn entries(&self) -> &[(u32, Vec<Embedding>)] {
        &self.entries
    }
}

/// PSNR (dB) and mean SSIM for one image pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityScores {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Toy convolutional classifier; its penultimate layer is the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub fc_embed: Dense,
    pub fc_logits: Dense,
}

impl EmbedderParams {
    pub fn new(rng: &mut ChaCha8Rng, embed_dim: usize, n_classes: usize) -> EmbedderParams {
        EmbedderParams {
            conv1: Conv2d::new(rng, 3, 8, 3, 2),
            conv2: Conv2d::new(rng, 8, 16, 3, 2),
            conv3: Conv2d::new(rng, 16, 32, 3, 2),
            fc_embed: Dense::new(rng, 32, embed_dim),
            fc_logits: Dense::new(rng, embed_dim, n_classes),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.fc_embed.weight.shape[0]
    }

    /// Pre-normalization embedding node.
    pub fn embed_node(&self, g: &mut Graph, x: NodeId, trainable: bool) -> NodeId {
        let h = self.conv1.fwd(g, x, trainable);
        let h = g.leaky_relu(h, 0.2);
        let h = self.conv2.fwd(g, h, trainable);
        let h = g.leaky_relu(h, 0.2);
        let h = self.conv3.fwd(g, h, trainable);
        let h = g.leaky_relu(h, 0.2);
        let p = g.global_avg_pool(h);
        self.fc_embed.fwd(g, p, trainable)
    }

    fn logits_node(&self, g: &mut Graph, x: NodeId, trainable: bool) -> NodeId {
        let e = self.embed_node(g, x, trainable);
        let e = g.leaky_relu(e, 0.2);
        self.fc_logits.fwd(g, e, trainable)
    }
}

impl ParamVisit for EmbedderParams {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.conv3.visit(f);
        self.fc_embed.visit(f);
        self.fc_logits.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.conv3.visit_mut(f);
        self.fc_embed.visit_mut(f);
        self.fc_logits.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            embed_dim: 128,
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Train the toy embedder as a classifier over identities.
pub fn train_toy_embedder(
    images: &[Tensor],
    labels: &[u32],
    config: &EmbedderConfig,
) -> Result<EmbedderParams> {
    if images.len() != labels.len() {
        return Err(Error::invalid("images and labels must align"));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::invalid("need at least 2 identities"));
    }
    if counts.values().any(|&c| c < 2) {
        return Err(Error::invalid("every identity needs at least 2 images"));
    }
    let n_classes = *counts.keys().max().unwrap() as usize + 1;

    let mut rng = seeded_rng(crate::nn::derive_seed(config.seed, "toy-embedder"));
    let mut params = EmbedderParams::new(&mut rng, config.embed_dim, n_classes);
    let mut adam = AdamState::for_net(&params);

    let mut order: Vec<usize> = (0..images.len()).collect();
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut acc: Option<Grads> = None;
            for &i in chunk {
                let mut g = Graph::new();
                let x = g.input(images[i].clone());
                let logits = params.logits_node(&mut g, x, true);
                let loss = g.softmax_cross_entropy(logits, labels[i] as usize);
                let grads = g.backward(loss);
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (t, s) in a.by_param.iter_mut().zip(&grads.by_param) {
                            for (d, v) in t.data.iter_mut().zip(&s.data) {
                                *d += v;
                            }
                        }
                        a
                    }
                });
            }
            let mut grads = acc.unwrap();
            let scale = 1.0 / chunk.len() as f64;
            for t in &mut grads.by_param {
                for d in &mut t.data {
                    *d *= scale;
                }
            }
            adam.apply(&mut params, &grads, config.learning_rate);
        }
    }
    Ok(params)
}

/// Embed an image; the result is unit-normalized.
pub fn embed(x: &Tensor, params: &EmbedderParams) -> Result<Embedding> {
    check_image(x)?;
    let mut g = Graph::new();
    let xid = g.input(x.clone());
    let pre = params.embed_node(&mut g, xid, false);
    let raw = g.value(pre).data.clone();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::DegenerateEmbedding { norm });
    }
    Ok(Embedding {
        h: raw.iter().map(|v| v / norm).collect(),
    })
}

/// Cosine similarity of two embeddings (dot product of unit vectors).
pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.h.len() != b.h.len() {
        return Err(Error::invalid(format!(
            "embedding dims differ: {} vs {}",
            a.h.len(),
            b.h.len()
        )));
    }
    Ok(a.h.iter().zip(&b.h).map(|(x, y)| x * y).sum())
}

/// Closed-set identification: the label whose best reference maximizes
/// cosine similarity. Ties break toward the lowest label.
pub fn identify(probe: &Embedding, gallery: &Gallery) -> Result<u32> {
    let mut best_label = None;
    let mut best_sim = f64::NEG_INFINITY;
    for (label, refs) in gallery.entries() {
        for r in refs {
            let sim = cosine_sim(probe, r)?;
            if sim > best_sim {
                best_sim = sim;
                best_label = Some(*label);
            }
        }
    }
    best_label.ok_or_else(|| Error::invalid("gallery must not be empty"))
}

/// Protection success rate over probes: `100 * (1 - accuracy)` percent.
pub fn psr(
    probes: &[Tensor],
    true_labels: &[u32],
    gallery: &Gallery,
    embedder: &EmbedderParams,
) -> Result<f64> {
    if probes.is_empty() || probes.len() != true_labels.len() {
        return Err(Error::invalid("probes must be non-empty and align with labels"));
    }
    let mut correct = 0usize;
    for (x, &label) in probes.iter().zip(true_labels) {
        let h = embed(x, embedder)?;
        if identify(&h, gallery)? == label {
            correct += 1;
        }
    }
    Ok(psr_from_accuracy(100.0 * correct as f64 / probes.len() as f64))
}

/// The defining identity: PSR = 100 - accuracy (both in percent).
pub fn psr_from_accuracy(accuracy_percent: f64) -> f64 {
    100.0 - accuracy_percent
}

/// Identification accuracy (percent) of clean probes, used to qualify the
/// embedder itself.
pub fn identification_accuracy(
    probes: &[Tensor],
    true_labels: &[u32],
    gallery: &Gallery,
    embedder: &EmbedderParams,
) -> Result<f64> {
    let p = psr(probes, true_labels, gallery, embedder)?;
    Ok(100.0 - p)
}

fn to_unit(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

/// PSNR in dB over the [0, 1] domain; identical inputs give the infinity
/// sentinel.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = to_unit(*x) - to_unit(*y);
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let one_d: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = one_d.iter().sum();
    let one_d: Vec<f64> = one_d.iter().map(|v| v / sum).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &one_d {
        for b in &one_d {
            w.push(a * b);
        }
    }
    w
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over the
/// [0, 1] domain, channels averaged. Windows are evaluated where they fit
/// entirely inside the image.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let (c, h, w) = a.chw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = ssim_window();
    let r = SSIM_WINDOW / 2;
    let mut channel_mean = 0.0;
    for ci in 0..c {
        let plane_a = &a.data[ci * h * w..(ci + 1) * h * w];
        let plane_b = &b.data[ci * h * w..(ci + 1) * h * w];
        let mut acc = 0.0;
        let mut count = 0usize;
        for hi in r..h - r {
            for wi in r..w - r {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                let mut k = 0usize;
                for dh in 0..SSIM_WINDOW {
                    let row = (hi + dh - r) * w + wi - r;
                    for dw in 0..SSIM_WINDOW {
                        let wa = to_unit(plane_a[row + dw]);
                        let wb = to_unit(plane_b[row + dw]);
                        let wt = win[k];
                        k += 1;
                        mu_a += wt * wa;
                        mu_b += wt * wb;
                        aa += wt * wa * wa;
                        bb += wt * wb * wb;
                        ab += wt * wa * wb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
                acc += s;
                count += 1;
            }
        }
        channel_mean += acc / count as f64;
    }
    Ok(channel_mean / c as f64)
}

/// Convenience bundle of both quality metrics.
pub fn quality(a: &Tensor, b: &Tensor) -> Result<QualityScores> {
    Ok(QualityScores {
        psnr_db: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}
