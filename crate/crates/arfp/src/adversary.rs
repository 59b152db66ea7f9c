//! The surrogate restoration adversary and the post-hoc attack family.
//!
//! The restorer is an unconditioned image-to-image network: it never sees a
//! key or nonce (the operation signatures have no such parameters). The
//! same architecture serves as the training-time surrogate and, with an
//! independent initialization, as the evaluation attacker. Simplified
//! purifier stand-ins (Gaussian blur, noise-plus-denoiser) cover the
//! unsupervised attack families.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{check_image, seeded_rng, AdamState, Conv2d, Graph, Grads, NodeId, ParamVisit, Tensor};

/// U-shaped encoder–decoder restorer with a residual output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryParams {
    pub enc1: Conv2d,
    pub enc2: Conv2d,
    pub mid: Conv2d,
    pub dec1: Conv2d,
    pub out: Conv2d,
}

impl AdversaryParams {
    pub fn new(rng: &mut ChaCha8Rng, base_channels: usize) -> AdversaryParams {
        let c = base_channels;
        AdversaryParams {
            enc1: Conv2d::new(rng, 3, c, 3, 1),
            enc2: Conv2d::new(rng, c, 2 * c, 3, 2),
            mid: Conv2d::new(rng, 2 * c, 2 * c, 3, 1),
            dec1: Conv2d::new(rng, 2 * c, c, 3, 1),
            // Zero output head: the restorer starts as the identity.
            out: Conv2d::zeroed(c, 3, 3, 1),
        }
    }

    pub fn fwd(&self, g: &mut Graph, z: NodeId, trainable: bool) -> NodeId {
        let h1 = self.enc1.fwd(g, z, trainable);
        let h1 = g.leaky_relu(h1, 0.2);
        let h2 = self.enc2.fwd(g, h1, trainable);
        let h2 = g.leaky_relu(h2, 0.2);
        let b = self.mid.fwd(g, h2, trainable);
        let b = g.leaky_relu(b, 0.2);
        let u = g.upsample2(b);
        let d = self.dec1.fwd(g, u, trainable);
        let d = g.leaky_relu(d, 0.2);
        let skip = g.add(d, h1);
        let o = self.out.fwd(g, skip, trainable);
        let corr = g.tanh(o);
        let sum = g.add(z, corr);
        g.clamp(sum, -1.0, 1.0)
    }
}

impl ParamVisit for AdversaryParams {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.enc1.visit(f);
        self.enc2.visit(f);
        self.mid.visit(f);
        self.dec1.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.enc1.visit_mut(f);
        self.enc2.visit_mut(f);
        self.mid.visit_mut(f);
        self.dec1.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Which simplified purifier to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PurifierFamily {
    BlurPurifier,
    NoisePurifier,
}

/// Attack family and training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub epochs: usize,
    pub base_channels: usize,
    pub lambda_l2: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            batch_size: 32,
            learning_rate: 1e-4,
            decay_factor: 0.95,
            decay_interval: 10,
            epochs: 60,
            base_channels: 16,
            lambda_l2: 0.5,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.decay_interval == 0 {
            return Err(Error::invalid("attack schedule counts must be positive"));
        }
        if self.learning_rate <= 0.0 || self.decay_factor <= 0.0 {
            return Err(Error::invalid("attack schedule rates must be positive"));
        }
        if self.lambda_l2 < 0.0 {
            return Err(Error::invalid("lambda_l2 must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }
}

/// Apply the restorer. The signature takes no key or nonce by design.
pub fn restore(z: &Tensor, params: &AdversaryParams) -> Result<Tensor> {
    check_image(z).map_err(|e| Error::invalid(format!("malformed protected image: {e}")))?;
    let mut g = Graph::new();
    let zid = g.input(z.clone());
    let out = params.fwd(&mut g, zid, false);
    Ok(g.value(out).clone())
}

/// Restoration loss: `|x - xt|_1 + lambda_l2 * |x - xt|_2^2`.
pub fn rev_loss(x: &Tensor, xt: &Tensor, lambda_l2: f64) -> Result<f64> {
    if !x.same_shape(xt) {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            x.shape, xt.shape
        )));
    }
    if lambda_l2 < 0.0 {
        return Err(Error::invalid("lambda_l2 must be non-negative"));
    }
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (a, b) in x.data.iter().zip(&xt.data) {
        let d = a - b;
        l1 += d.abs();
        l2 += d * d;
    }
    Ok(l1 + lambda_l2 * l2)
}

/// In-graph restoration loss between two image nodes.
pub fn rev_loss_nodes(g: &mut Graph, x: NodeId, xt: NodeId, lambda_l2: f64) -> NodeId {
    let d = g.sub(x, xt);
    let a = g.abs(d);
    let l1 = g.sum_all(a);
    let sq = g.mul(d, d);
    let l2 = g.sum_all(sq);
    let l2w = g.scale(l2, lambda_l2);
    g.add(l1, l2w)
}

/// Train a restorer on `(protected, clean)` pairs under the configured
/// schedule. Deterministic given the seed.
pub fn build_paired_attacker(
    pairs: &[(Tensor, Tensor)],
    config: &AttackConfig,
) -> Result<AdversaryParams> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("attacker training needs at least one pair"));
    }
    let shape = &pairs[0].0.shape;
    for (z, x) in pairs {
        if &z.shape != shape || &x.shape != shape {
            return Err(Error::invalid("attacker training pairs must share one shape"));
        }
    }

    let mut rng = seeded_rng(crate::nn::derive_seed(config.seed, "paired-attacker"));
    let mut params = AdversaryParams::new(&mut rng, config.base_channels);
    let mut adam = AdamState::for_net(&params);

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.lr_at_epoch(epoch);
        for chunk in order.chunks(config.batch_size) {
            let grads = attacker_batch_grads(&params, pairs, chunk, config.lambda_l2).1;
            adam.apply(&mut params, &grads, lr);
        }
    }
    Ok(params)
}

/// Mean restoration loss of a restorer over pairs, without updating it.
pub fn attacker_loss(
    params: &AdversaryParams,
    pairs: &[(Tensor, Tensor)],
    lambda_l2: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("need at least one pair"));
    }
    let mut total = 0.0;
    for (z, x) in pairs {
        let xt = restore(z, params)?;
        total += rev_loss(x, &xt, lambda_l2)?;
    }
    Ok(total / pairs.len() as f64)
}

fn attacker_batch_grads(
    params: &AdversaryParams,
    pairs: &[(Tensor, Tensor)],
    idx: &[usize],
    lambda_l2: f64,
) -> (f64, Grads) {
    let mut total_loss = 0.0;
    let mut acc: Option<Grads> = None;
    for &i in idx {
        let (z, x) = &pairs[i];
        let mut g = Graph::new();
        let zid = g.input(z.clone());
        let xid = g.input(x.clone());
        let xt = params.fwd(&mut g, zid, true);
        let loss = rev_loss_nodes(&mut g, xid, xt, lambda_l2);
        total_loss += g.scalar(loss);
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
    let mut grads = acc.expect("non-empty batch");
    let scale = 1.0 / idx.len() as f64;
    for t in &mut grads.by_param {
        for d in &mut t.data {
            *d *= scale;
        }
    }
    (total_loss / idx.len() as f64, grads)
}

/// Normalized 1-d Gaussian kernel with radius `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with kernel renormalization at the borders.
pub fn gaussian_blur(z: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::invalid("blur strength must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(z.clone());
    }
    let (c, h, w) = z.chw()?;
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;

    let mut horiz = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                let mut acc = 0.0;
                let mut weight = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let src = wi as isize + j as isize - radius;
                    if src < 0 || src >= w as isize {
                        continue;
                    }
                    acc += kv * z.data[(ci * h + hi) * w + src as usize];
                    weight += kv;
                }
                horiz.data[(ci * h + hi) * w + wi] = acc / weight;
            }
        }
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                let mut acc = 0.0;
                let mut weight = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let src = hi as isize + j as isize - radius;
                    if src < 0 || src >= h as isize {
                        continue;
                    }
                    acc += kv * horiz.data[(ci * h + src as usize) * w + wi];
                    weight += kv;
                }
                out.data[(ci * h + hi) * w + wi] = acc / weight;
            }
        }
    }
    Ok(out)
}

/// A configured purifier. The noise family carries the denoiser that was
/// trained on clean images only, plus the seed for its noise draw.
#[derive(Debug, Clone)]
pub struct Purifier {
    pub family: PurifierFamily,
    pub denoiser: Option<AdversaryParams>,
    pub noise_seed: u64,
}

impl Purifier {
    pub fn blur() -> Purifier {
        Purifier {
            family: PurifierFamily::BlurPurifier,
            denoiser: None,
            noise_seed: 0,
        }
    }

    pub fn noise(denoiser: AdversaryParams, noise_seed: u64) -> Purifier {
        Purifier {
            family: PurifierFamily::NoisePurifier,
            denoiser: Some(denoiser),
            noise_seed,
        }
    }

    /// Apply the purifier at the given strength (blur sigma, or noise
    /// standard deviation). Strength zero is the identity for both families.
    pub fn purify(&self, z: &Tensor, strength: f64) -> Result<Tensor> {
        if strength < 0.0 {
            return Err(Error::invalid("purifier strength must be non-negative"));
        }
        if strength == 0.0 {
            return Ok(z.clone());
        }
        match self.family {
            PurifierFamily::BlurPurifier => gaussian_blur(z, strength),
            PurifierFamily::NoisePurifier => {
                let denoiser = self.denoiser.as_ref().ok_or_else(|| {
                    Error::invalid("noise purifier requires a trained denoiser")
                })?;
                let noisy = add_gaussian_noise(z, strength, self.noise_seed);
                restore(&noisy, denoiser)
            }
        }
    }
}

/// Add clipped Gaussian pixel noise, deterministic per seed.
pub fn add_gaussian_noise(z: &Tensor, sigma: f64, seed: u64) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    let data = z
        .data
        .iter()
        .map(|v| (v + normal.sample(&mut rng)).clamp(-1.0, 1.0))
        .collect();
    Tensor {
        shape: z.shape.clone(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    fn test_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let data = (0..3 * h * w)
            .map(|_| crate::nn::layers::uniform(&mut rng, -0.8, 0.8))
            .collect();
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }

    #[test]
    fn identity_initialized_restorer_returns_input() {
        let mut rng = seeded_rng(30);
        let params = AdversaryParams::new(&mut rng, 4);
        let z = test_image(8, 8, 31);
        let out = restore(&z, &params).unwrap();
        assert_eq!(out.data, z.data);
    }

    #[test]
    fn rev_loss_cases() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![0.0; 4]).unwrap();
        let ones = Tensor::from_vec(&[1, 2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(rev_loss(&x, &x, 0.5).unwrap(), 0.0);
        assert_eq!(rev_loss(&x, &ones, 0.5).unwrap(), 6.0);
        let bad = Tensor::from_vec(&[1, 1, 4], vec![0.0; 4]).unwrap();
        assert!(rev_loss(&x, &bad, 0.5).is_err());
        assert!(rev_loss(&x, &ones, -0.1).is_err());
    }

    #[test]
    fn rev_loss_matches_recomputation() {
        let a = test_image(6, 6, 32);
        let b = test_image(6, 6, 33);
        let lambda = 0.7;
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for i in 0..a.numel() {
            let d = a.data[i] - b.data[i];
            l1 += d.abs();
            l2 += d * d;
        }
        assert!((rev_loss(&a, &b, lambda).unwrap() - (l1 + lambda * l2)).abs() < 1e-12);
    }

    #[test]
    fn rev_loss_zero_iff_equal() {
        let a = test_image(4, 4, 34);
        let mut b = a.clone();
        assert_eq!(rev_loss(&a, &b, 1.0).unwrap(), 0.0);
        b.data[7] += 1e-9;
        assert!(rev_loss(&a, &b, 1.0).unwrap() > 0.0);
    }

    fn quick_attack_config(epochs: usize, seed: u64) -> AttackConfig {
        AttackConfig {
            batch_size: 8,
            learning_rate: 2e-3,
            decay_factor: 0.95,
            decay_interval: 10,
            epochs,
            base_channels: 4,
            lambda_l2: 0.5,
            seed,
        }
    }

    #[test]
    fn attacker_on_unprotected_pairs_stays_near_identity() {
        let pairs: Vec<(Tensor, Tensor)> = (0..12)
            .map(|i| {
                let x = test_image(8, 8, 40 + i);
                (x.clone(), x)
            })
            .collect();
        let params = build_paired_attacker(&pairs, &quick_attack_config(5, 1)).unwrap();
        let loss = attacker_loss(&params, &pairs, 0.5).unwrap();
        // Identity start is already optimal; training must not leave it by much.
        assert!(loss < 1.0, "loss = {loss}");
    }

    #[test]
    fn attacker_learns_to_subtract_a_fixed_mask() {
        // z = x + c for a fixed offset c; the optimum subtracts c.
        let offset = 0.12;
        let make = |seed| {
            let x = test_image(8, 8, seed);
            let z = Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|v| (v + offset).clamp(-1.0, 1.0)).collect(),
            };
            (z, x)
        };
        let train: Vec<(Tensor, Tensor)> = (0..16).map(|i| make(60 + i)).collect();
        let held: Vec<(Tensor, Tensor)> = (0..4).map(|i| make(90 + i)).collect();
        let params = build_paired_attacker(&train, &quick_attack_config(80, 2)).unwrap();
        let loss = attacker_loss(&params, &held, 0.5).unwrap();
        // Analytic subtraction achieves zero; the trained net should get
        // well below the do-nothing loss of 192 * 0.12 = 23.
        let do_nothing: f64 = held
            .iter()
            .map(|(z, x)| rev_loss(x, z, 0.5).unwrap())
            .sum::<f64>()
            / held.len() as f64;
        assert!(
            loss < 0.25 * do_nothing,
            "held-out loss {loss} vs do-nothing {do_nothing}"
        );
    }

    #[test]
    fn attacker_training_is_deterministic() {
        let pairs: Vec<(Tensor, Tensor)> = (0..6)
            .map(|i| (test_image(8, 8, 70 + i), test_image(8, 8, 80 + i)))
            .collect();
        let a = build_paired_attacker(&pairs, &quick_attack_config(3, 3)).unwrap();
        let b = build_paired_attacker(&pairs, &quick_attack_config(3, 3)).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn attacker_loss_is_non_increasing_over_epochs() {
        let offset = 0.1;
        let pairs: Vec<(Tensor, Tensor)> = (0..12)
            .map(|i| {
                let x = test_image(8, 8, 100 + i);
                let z = Tensor {
                    shape: x.shape.clone(),
                    data: x.data.iter().map(|v| (v + offset).clamp(-1.0, 1.0)).collect(),
                };
                (z, x)
            })
            .collect();
        let mut losses = Vec::new();
        for epochs in [1usize, 10, 30, 60] {
            let params = build_paired_attacker(&pairs, &quick_attack_config(epochs, 4)).unwrap();
            losses.push(attacker_loss(&params, &pairs, 0.5).unwrap());
        }
        for w in losses.windows(2) {
            assert!(
                w[1] <= w[0] * 1.05,
                "training loss trend not non-increasing: {losses:?}"
            );
        }
    }

    #[test]
    fn empty_pairs_rejected() {
        assert!(build_paired_attacker(&[], &quick_attack_config(1, 0)).is_err());
    }

    #[test]
    fn blur_impulse_matches_direct_convolution() {
        let h = 11;
        let mut z = Tensor::zeros(&[3, h, h]);
        z.data[(0 * h + 5) * h + 5] = 1.0;
        let sigma = 1.0;
        let blurred = gaussian_blur(&z, sigma).unwrap();

        // Direct 2-d convolution oracle on the interior.
        let k = gaussian_kernel(sigma);
        let radius = (k.len() / 2) as isize;
        for dh in -2..=2isize {
            for dw in -2..=2isize {
                let hh = (5 + dh) as usize;
                let ww = (5 + dw) as usize;
                let expected = k[(dh + radius) as usize] * k[(dw + radius) as usize];
                let got = blurred.data[(0 * h + hh) * h + ww];
                assert!(
                    (got - expected).abs() < 1e-12,
                    "at ({dh},{dw}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn purifier_strength_zero_is_identity() {
        let z = test_image(8, 8, 110);
        let blur = Purifier::blur();
        assert_eq!(blur.purify(&z, 0.0).unwrap().data, z.data);
        assert!(blur.purify(&z, -1.0).is_err());
        let mut rng = seeded_rng(111);
        let noise = Purifier::noise(AdversaryParams::new(&mut rng, 4), 7);
        assert_eq!(noise.purify(&z, 0.0).unwrap().data, z.data);
    }
}
