//! The condition encoder and the key-conditioned mask generator.
//!
//! A key–nonce pair is mapped to a condition embedding; the embedding drives
//! channel-wise affine modulation of every residual block in an
//! encoder/residual/decoder image network whose saturating output head emits
//! the protection mask. The protected image is `clamp(x + alpha * mask)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keymat::{bits_to_signal, Nonce, SecretKey};
use crate::nn::{check_image, Conv2d, Dense, FilmHead, Graph, NodeId, ParamVisit, Tensor};

/// A feature map is a `[C, H, W]` tensor.
pub type FeatureMap = Tensor;

/// Latent embedding of a key–nonce pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    pub e: Vec<f64>,
}

/// Channel-wise scale and shift produced by a modulation head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Protected image plus provenance metadata.
#[derive(Debug, Clone)]
pub struct ProtectedImage {
    pub z: Tensor,
    pub alpha: f64,
    pub key_fingerprint: String,
    pub nonce_id: String,
}

/// Condition encoder architecture.
///
/// The key passes through a frozen sinusoidal mixing layer before the
/// trainable MLP, so that any single-bit key change decorrelates the
/// features reaching the network. The nonce enters as a plain ±1 signal so
/// that the generator can embed it smoothly enough for the decoder to read
/// back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondArch {
    pub key_bits: usize,
    pub nonce_bits: usize,
    pub mix_dim: usize,
    pub mix_sigma: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// When false the embedding is a constant zero vector regardless of the
    /// key and nonce (the "no key conditioning" ablation).
    pub enabled: bool,
}

impl Default for CondArch {
    fn default() -> Self {
        CondArch {
            key_bits: crate::keymat::DEFAULT_KEY_BITS,
            nonce_bits: crate::keymat::DEFAULT_NONCE_BITS,
            mix_dim: 96,
            mix_sigma: 1.6,
            hidden_dim: 128,
            embed_dim: 128,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondEncoder {
    pub arch: CondArch,
    /// Frozen mixing projection, `[mix_dim, key_bits]`.
    mix_weight: Tensor,
    /// Frozen mixing phases, `[mix_dim]`.
    mix_phase: Tensor,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl CondEncoder {
    pub fn new(arch: CondArch, rng: &mut ChaCha8Rng) -> CondEncoder {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, arch.mix_sigma).unwrap();
        let mix_weight = Tensor {
            shape: vec![arch.mix_dim, arch.key_bits],
            data: (0..arch.mix_dim * arch.key_bits)
                .map(|_| normal.sample(rng))
                .collect(),
        };
        let mix_phase = Tensor {
            shape: vec![arch.mix_dim],
            data: (0..arch.mix_dim)
                .map(|_| crate::nn::layers::uniform(rng, 0.0, std::f64::consts::TAU))
                .collect(),
        };
        let in_dim = arch.mix_dim + arch.nonce_bits;
        CondEncoder {
            fc1: Dense::new(rng, in_dim, arch.hidden_dim),
            fc2: Dense::new(rng, arch.hidden_dim, arch.embed_dim),
            arch,
            mix_weight,
            mix_phase,
        }
    }

    /// Frozen feature expansion: sinusoidal key mixing concatenated with the
    /// nonce signal. Not differentiated; bits carry no gradient.
    pub fn features(&self, key: &SecretKey, nonce: &Nonce) -> Result<Vec<f64>> {
        if key.len() != self.arch.key_bits {
            return Err(Error::invalid(format!(
                "key has {} bits, encoder expects {}",
                key.len(),
                self.arch.key_bits
            )));
        }
        if nonce.len() != self.arch.nonce_bits {
            return Err(Error::invalid(format!(
                "nonce has {} bits, encoder expects {}",
                nonce.len(),
                self.arch.nonce_bits
            )));
        }
        let ks = bits_to_signal(key.bits()).values;
        let ns = bits_to_signal(nonce.bits()).values;
        let mut feats = Vec::with_capacity(self.arch.mix_dim + ns.len());
        for j in 0..self.arch.mix_dim {
            let row = &self.mix_weight.data[j * self.arch.key_bits..(j + 1) * self.arch.key_bits];
            let acc: f64 = row.iter().zip(&ks).map(|(w, s)| w * s).sum();
            feats.push((acc + self.mix_phase.data[j]).sin());
        }
        feats.extend_from_slice(&ns);
        Ok(feats)
    }

    /// Out-of-graph encoding.
    pub fn encode(&self, key: &SecretKey, nonce: &Nonce) -> Result<ConditionEmbedding> {
        if !self.arch.enabled {
            return Ok(ConditionEmbedding {
                e: vec![0.0; self.arch.embed_dim],
            });
        }
        let feats = self.features(key, nonce)?;
        let h: Vec<f64> = self
            .fc1
            .apply(&feats)
            .into_iter()
            .map(|v| if v > 0.0 { v } else { 0.2 * v })
            .collect();
        Ok(ConditionEmbedding { e: self.fc2.apply(&h) })
    }

    /// In-graph encoding used during training.
    pub fn fwd(&self, g: &mut Graph, key: &SecretKey, nonce: &Nonce, trainable: bool) -> Result<NodeId> {
        if !self.arch.enabled {
            return Ok(g.input(Tensor {
                shape: vec![self.arch.embed_dim],
                data: vec![0.0; self.arch.embed_dim],
            }));
        }
        let feats = self.features(key, nonce)?;
        let n = feats.len();
        let fid = g.input(Tensor::from_vec(&[n], feats).unwrap());
        let h = self.fc1.fwd(g, fid, trainable);
        let h = g.leaky_relu(h, 0.2);
        Ok(self.fc2.fwd(g, h, trainable))
    }
}

impl ParamVisit for CondEncoder {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Residual block with condition-driven affine modulation after the first
/// convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub film: FilmHead,
}

impl ResBlock {
    fn new(rng: &mut ChaCha8Rng, channels: usize, embed_dim: usize) -> ResBlock {
        ResBlock {
            conv1: Conv2d::new(rng, channels, channels, 3, 1),
            conv2: Conv2d::new(rng, channels, channels, 3, 1),
            film: FilmHead::new(embed_dim, channels),
        }
    }

    fn fwd(&self, g: &mut Graph, x: NodeId, e: NodeId, trainable: bool) -> NodeId {
        let t = self.conv1.fwd(g, x, trainable);
        let t = self.film.modulate(g, t, e, trainable);
        let t = g.leaky_relu(t, 0.2);
        let t = self.conv2.fwd(g, t, trainable);
        g.add(x, t)
    }
}

impl ParamVisit for ResBlock {
    // Visit order must match the order `fwd` binds parameters into a graph.
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.conv1.visit(f);
        self.film.visit(f);
        self.conv2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.conv1.visit_mut(f);
        self.film.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

/// Conditioned encoder/residual/decoder image network. Shared backbone of
/// the mask generator and the recovery network: takes an image and a
/// condition embedding, emits a same-shaped correction in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondImageNet {
    pub enc1: Conv2d,
    pub enc2: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub dec1: Conv2d,
    pub out: Conv2d,
}

impl CondImageNet {
    pub fn new(rng: &mut ChaCha8Rng, base_channels: usize, res_blocks: usize, embed_dim: usize) -> Self {
        let c = base_channels;
        CondImageNet {
            enc1: Conv2d::new(rng, 3, c, 3, 1),
            enc2: Conv2d::new(rng, c, 2 * c, 3, 2),
            blocks: (0..res_blocks)
                .map(|_| ResBlock::new(rng, 2 * c, embed_dim))
                .collect(),
            dec1: Conv2d::new(rng, 2 * c, c, 3, 1),
            // Zero output head: the correction starts at exactly zero.
            out: Conv2d::zeroed(c, 3, 3, 1),
        }
    }

    pub fn fwd(&self, g: &mut Graph, x: NodeId, e: NodeId, trainable: bool) -> NodeId {
        let h = self.enc1.fwd(g, x, trainable);
        let h = g.leaky_relu(h, 0.2);
        let mut b = self.enc2.fwd(g, h, trainable);
        b = g.leaky_relu(b, 0.2);
        for block in &self.blocks {
            b = block.fwd(g, b, e, trainable);
        }
        let u = g.upsample2(b);
        let d = self.dec1.fwd(g, u, trainable);
        let d = g.leaky_relu(d, 0.2);
        let o = self.out.fwd(g, d, trainable);
        g.tanh(o)
    }
}

impl ParamVisit for CondImageNet {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.enc1.visit(f);
        self.enc2.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.dec1.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.enc1.visit_mut(f);
        self.enc2.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.dec1.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Architecture of the full protector generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenArch {
    pub cond: CondArch,
    pub base_channels: usize,
    pub res_blocks: usize,
}

impl Default for GenArch {
    fn default() -> Self {
        GenArch {
            cond: CondArch::default(),
            base_channels: 16,
            res_blocks: 2,
        }
    }
}

/// Condition encoder plus mask generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub arch: GenArch,
    pub encoder: CondEncoder,
    pub net: CondImageNet,
}

impl GeneratorParams {
    pub fn new(arch: GenArch, rng: &mut ChaCha8Rng) -> GeneratorParams {
        let encoder = CondEncoder::new(arch.cond.clone(), rng);
        let net = CondImageNet::new(rng, arch.base_channels, arch.res_blocks, arch.cond.embed_dim);
        GeneratorParams { arch, encoder, net }
    }
}

impl ParamVisit for GeneratorParams {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.encoder.visit(f);
        self.net.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.encoder.visit_mut(f);
        self.net.visit_mut(f);
    }
}

/// Encode a key–nonce pair into a condition embedding.
pub fn encode_condition(
    key: &SecretKey,
    nonce: &Nonce,
    params: &GeneratorParams,
) -> Result<ConditionEmbedding> {
    params.encoder.encode(key, nonce)
}

/// Channel-wise affine modulation: `out[c,h,w] = gamma[c]*f[c,h,w] + beta[c]`
/// with `(gamma, beta)` produced from the embedding by the given head.
pub fn kmb_modulate(f: &FeatureMap, e: &ConditionEmbedding, head: &FilmHead) -> Result<FeatureMap> {
    let (c, h, w) = f.chw()?;
    if head.channels() != c {
        return Err(Error::invalid(format!(
            "modulation head emits {} channels, feature map has {}",
            head.channels(),
            c
        )));
    }
    if head.gamma.weight.shape[1] != e.e.len() {
        return Err(Error::invalid(format!(
            "embedding has dim {}, head expects {}",
            e.e.len(),
            head.gamma.weight.shape[1]
        )));
    }
    let ModulationParams { gamma, beta } = modulation_params(e, head);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let base = ci * h * w;
        for i in 0..h * w {
            out.data[base + i] = gamma[ci] * f.data[base + i] + beta[ci];
        }
    }
    Ok(out)
}

/// The `(gamma, beta)` pair a head produces for an embedding.
pub fn modulation_params(e: &ConditionEmbedding, head: &FilmHead) -> ModulationParams {
    let (gamma, beta) = head.compute(&e.e);
    ModulationParams { gamma, beta }
}

/// Generate the protection mask for an image under a key–nonce pair.
pub fn generate_mask(
    x: &Tensor,
    key: &SecretKey,
    nonce: &Nonce,
    params: &GeneratorParams,
) -> Result<Tensor> {
    check_image(x).map_err(|e| Error::invalid(format!("malformed input image: {e}")))?;
    let (_, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("image sides must be even"));
    }
    let mut g = Graph::new();
    let xid = g.input(x.clone());
    let eid = params.encoder.fwd(&mut g, key, nonce, false)?;
    let delta = params.net.fwd(&mut g, xid, eid, false);
    Ok(g.value(delta).clone())
}

/// Protect an image: `z = clamp(x + alpha * mask, -1, 1)`.
pub fn protect(
    x: &Tensor,
    key: &SecretKey,
    nonce: &Nonce,
    alpha: f64,
    params: &GeneratorParams,
) -> Result<ProtectedImage> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    let delta = generate_mask(x, key, nonce, params)?;
    Ok(apply_mask(x, &delta, alpha, key, nonce))
}

/// Combine a precomputed mask with an image at a given strength.
pub fn apply_mask(
    x: &Tensor,
    delta: &Tensor,
    alpha: f64,
    key: &SecretKey,
    nonce: &Nonce,
) -> ProtectedImage {
    let data = x
        .data
        .iter()
        .zip(&delta.data)
        .map(|(xv, dv)| (xv + alpha * dv).clamp(-1.0, 1.0))
        .collect();
    ProtectedImage {
        z: Tensor {
            shape: x.shape.clone(),
            data,
        },
        alpha,
        key_fingerprint: key.fingerprint(),
        nonce_id: nonce.fingerprint(),
    }
}

/// In-graph protection used by the training loop: returns `(mask, z)`.
pub fn protect_nodes(
    g: &mut Graph,
    params: &GeneratorParams,
    x: NodeId,
    e: NodeId,
    alpha: f64,
    trainable: bool,
) -> (NodeId, NodeId) {
    let delta = params.net.fwd(g, x, e, trainable);
    let scaled = g.scale(delta, alpha);
    let sum = g.add(x, scaled);
    let z = g.clamp(sum, -1.0, 1.0);
    (delta, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keymat::{generate_key, generate_nonce, perturb_key};
    use crate::nn::seeded_rng;

    fn tiny_arch() -> GenArch {
        GenArch {
            cond: CondArch {
                key_bits: 16,
                nonce_bits: 8,
                mix_dim: 12,
                mix_sigma: 1.6,
                hidden_dim: 10,
                embed_dim: 8,
                enabled: true,
            },
            base_channels: 4,
            res_blocks: 1,
        }
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let data = (0..3 * h * w)
            .map(|_| crate::nn::layers::uniform(&mut rng, -0.8, 0.8))
            .collect();
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }

    #[test]
    fn encode_condition_is_deterministic() {
        let mut rng = seeded_rng(5);
        let params = GeneratorParams::new(tiny_arch(), &mut rng);
        let k = generate_key(1, 16).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        let a = encode_condition(&k, &m, &params).unwrap();
        let b = encode_condition(&k, &m, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.e.len(), 8);
        assert!(a.e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_condition_checks_lengths() {
        let mut rng = seeded_rng(5);
        let params = GeneratorParams::new(tiny_arch(), &mut rng);
        let k = generate_key(1, 15).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        assert!(encode_condition(&k, &m, &params).is_err());
    }

    #[test]
    fn zeroed_final_encoder_layer_returns_its_bias() {
        let mut rng = seeded_rng(5);
        let mut params = GeneratorParams::new(tiny_arch(), &mut rng);
        params.encoder.fc2 = Dense::zeroed(10, 8);
        params.encoder.fc2.bias.data = (0..8).map(|i| i as f64 / 10.0).collect();
        let k = generate_key(1, 16).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        let e = encode_condition(&k, &m, &params).unwrap();
        assert_eq!(e.e, params.encoder.fc2.bias.data);
    }

    #[test]
    fn single_bit_key_flip_decorrelates_features() {
        let mut rng = seeded_rng(6);
        let params = GeneratorParams::new(tiny_arch(), &mut rng);
        let k = generate_key(1, 16).unwrap();
        let k2 = perturb_key(&k, 1, 3).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        let fa = params.encoder.features(&k, &m).unwrap();
        let fb = params.encoder.features(&k2, &m).unwrap();
        let mix = params.arch.cond.mix_dim;
        let corr: f64 = fa[..mix]
            .iter()
            .zip(&fb[..mix])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / (fa[..mix].iter().map(|a| a * a).sum::<f64>().sqrt()
                * fb[..mix].iter().map(|b| b * b).sum::<f64>().sqrt());
        assert!(corr.abs() < 0.55, "mixing features too correlated: {corr}");
        // The nonce tail is unchanged.
        assert_eq!(&fa[mix..], &fb[mix..]);
    }

    #[test]
    fn kmb_identity_and_forced_values() {
        let f = test_image(6, 6, 9);
        let e = ConditionEmbedding { e: vec![0.3; 8] };
        // Zero head: gamma = 1, beta = 0; exact identity.
        let head = FilmHead::new(8, 3);
        let out = kmb_modulate(&f, &e, &head).unwrap();
        assert_eq!(out.data, f.data);

        // gamma = 0, beta = 0 -> all zeros.
        let mut head0 = FilmHead::new(8, 3);
        head0.gamma.bias.data = vec![-1.0; 3];
        let out0 = kmb_modulate(&f, &e, &head0).unwrap();
        assert!(out0.data.iter().all(|&v| v == 0.0));

        // gamma = 2, beta = 1 on all-ones input -> all 3.
        let ones = Tensor::from_vec(&[3, 2, 2], vec![1.0; 12]).unwrap();
        let mut head2 = FilmHead::new(8, 3);
        head2.gamma.bias.data = vec![1.0; 3];
        head2.beta.bias.data = vec![1.0; 3];
        let out2 = kmb_modulate(&ones, &e, &head2).unwrap();
        assert!(out2.data.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn kmb_rejects_shape_mismatch() {
        let f = test_image(4, 4, 1);
        let e = ConditionEmbedding { e: vec![0.0; 8] };
        let head = FilmHead::new(8, 5);
        assert!(kmb_modulate(&f, &e, &head).is_err());
        let head_wrong_e = FilmHead::new(9, 3);
        assert!(kmb_modulate(&f, &e, &head_wrong_e).is_err());
    }

    #[test]
    fn mask_is_deterministic_and_bounded() {
        let mut rng = seeded_rng(7);
        let params = GeneratorParams::new(tiny_arch(), &mut rng);
        let x = test_image(8, 8, 3);
        let k = generate_key(1, 16).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        let d1 = generate_mask(&x, &k, &m, &params).unwrap();
        let d2 = generate_mask(&x, &k, &m, &params).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.shape, x.shape);
        assert!(d1.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zeroed_output_head_gives_zero_mask() {
        let mut rng = seeded_rng(7);
        let params = GeneratorParams::new(tiny_arch(), &mut rng);
        // Freshly constructed nets have a zeroed output head already.
        let x = test_image(8, 8, 3);
        let k = generate_key(1, 16).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        let d = generate_mask(&x, &k, &m, &params).unwrap();
        assert!(d.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn protect_alpha_zero_is_exact_identity() {
        let mut rng = seeded_rng(8);
        let mut params = GeneratorParams::new(tiny_arch(), &mut rng);
        randomize_output_head(&mut params, 40);
        let x = test_image(8, 8, 4);
        let k = generate_key(1, 16).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        let p = protect(&x, &k, &m, 0.0, &params).unwrap();
        assert_eq!(p.z.data, x.data);
        assert!(protect(&x, &k, &m, -0.1, &params).is_err());
    }

    fn randomize_output_head(params: &mut GeneratorParams, seed: u64) {
        let mut rng = seeded_rng(seed);
        params.net.out = Conv2d::new(&mut rng, params.arch.base_channels, 3, 3, 1);
    }

    #[test]
    fn perturbation_is_linear_in_alpha_before_clamping() {
        let mut rng = seeded_rng(9);
        let mut params = GeneratorParams::new(tiny_arch(), &mut rng);
        randomize_output_head(&mut params, 41);
        let x = test_image(8, 8, 5);
        let k = generate_key(1, 16).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        let a = 0.02;
        let p1 = protect(&x, &k, &m, a, &params).unwrap();
        let p2 = protect(&x, &k, &m, 2.0 * a, &params).unwrap();
        for i in 0..x.numel() {
            let d1 = p1.z.data[i] - x.data[i];
            let d2 = p2.z.data[i] - x.data[i];
            // x in [-0.8, 0.8] and alpha small: no clamping anywhere.
            assert!((d2 - 2.0 * d1).abs() < 1e-12, "index {i}: {d2} vs {}", 2.0 * d1);
        }
    }

    #[test]
    fn perturbation_respects_alpha_bound() {
        let mut rng = seeded_rng(10);
        let mut params = GeneratorParams::new(tiny_arch(), &mut rng);
        randomize_output_head(&mut params, 42);
        let x = test_image(10, 10, 6);
        let k = generate_key(1, 16).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        let alpha = 0.05;
        let p = protect(&x, &k, &m, alpha, &params).unwrap();
        for i in 0..x.numel() {
            assert!((p.z.data[i] - x.data[i]).abs() <= alpha + 1e-12);
        }
        assert_eq!(p.alpha, alpha);
        assert_eq!(p.key_fingerprint, k.fingerprint());
    }

    #[test]
    fn shape_preserved_across_sizes() {
        let mut rng = seeded_rng(11);
        let params = GeneratorParams::new(tiny_arch(), &mut rng);
        let k = generate_key(1, 16).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        for (h, w) in [(8, 8), (12, 16), (16, 12)] {
            let x = test_image(h, w, 100 + h as u64);
            let d = generate_mask(&x, &k, &m, &params).unwrap();
            assert_eq!(d.shape, vec![3, h, w]);
        }
    }

    #[test]
    fn mask_rejects_malformed_input() {
        let mut rng = seeded_rng(12);
        let params = GeneratorParams::new(tiny_arch(), &mut rng);
        let k = generate_key(1, 16).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        let mut x = test_image(8, 8, 7);
        x.data[0] = 2.0;
        assert!(generate_mask(&x, &k, &m, &params).is_err());
    }

    #[test]
    fn protect_gradient_matches_finite_differences() {
        // d/dparam of sum(z^2) on a tiny network, central differences.
        let mut rng = seeded_rng(13);
        let mut params = GeneratorParams::new(tiny_arch(), &mut rng);
        randomize_output_head(&mut params, 43);
        let x = test_image(6, 6, 8);
        let k = generate_key(1, 16).unwrap();
        let m = generate_nonce(2, 8).unwrap();
        let alpha = 0.05;

        let loss_of = |p: &GeneratorParams| -> f64 {
            let mut g = Graph::new();
            let xid = g.input(x.clone());
            let eid = p.encoder.fwd(&mut g, &k, &m, false).unwrap();
            let (_, z) = protect_nodes(&mut g, p, xid, eid, alpha, false);
            let sq = g.mul(z, z);
            let s = g.sum_all(sq);
            g.scalar(s)
        };

        let mut g = Graph::new();
        let xid = g.input(x.clone());
        let eid = params.encoder.fwd(&mut g, &k, &m, true).unwrap();
        let (_, z) = protect_nodes(&mut g, &params, xid, eid, alpha, true);
        let sq = g.mul(z, z);
        let s = g.sum_all(sq);
        let grads = g.backward(s);

        // Spot check a subset of parameters in every tensor.
        let eps = 1e-5;
        let mut idx = 0;
        let mut failures = Vec::new();
        let n_tensors = {
            let mut n = 0;
            params.visit(&mut |_| n += 1);
            n
        };
        for ti in 0..n_tensors {
            let numel = {
                let mut sizes = Vec::new();
                params.visit(&mut |t| sizes.push(t.numel()));
                sizes[ti]
            };
            for pi in (0..numel).step_by(7.max(numel / 5)) {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let mut seen = 0;
                plus.visit_mut(&mut |t| {
                    if seen == ti {
                        t.data[pi] += eps;
                    }
                    seen += 1;
                });
                seen = 0;
                minus.visit_mut(&mut |t| {
                    if seen == ti {
                        t.data[pi] -= eps;
                    }
                    seen += 1;
                });
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let analytic = grads.by_param[ti].data[pi];
                let denom = (numeric.abs() + analytic.abs()).max(1e-4);
                if ((numeric - analytic) / denom).abs() >= 1e-4 {
                    failures.push((ti, pi, numeric, analytic));
                }
            }
            idx += 1;
        }
        let _ = idx;
        assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
    }
}
