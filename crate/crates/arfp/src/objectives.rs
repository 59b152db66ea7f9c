//! Loss terms, the combined protector objective, and the alternating
//! minimax training schedule.
//!
//! Each cycle first updates the surrogate restorer to minimize the
//! restoration loss with the protector frozen, then updates the protector
//! modules (condition encoder, generator, recovery network, nonce decoder)
//! to minimize the combined objective with the restorer frozen. The
//! restoration term enters the protector objective negatively: solutions
//! that are easy to restore are penalized.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{rev_loss, rev_loss_nodes, AdversaryParams};
use crate::condnet::{protect_nodes, GenArch, GeneratorParams};
use crate::error::{Error, Result};
use crate::frmetrics::{embed, EmbedderParams};
use crate::keymat::{bits_to_signal, generate_key, generate_nonce, Nonce, SecretKey};
use crate::nn::{
    derive_seed, seeded_rng, AdamState, Graph, Grads, NodeId, ParamVisit, Tensor,
};
use crate::recovery::{nonce_loss, recover_nodes, RecoveryParams};

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_id: f64,
    pub lambda_mse: f64,
    pub lambda_rev: f64,
    pub lambda_l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 10.0,
            lambda_id: 5.0,
            lambda_mse: 1.0,
            lambda_rev: 1.0,
            lambda_l2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_id", self.lambda_id),
            ("lambda_mse", self.lambda_mse),
            ("lambda_rev", self.lambda_rev),
            ("lambda_l2", self.lambda_l2),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub id: f64,
    pub mse: f64,
    pub rev: f64,
    pub total: f64,
}

/// Training schedule and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub cycles: usize,
    pub protector_steps_per_cycle: usize,
    pub adversary_steps_per_cycle: usize,
    pub alpha: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Also decode the nonce from the recovered image during training, so
    /// post-recovery integrity checks are meaningful.
    pub nonce_from_recovered: bool,
    /// Optional lower clip for the negative restoration term.
    pub rev_floor: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 16,
            cycles: 30,
            protector_steps_per_cycle: 1,
            adversary_steps_per_cycle: 1,
            alpha: 0.05,
            weights: LossWeights::default(),
            seed: 0,
            nonce_from_recovered: true,
            rev_floor: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.cycles == 0
            || self.protector_steps_per_cycle == 0
            || self.adversary_steps_per_cycle == 0
        {
            return Err(Error::invalid("training counts must be positive"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.alpha < 0.0 {
            return Err(Error::invalid("alpha must be non-negative"));
        }
        self.weights.validate()
    }
}

/// Per-cycle averaged loss history row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    pub cycle: usize,
    pub l_rec: f64,
    pub l_id: f64,
    pub l_mse: f64,
    pub l_rev: f64,
    pub total: f64,
}

/// All trainable state of one protection model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub generator: GeneratorParams,
    pub recovery: RecoveryParams,
    pub adversary: AdversaryParams,
    pub opt_protector: AdamState,
    pub opt_adversary: AdamState,
    pub step: u64,
    pub history: Vec<CycleStats>,
}

/// Mutable view over the protector-side parameter groups, in the canonical
/// order: condition encoder, generator, recovery network, nonce decoder.
pub struct ProtectorMut<'a> {
    pub generator: &'a mut GeneratorParams,
    pub recovery: &'a mut RecoveryParams,
}

impl ParamVisit for ProtectorMut<'_> {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.generator.visit(f);
        self.recovery.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.generator.visit_mut(f);
        self.recovery.visit_mut(f);
    }
}

impl TrainState {
    /// Fresh state with independently seeded components.
    pub fn init(gen_arch: GenArch, adversary_channels: usize, seed: u64) -> TrainState {
        let mut gen_rng = seeded_rng(derive_seed(seed, "protector"));
        let generator = GeneratorParams::new(gen_arch.clone(), &mut gen_rng);
        let recovery = RecoveryParams::new(&gen_arch, &mut gen_rng);
        let mut adv_rng = seeded_rng(derive_seed(seed, "surrogate-adversary"));
        let adversary = AdversaryParams::new(&mut adv_rng, adversary_channels);

        let opt_protector = {
            let mut g = generator.clone();
            let mut r = recovery.clone();
            let view = ProtectorMut {
                generator: &mut g,
                recovery: &mut r,
            };
            AdamState::for_net(&view)
        };
        let opt_adversary = AdamState::for_net(&adversary);
        TrainState {
            generator,
            recovery,
            adversary,
            opt_protector,
            opt_adversary,
            step: 0,
            history: Vec::new(),
        }
    }

    pub fn protector_hash(&self) -> String {
        let mut g = self.generator.clone();
        let mut r = self.recovery.clone();
        let view = ProtectorMut {
            generator: &mut g,
            recovery: &mut r,
        };
        view.content_hash()
    }

    pub fn adversary_hash(&self) -> String {
        self.adversary.content_hash()
    }
}

/// One training batch: images with the key and nonce each will be
/// protected under.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub images: Vec<Tensor>,
    pub keys: Vec<SecretKey>,
    pub nonces: Vec<Nonce>,
}

impl TrainBatch {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::invalid("batch must be non-empty"));
        }
        if self.images.len() != self.keys.len() || self.images.len() != self.nonces.len() {
            return Err(Error::invalid("batch fields must align"));
        }
        Ok(())
    }
}

/// Reconstruction loss: `|x - xhat|_1`.
pub fn rec_loss(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    if !x.same_shape(xhat) {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            x.shape, xhat.shape
        )));
    }
    Ok(x.data.iter().zip(&xhat.data).map(|(a, b)| (a - b).abs()).sum())
}

/// Identity loss: cosine similarity between the embeddings of the clean and
/// protected images. Minimizing it maximizes cosine distance.
pub fn id_loss(x: &Tensor, z: &Tensor, embedder: &EmbedderParams) -> Result<f64> {
    let hx = embed(x, embedder)?;
    let hz = embed(z, embedder)?;
    crate::frmetrics::cosine_sim(&hx, &hz)
}

/// The combined objective: `lambda_rec*rec + lambda_id*id + lambda_mse*mse
/// - lambda_rev*rev`, with the per-term breakdown.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    x: &Tensor,
    z: &Tensor,
    xhat: &Tensor,
    decoded_nonce: &[f64],
    m: &Nonce,
    xt: &Tensor,
    weights: &LossWeights,
    embedder: &EmbedderParams,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let rec = rec_loss(x, xhat)?;
    let id = id_loss(x, z, embedder)?;
    let mse = nonce_loss(decoded_nonce, m)?;
    let rev = rev_loss(x, xt, weights.lambda_l2)?;
    let total = weights.lambda_rec * rec + weights.lambda_id * id + weights.lambda_mse * mse
        - weights.lambda_rev * rev;
    Ok(LossBreakdown {
        rec,
        id,
        mse,
        rev,
        total,
    })
}

fn nonce_loss_nodes(g: &mut Graph, decoded: NodeId, m: &Nonce) -> NodeId {
    let signal = bits_to_signal(m.bits());
    let n = signal.values.len();
    let target = g.input(Tensor::from_vec(&[n], signal.values).unwrap());
    let d = g.sub(decoded, target);
    let sq = g.mul(d, d);
    g.sum_all(sq)
}

/// Nodes of the per-sample protector objective.
struct SampleNodes {
    rec: NodeId,
    id: NodeId,
    mse: NodeId,
    rev: Option<NodeId>,
    total: NodeId,
}

/// Build the full protector objective for one sample. Gradient flows into
/// protector parameters when `trainable` is set; the restorer and embedder
/// stay frozen either way.
#[allow(clippy::too_many_arguments)]
fn protector_sample_graph(
    g: &mut Graph,
    generator: &GeneratorParams,
    recovery: &RecoveryParams,
    adversary: &AdversaryParams,
    embedder: &EmbedderParams,
    x: &Tensor,
    key: &SecretKey,
    nonce: &Nonce,
    config: &TrainConfig,
    trainable: bool,
) -> Result<SampleNodes> {
    let w = &config.weights;
    let xid = g.input(x.clone());
    let e = generator.encoder.fwd(g, key, nonce, trainable)?;
    let (_delta, z) = protect_nodes(g, generator, xid, e, config.alpha, trainable);
    let xhat = recover_nodes(g, recovery, z, e, trainable);

    // Reconstruction.
    let d = g.sub(xid, xhat);
    let a = g.abs(d);
    let rec = g.sum_all(a);

    // Identity: cosine between the frozen embedding of x and the in-graph
    // embedding of z.
    let hx = embed(x, embedder)?;
    let n = hx.h.len();
    let hx_id = g.input(Tensor::from_vec(&[n], hx.h).unwrap());
    let hz_pre = embedder.embed_node(g, z, false);
    let hz = g.l2_normalize(hz_pre);
    let id = g.dot(hz, hx_id);

    // Nonce consistency, from the protected image and optionally also from
    // the recovered image. The decoder binds once so both passes share the
    // same parameter leaves.
    let bound_decoder = recovery.decoder.bind(g, trainable);
    let dec_z = recovery.decoder.fwd_bound(g, z, &bound_decoder);
    let mse_z = nonce_loss_nodes(g, dec_z, nonce);
    let mse = if config.nonce_from_recovered {
        let dec_xhat = recovery.decoder.fwd_bound(g, xhat, &bound_decoder);
        let mse_xhat = nonce_loss_nodes(g, dec_xhat, nonce);
        let sum = g.add(mse_z, mse_xhat);
        g.scale(sum, 0.5)
    } else {
        mse_z
    };

    // Restoration pressure from the frozen surrogate.
    let rev = if w.lambda_rev != 0.0 {
        let xt = adversary.fwd(g, z, false);
        Some(rev_loss_nodes(g, xid, xt, w.lambda_l2))
    } else {
        None
    };

    let rec_w = g.scale(rec, w.lambda_rec);
    let id_w = g.scale(id, w.lambda_id);
    let mse_w = g.scale(mse, w.lambda_mse);
    let mut total = g.add(rec_w, id_w);
    total = g.add(total, mse_w);
    if let Some(rev_node) = rev {
        let term_value = -w.lambda_rev * g.scalar(rev_node);
        let clipped = matches!(config.rev_floor, Some(floor) if term_value < floor);
        if clipped {
            let floor_node = g.input(Tensor::scalar(config.rev_floor.unwrap()));
            total = g.add(total, floor_node);
        } else {
            let rev_w = g.scale(rev_node, -w.lambda_rev);
            total = g.add(total, rev_w);
        }
    }
    Ok(SampleNodes {
        rec,
        id,
        mse,
        rev,
        total,
    })
}

fn accumulate_grads(acc: &mut Option<Grads>, grads: Grads) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (t, s) in a.by_param.iter_mut().zip(&grads.by_param) {
                for (d, v) in t.data.iter_mut().zip(&s.data) {
                    *d += v;
                }
            }
        }
    }
}

fn scale_grads(grads: &mut Grads, scale: f64) {
    for t in &mut grads.by_param {
        for d in &mut t.data {
            *d *= scale;
        }
    }
}

/// Update the surrogate restorer on one batch: it minimizes the restoration
/// loss with every protector parameter frozen.
pub fn adversary_step(
    batch: &TrainBatch,
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<f64> {
    batch.validate()?;
    config.validate()?;
    let mut acc: Option<Grads> = None;
    let mut total = 0.0;
    for i in 0..batch.images.len() {
        let mut g = Graph::new();
        let xid = g.input(batch.images[i].clone());
        let e = state
            .generator
            .encoder
            .fwd(&mut g, &batch.keys[i], &batch.nonces[i], false)?;
        let (_, z) = protect_nodes(&mut g, &state.generator, xid, e, config.alpha, false);
        let xt = state.adversary.fwd(&mut g, z, true);
        let rev = rev_loss_nodes(&mut g, xid, xt, config.weights.lambda_l2);
        total += g.scalar(rev);
        accumulate_grads(&mut acc, g.backward(rev));
    }
    let mut grads = acc.expect("non-empty batch");
    scale_grads(&mut grads, 1.0 / batch.images.len() as f64);
    state
        .opt_adversary
        .apply(&mut state.adversary, &grads, config.learning_rate);
    state.step += 1;
    Ok(total / batch.images.len() as f64)
}

/// Update the protector modules on one batch with the restorer frozen.
/// Returns the batch-averaged loss breakdown.
pub fn protector_step(
    batch: &TrainBatch,
    state: &mut TrainState,
    config: &TrainConfig,
    embedder: &EmbedderParams,
) -> Result<LossBreakdown> {
    batch.validate()?;
    config.validate()?;
    let mut acc: Option<Grads> = None;
    let mut sums = LossBreakdown {
        rec: 0.0,
        id: 0.0,
        mse: 0.0,
        rev: 0.0,
        total: 0.0,
    };
    for i in 0..batch.images.len() {
        let mut g = Graph::new();
        let nodes = protector_sample_graph(
            &mut g,
            &state.generator,
            &state.recovery,
            &state.adversary,
            embedder,
            &batch.images[i],
            &batch.keys[i],
            &batch.nonces[i],
            config,
            true,
        )?;
        sums.rec += g.scalar(nodes.rec);
        sums.id += g.scalar(nodes.id);
        sums.mse += g.scalar(nodes.mse);
        if let Some(rev) = nodes.rev {
            sums.rev += g.scalar(rev);
        }
        sums.total += g.scalar(nodes.total);
        accumulate_grads(&mut acc, g.backward(nodes.total));
    }
    let n = batch.images.len() as f64;
    let mut grads = acc.expect("non-empty batch");
    scale_grads(&mut grads, 1.0 / n);
    let mut view = ProtectorMut {
        generator: &mut state.generator,
        recovery: &mut state.recovery,
    };
    state.opt_protector.apply(&mut view, &grads, config.learning_rate);
    state.step += 1;
    Ok(LossBreakdown {
        rec: sums.rec / n,
        id: sums.id / n,
        mse: sums.mse / n,
        rev: sums.rev / n,
        total: sums.total / n,
    })
}

/// Evaluate the protector objective on a batch without updating anything.
pub fn protector_eval(
    batch: &TrainBatch,
    state: &TrainState,
    config: &TrainConfig,
    embedder: &EmbedderParams,
) -> Result<LossBreakdown> {
    batch.validate()?;
    let mut sums = LossBreakdown {
        rec: 0.0,
        id: 0.0,
        mse: 0.0,
        rev: 0.0,
        total: 0.0,
    };
    for i in 0..batch.images.len() {
        let mut g = Graph::new();
        let nodes = protector_sample_graph(
            &mut g,
            &state.generator,
            &state.recovery,
            &state.adversary,
            embedder,
            &batch.images[i],
            &batch.keys[i],
            &batch.nonces[i],
            config,
            false,
        )?;
        sums.rec += g.scalar(nodes.rec);
        sums.id += g.scalar(nodes.id);
        sums.mse += g.scalar(nodes.mse);
        if let Some(rev) = nodes.rev {
            sums.rev += g.scalar(rev);
        }
        sums.total += g.scalar(nodes.total);
    }
    let n = batch.images.len() as f64;
    Ok(LossBreakdown {
        rec: sums.rec / n,
        id: sums.id / n,
        mse: sums.mse / n,
        rev: sums.rev / n,
        total: sums.total / n,
    })
}

/// Draw keys and nonces for a batch: one fresh key and nonce per sample,
/// from a deterministic stream.
pub fn draw_credentials(
    rng: &mut rand_chacha::ChaCha8Rng,
    n: usize,
    key_bits: usize,
    nonce_bits: usize,
) -> (Vec<SecretKey>, Vec<Nonce>) {
    let keys = (0..n)
        .map(|_| generate_key(rng.gen::<u64>(), key_bits).unwrap())
        .collect();
    let nonces = (0..n)
        .map(|_| generate_nonce(rng.gen::<u64>(), nonce_bits).unwrap())
        .collect();
    (keys, nonces)
}

/// Run the full alternating schedule over a training set.
pub fn train(
    images: &[Tensor],
    gen_arch: GenArch,
    adversary_channels: usize,
    config: &TrainConfig,
    embedder: &EmbedderParams,
) -> Result<TrainState> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("training set must be non-empty"));
    }
    let key_bits = gen_arch.cond.key_bits;
    let nonce_bits = gen_arch.cond.nonce_bits;
    let mut state = TrainState::init(gen_arch, adversary_channels, config.seed);

    let mut order_rng = seeded_rng(derive_seed(config.seed, "batch-order"));
    let mut cred_rng = seeded_rng(derive_seed(config.seed, "credentials"));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = images.len(); // force an initial shuffle

    let next_batch = |order_rng: &mut rand_chacha::ChaCha8Rng,
                          cred_rng: &mut rand_chacha::ChaCha8Rng,
                          order: &mut Vec<usize>,
                          cursor: &mut usize|
     -> TrainBatch {
        let mut batch_images = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if *cursor >= order.len() {
                order.shuffle(order_rng);
                *cursor = 0;
            }
            batch_images.push(images[order[*cursor]].clone());
            *cursor += 1;
        }
        let (keys, nonces) =
            draw_credentials(cred_rng, config.batch_size, key_bits, nonce_bits);
        TrainBatch {
            images: batch_images,
            keys,
            nonces,
        }
    };

    let train_adversary = config.weights.lambda_rev != 0.0;
    for cycle in 0..config.cycles {
        if train_adversary {
            for _ in 0..config.adversary_steps_per_cycle {
                let batch = next_batch(&mut order_rng, &mut cred_rng, &mut order, &mut cursor);
                adversary_step(&batch, &mut state, config)?;
            }
        }
        let mut cycle_sums = LossBreakdown {
            rec: 0.0,
            id: 0.0,
            mse: 0.0,
            rev: 0.0,
            total: 0.0,
        };
        for _ in 0..config.protector_steps_per_cycle {
            let batch = next_batch(&mut order_rng, &mut cred_rng, &mut order, &mut cursor);
            let b = protector_step(&batch, &mut state, config, embedder)?;
            cycle_sums.rec += b.rec;
            cycle_sums.id += b.id;
            cycle_sums.mse += b.mse;
            cycle_sums.rev += b.rev;
            cycle_sums.total += b.total;
        }
        let n = config.protector_steps_per_cycle as f64;
        state.history.push(CycleStats {
            cycle,
            l_rec: cycle_sums.rec / n,
            l_id: cycle_sums.id / n,
            l_mse: cycle_sums.mse / n,
            l_rev: cycle_sums.rev / n,
            total: cycle_sums.total / n,
        });
    }
    Ok(state)
}
