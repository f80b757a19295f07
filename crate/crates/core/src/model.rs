//! Encoder + projection head, the contrastive loss family, and the
//! pruned-branch mechanism.
//!
//! The per-anchor loss is the negative log softmax of the positive-pair
//! similarity over the candidate set (the positive plus every other
//! sample's views in the batch) at temperature tau. The damaged variant
//! routes all candidate-slot embeddings through `g`, the magnitude-pruned
//! copy of `f` that shares its weights through a multiplicative mask.

use crate::augment::{self, AugPolicy, Image};
use crate::seeds::{self, domain};
use crate::tensor::{Param, Scalar, Tape, TensorId};
use crate::{Error, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NormKind {
    Batch,
    Group { groups: usize },
}

/// Architecture of the conv encoder: stride-2 conv blocks (norm + relu),
/// global average pooling, then a 2-layer projector onto the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_h: usize,
    pub in_w: usize,
    /// Output channels per stride-2 block.
    pub channels: Vec<usize>,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub norm: NormKind,
    pub tau: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            in_h: 32,
            in_w: 32,
            channels: vec![32, 64, 128, 256],
            hidden_dim: 256,
            embed_dim: 128,
            norm: NormKind::Batch,
            tau: 0.2,
        }
    }
}

impl EncoderSpec {
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("at least one block")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        let mut h = self.in_h;
        let mut w = self.in_w;
        for _ in &self.channels {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("too many blocks for the input extent".into()));
        }
        if let NormKind::Group { groups } = self.norm {
            for &c in &self.channels {
                if groups == 0 || c % groups != 0 {
                    return Err(Error::Config(format!(
                        "group count {groups} does not divide {c} channels"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Forward mode: training uses batch statistics; the pruned branch trains
/// without touching running statistics; evaluation freezes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    TrainFrozenStats,
    Eval,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
struct RunningStats<S: Scalar> {
    mean: Vec<S>,
    var: Vec<S>,
}

/// The encoder `f`: parameters plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Encoder<S: Scalar> {
    pub spec: EncoderSpec,
    pub params: Vec<Param<S>>,
    running: Vec<RunningStats<S>>,
}

pub struct EncoderOut {
    /// Pre-projector pooled features, `[N, feature_dim]`.
    pub feature: TensorId,
    /// Unit-norm projector output, `[N, embed_dim]`.
    pub embedding: TensorId,
}

impl<S: Scalar> Encoder<S> {
    pub fn init(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut c_in = 3usize;
        let he_uniform = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, fan_in: usize| -> Vec<S> {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                .collect()
        };
        for (i, &c_out) in spec.channels.iter().enumerate() {
            let mut rng = seeds::stream(seed, &[domain::INIT, params.len() as u64]);
            let n = c_out * c_in * 9;
            params.push(Param::new(
                format!("block{i}.conv.w"),
                he_uniform(&mut rng, n, c_in * 9),
                vec![c_out, c_in, 3, 3],
            ));
            params.push(Param::new(
                format!("block{i}.norm.gamma"),
                vec![S::one(); c_out],
                vec![c_out],
            ));
            params.push(Param::new(
                format!("block{i}.norm.beta"),
                vec![S::zero(); c_out],
                vec![c_out],
            ));
            running.push(RunningStats {
                mean: vec![S::zero(); c_out],
                var: vec![S::one(); c_out],
            });
            c_in = c_out;
        }
        let feat = spec.feature_dim();
        let mut rng = seeds::stream(seed, &[domain::INIT, params.len() as u64]);
        params.push(Param::new(
            "proj.fc1.w",
            he_uniform(&mut rng, spec.hidden_dim * feat, feat),
            vec![spec.hidden_dim, feat],
        ));
        params.push(Param::new(
            "proj.fc1.b",
            vec![S::zero(); spec.hidden_dim],
            vec![spec.hidden_dim],
        ));
        let mut rng = seeds::stream(seed, &[domain::INIT, params.len() as u64]);
        params.push(Param::new(
            "proj.fc2.w",
            he_uniform(&mut rng, spec.embed_dim * spec.hidden_dim, spec.hidden_dim),
            vec![spec.embed_dim, spec.hidden_dim],
        ));
        params.push(Param::new(
            "proj.fc2.b",
            vec![S::zero(); spec.embed_dim],
            vec![spec.embed_dim],
        ));
        Ok(Encoder {
            spec,
            params,
            running,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Copy all parameters onto the tape as leaves, in parameter order.
    pub fn bind(&self, tape: &mut Tape<S>, requires_grad: bool) -> Result<Vec<TensorId>> {
        self.params.iter().map(|p| p.bind(tape, requires_grad)).collect()
    }

    fn param_index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Run the network against an explicit parameter binding. `pids` must
    /// align with `self.params`; the pruned branch passes masked ids here.
    pub fn forward_with(
        &mut self,
        tape: &mut Tape<S>,
        x: TensorId,
        pids: &[TensorId],
        mode: Mode,
    ) -> Result<EncoderOut> {
        if pids.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                pids.len()
            )));
        }
        let mut h = x;
        for i in 0..self.spec.channels.len() {
            let w = pids[self.param_index(&format!("block{i}.conv.w"))];
            let gamma = pids[self.param_index(&format!("block{i}.norm.gamma"))];
            let beta = pids[self.param_index(&format!("block{i}.norm.beta"))];
            h = tape.conv2d(h, w, None, 2, 1)?;
            h = match self.spec.norm {
                NormKind::Batch => match mode {
                    Mode::Train => {
                        let (y, mean, var) = tape.batch_norm(h, gamma, beta, BN_EPS)?;
                        let stats = &mut self.running[i];
                        let m = S::from_f64(BN_MOMENTUM);
                        let one_m = S::from_f64(1.0 - BN_MOMENTUM);
                        for (r, b) in stats.mean.iter_mut().zip(&mean) {
                            *r = one_m * *r + m * *b;
                        }
                        for (r, b) in stats.var.iter_mut().zip(&var) {
                            *r = one_m * *r + m * *b;
                        }
                        y
                    }
                    Mode::TrainFrozenStats => tape.batch_norm(h, gamma, beta, BN_EPS)?.0,
                    Mode::Eval => {
                        let stats = &self.running[i];
                        tape.batch_norm_inference(h, gamma, beta, &stats.mean, &stats.var, BN_EPS)?
                    }
                },
                NormKind::Group { groups } => tape.group_norm(h, gamma, beta, groups, BN_EPS)?,
            };
            h = tape.relu(h)?;
        }
        let feature = tape.global_avg_pool(h)?;
        let w1 = pids[self.param_index("proj.fc1.w")];
        let b1 = pids[self.param_index("proj.fc1.b")];
        let w2 = pids[self.param_index("proj.fc2.w")];
        let b2 = pids[self.param_index("proj.fc2.b")];
        let hdn = tape.linear(feature, w1, Some(b1))?;
        let hdn = tape.relu(hdn)?;
        let prj = tape.linear(hdn, w2, Some(b2))?;
        let embedding = tape.l2_normalize_rows(prj)?;
        Ok(EncoderOut { feature, embedding })
    }

    /// Grad-free embedding pass for evaluation; `mask` selects the pruned
    /// branch.
    pub fn embed(
        &mut self,
        images: &[Image],
        mask: Option<&PruneMask<S>>,
        mode: Mode,
    ) -> Result<(Vec<S>, Vec<S>)> {
        let mut tape: Tape<S> = Tape::new();
        let (data, shape) = images_to_tensor::<S>(images, self.spec.in_h, self.spec.in_w)?;
        let x = tape.leaf(data, &shape, false)?;
        let pids = self.bind(&mut tape, false)?;
        let pids = match mask {
            Some(m) => m.masked_ids(&mut tape, &pids)?,
            None => pids,
        };
        let out = self.forward_with(&mut tape, x, &pids, mode)?;
        Ok((tape.data(out.feature).to_vec(), tape.data(out.embedding).to_vec()))
    }

    pub fn running_stats_buffers(&self) -> Vec<(String, Vec<S>, Vec<S>)> {
        self.running
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("block{i}.norm"), r.mean.clone(), r.var.clone()))
            .collect()
    }

    pub fn set_running_stats(&mut self, block: usize, mean: Vec<S>, var: Vec<S>) -> Result<()> {
        let slot = self
            .running
            .get_mut(block)
            .ok_or_else(|| Error::Checkpoint(format!("no norm block {block}")))?;
        if mean.len() != slot.mean.len() || var.len() != slot.var.len() {
            return Err(Error::Checkpoint("running stat size mismatch".into()));
        }
        slot.mean = mean;
        slot.var = var;
        Ok(())
    }
}

/// Pack a batch of images into an `[N, 3, H, W]` leaf payload.
pub fn images_to_tensor<S: Scalar>(
    images: &[Image],
    h: usize,
    w: usize,
) -> Result<(Vec<S>, Vec<usize>)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    let plane = h * w;
    let mut data = vec![S::zero(); images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if img.h != h || img.w != w {
            return Err(Error::ShapeMismatch {
                op: "images_to_tensor",
                lhs: vec![img.h, img.w],
                rhs: vec![h, w],
            });
        }
        let base = n * 3 * plane;
        for p in 0..plane {
            for c in 0..3 {
                data[base + c * plane + p] =
                    S::from_f64(img.pixels[p * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok((data, vec![images.len(), 3, h, w]))
}

/// Per-weight binary mask over the prunable (conv and linear weight)
/// parameters; other parameters pass through unmasked.
#[derive(Debug, Clone)]
pub struct PruneMask<S: Scalar> {
    pub ratio: f64,
    masks: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> PruneMask<S> {
    pub fn all_ones(encoder: &Encoder<S>) -> Self {
        refresh_prune_mask(encoder, 0.0).expect("ratio 0 is always valid")
    }

    /// Multiplicatively mask the bound parameter ids; gradients flow back
    /// to the shared weights scaled by the mask.
    pub fn masked_ids(&self, tape: &mut Tape<S>, pids: &[TensorId]) -> Result<Vec<TensorId>> {
        if pids.len() != self.masks.len() {
            return Err(Error::InvalidArgument(format!(
                "mask covers {} parameters, got {}",
                self.masks.len(),
                pids.len()
            )));
        }
        let mut out = Vec::with_capacity(pids.len());
        for (&pid, mask) in pids.iter().zip(&self.masks) {
            match mask {
                Some(m) => {
                    let shape = tape.shape(pid).to_vec();
                    let mleaf = tape.leaf(m.clone(), &shape, false)?;
                    out.push(tape.mul(pid, mleaf)?);
                }
                None => out.push(pid),
            }
        }
        Ok(out)
    }

    /// Zeros per prunable layer; used by the mask invariant checks.
    pub fn zeros_per_layer(&self) -> Vec<(usize, usize)> {
        self.masks
            .iter()
            .filter_map(|m| m.as_ref())
            .map(|m| {
                let zeros = m.iter().filter(|&&v| v == S::zero()).count();
                (zeros, m.len())
            })
            .collect()
    }
}

fn prunable(name: &str) -> bool {
    name.ends_with(".conv.w") || (name.starts_with("proj.") && name.ends_with(".w"))
}

/// Magnitude pruning: zero the `ceil(p * n)` smallest-magnitude weights of
/// each prunable layer; ties break by parameter index.
pub fn refresh_prune_mask<S: Scalar>(encoder: &Encoder<S>, p: f64) -> Result<PruneMask<S>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "prune ratio {p} outside [0, 1)"
        )));
    }
    let mut masks = Vec::with_capacity(encoder.params.len());
    for param in &encoder.params {
        if !prunable(&param.name) {
            masks.push(None);
            continue;
        }
        let n = param.data.len();
        let zeros = (p * n as f64).ceil() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            param.data[a]
                .abs()
                .partial_cmp(&param.data[b].abs())
                .expect("finite weights")
                .then(a.cmp(&b))
        });
        let mut mask = vec![S::one(); n];
        for &i in &idx[..zeros] {
            mask[i] = S::zero();
        }
        masks.push(Some(mask));
    }
    Ok(PruneMask { ratio: p, masks })
}

/// Scalar mean loss plus the per-sample loss vector feeding the tracker.
pub struct LossOut {
    pub mean: TensorId,
    pub per_sample: TensorId,
}

/// Two-view contrastive loss with explicit anchor-slot and candidate-slot
/// embeddings (`[B, D]` each, rows unit-norm). Per anchor view `i`, the
/// candidate set is every candidate-slot row except the anchor's own view;
/// the positive is the same sample's other view. The per-sample loss
/// averages both views acting as anchor.
pub fn ntxent_two_view<S: Scalar>(
    tape: &mut Tape<S>,
    anchors_a: TensorId,
    anchors_b: TensorId,
    cands_a: TensorId,
    cands_b: TensorId,
    tau: f64,
) -> Result<LossOut> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let b = tape.shape(anchors_a)[0];
    for id in [anchors_b, cands_a, cands_b] {
        if tape.shape(id) != tape.shape(anchors_a) {
            return Err(Error::ShapeMismatch {
                op: "ntxent_two_view",
                lhs: tape.shape(anchors_a).to_vec(),
                rhs: tape.shape(id).to_vec(),
            });
        }
    }
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    let cands = tape.concat_rows(&[cands_a, cands_b])?;

    let half = |tape: &mut Tape<S>, anchors: TensorId, own: usize, pos: usize| -> Result<TensorId> {
        let sims = tape.matmul_nt(anchors, cands)?;
        let sims = tape.scale(sims, 1.0 / tau)?;
        let mut mask = vec![true; b * 2 * b];
        let mut pos_idx = Vec::with_capacity(b);
        for i in 0..b {
            mask[i * 2 * b + own * b + i] = false;
            pos_idx.push((pos * b + i) as u32);
        }
        let lse = tape.masked_lse_rows(sims, mask)?;
        let pos = tape.take_per_row(sims, pos_idx)?;
        tape.sub(lse, pos)
    };
    let loss_a = half(tape, anchors_a, 0, 1)?;
    let loss_b = half(tape, anchors_b, 1, 0)?;
    let summed = tape.add(loss_a, loss_b)?;
    let vec2 = tape.reshape(summed, &[1, b])?;
    let per_sample = tape.scale(vec2, 0.5)?;
    let per_sample = tape.reshape(per_sample, &[b])?;
    let mean = tape.mean(per_sample)?;
    Ok(LossOut { mean, per_sample })
}

/// Plain two-view contrastive loss: one encoder, views serve as both
/// anchors and candidates.
pub fn ntxent_loss<S: Scalar>(
    tape: &mut Tape<S>,
    view_a: TensorId,
    view_b: TensorId,
    tau: f64,
) -> Result<LossOut> {
    ntxent_two_view(tape, view_a, view_b, view_a, view_b, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BclVariant {
    /// Both slots encoded by `f`.
    I,
    /// Anchor slot by `f`, every candidate slot by the pruned `g`.
    D,
}

/// Encode two augmented views and compute the contrastive loss for the
/// chosen variant. For the damaged variant, `mask` defines `g`.
pub fn encode_and_loss<S: Scalar>(
    tape: &mut Tape<S>,
    encoder: &mut Encoder<S>,
    x_a: TensorId,
    x_b: TensorId,
    variant: BclVariant,
    mask: Option<&PruneMask<S>>,
    mode: Mode,
) -> Result<LossOut> {
    let tau = encoder.spec.tau;
    let pids = encoder.bind(tape, true)?;
    let za = encoder.forward_with(tape, x_a, &pids, mode)?.embedding;
    let zb = encoder.forward_with(tape, x_b, &pids, mode)?.embedding;
    match variant {
        BclVariant::I => ntxent_two_view(tape, za, zb, za, zb, tau),
        BclVariant::D => {
            let mask = mask.ok_or_else(|| {
                Error::InvalidArgument("damaged variant requires a prune mask".into())
            })?;
            let mids = mask.masked_ids(tape, &pids)?;
            let ga = encoder
                .forward_with(tape, x_a, &mids, Mode::TrainFrozenStats)?
                .embedding;
            let gb = encoder
                .forward_with(tape, x_b, &mids, Mode::TrainFrozenStats)?
                .embedding;
            ntxent_two_view(tape, za, zb, ga, gb, tau)
        }
    }
}

/// How a batch's views are built before encoding.
#[derive(Debug, Clone, Copy)]
pub enum ViewRule<'a> {
    /// Base pipeline only.
    Plain,
    /// Base pipeline then score-boosted augmentation per view.
    Boosted {
        scores: &'a [f64],
        policy: &'a AugPolicy,
    },
    /// Base pipeline then uniform fixed-strength augmentation.
    Fixed {
        strength: f64,
        policy: &'a AugPolicy,
    },
}

/// Build both views for a batch of records. Each (sample, view) consumes
/// its own keyed stream, so the parallel fan-out is order-independent.
pub fn build_views(
    batch: &[(u32, &[u8])],
    h: usize,
    w: usize,
    rule: ViewRule<'_>,
    fill: [u8; 3],
    seed: u64,
    epoch: u64,
) -> Result<(Vec<Image>, Vec<Image>)> {
    let make = |&(sample_id, pixels): &(u32, &[u8])| -> Result<(Image, Image)> {
        let img = Image::new(h, w, pixels.to_vec());
        let mut out = [None, None];
        for (view, slot) in out.iter_mut().enumerate() {
            let mut rng = augment::view_stream(seed, sample_id, epoch, view as u32);
            let base = augment::base_view(&img, &mut rng);
            let finished = match rule {
                ViewRule::Plain => base,
                ViewRule::Boosted { scores, policy } => {
                    let m = *scores.get(sample_id as usize).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "no score for sample {sample_id}"
                        ))
                    })?;
                    augment::boosted_augment(&base, m, policy, fill, &mut rng)?.0
                }
                ViewRule::Fixed { strength, policy } => {
                    augment::fixed_augment(&base, strength, policy, fill, &mut rng)?.0
                }
            };
            *slot = Some(finished);
        }
        let [a, b] = out;
        Ok((a.unwrap(), b.unwrap()))
    };
    let pairs: Result<Vec<(Image, Image)>> = if batch.len() > 1 {
        batch.par_iter().map(make).collect()
    } else {
        batch.iter().map(make).collect()
    };
    Ok(pairs?.into_iter().unzip())
}
