//! Full model assembly: the named parameter collection and the forward
//! passes that connect region reasoning, global reasoning, the caption
//! encoder, and the training objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::global::{global_semantic_reason, order_regions, GruCellIds, GruCellParams};
use crate::objectives::{joint_loss, matching_loss, BatchEmbeddings, LossBreakdown};
use crate::region::{
    embed_regions, relationship_reason, EmbeddedRegions, GcnLayerIds, GcnLayerParams, RegionSet,
};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::text::{
    encode_caption, generation_loss, TextEncoderIds, TextEncoderParams, TokenSequence,
};

/// Shape summary of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub joint_dim: usize,
    pub vocab_size: usize,
    pub rrr_layers: usize,
}

/// Every learnable array of the model, addressable by name.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub region_embed_w: Tensor,
    pub region_embed_b: Tensor,
    pub gcn: Vec<GcnLayerParams>,
    pub visual_gru: GruCellParams,
    pub text: TextEncoderParams,
    dims: ModelDims,
}

/// Tape bindings of every learnable array for one forward/backward pass.
pub struct ModelIds {
    pub region_embed_w: TensorId,
    pub region_embed_b: TensorId,
    pub gcn: Vec<GcnLayerIds>,
    pub visual_gru: GruCellIds,
    pub text: TextEncoderIds,
}

impl ModelParams {
    /// Seeded uniform initialization scaled by each matrix's fan-in.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_limit = 1.0 / (dims.feature_dim as f64).sqrt();
        ModelParams {
            region_embed_w: Tensor::uniform_param(
                &[dims.feature_dim, dims.joint_dim],
                embed_limit,
                &mut rng,
            )
            .expect("valid shape"),
            region_embed_b: Tensor::param(&[1, dims.joint_dim], vec![0.0; dims.joint_dim])
                .expect("valid shape"),
            gcn: (0..dims.rrr_layers)
                .map(|_| GcnLayerParams::init(dims.joint_dim, &mut rng))
                .collect(),
            visual_gru: GruCellParams::init(dims.joint_dim, dims.joint_dim, &mut rng),
            text: TextEncoderParams::init(dims.vocab_size, dims.joint_dim, &mut rng),
            dims,
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelIds {
        ModelIds {
            region_embed_w: tape.leaf(&self.region_embed_w),
            region_embed_b: tape.leaf(&self.region_embed_b),
            gcn: self.gcn.iter().map(|layer| layer.bind(tape)).collect(),
            visual_gru: self.visual_gru.bind(tape),
            text: self.text.bind(tape),
        }
    }

    /// Add the tape's gradients into every parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape, ids: &ModelIds) -> Result<()> {
        self.region_embed_w
            .accumulate_grad(tape.grad(ids.region_embed_w)?)?;
        self.region_embed_b
            .accumulate_grad(tape.grad(ids.region_embed_b)?)?;
        for (layer, layer_ids) in self.gcn.iter_mut().zip(&ids.gcn) {
            layer.accumulate_grads(tape, layer_ids)?;
        }
        self.visual_gru.accumulate_grads(tape, &ids.visual_gru)?;
        self.text.accumulate_grads(tape, &ids.text)?;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.for_each_mut(|_, t| t.zero_grad());
    }

    /// Squared Euclidean norm of all gradients.
    pub fn grad_norm_squared(&self) -> f64 {
        let mut total = 0.0;
        self.for_each(|_, t| {
            if let Some(g) = t.grad() {
                total += g.iter().map(|v| v * v).sum::<f64>();
            }
        });
        total
    }

    pub fn scale_grads(&mut self, factor: f64) {
        self.for_each_mut(|_, t| t.scale_grad(factor));
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.all_finite());
        ok
    }

    /// Visit `(name, tensor)` pairs in a fixed structural order.
    pub fn for_each(&self, mut visit: impl FnMut(&str, &Tensor)) {
        visit("region_embed.w", &self.region_embed_w);
        visit("region_embed.b", &self.region_embed_b);
        for (i, layer) in self.gcn.iter().enumerate() {
            visit(&format!("gcn{i}.w_phi"), &layer.w_phi);
            visit(&format!("gcn{i}.w_psi"), &layer.w_psi);
            visit(&format!("gcn{i}.w_g"), &layer.w_g);
            visit(&format!("gcn{i}.w_res"), &layer.w_res);
        }
        for_each_gru(&self.visual_gru, "visual_gru", &mut visit);
        visit("text.embedding", &self.text.embedding);
        for_each_gru(&self.text.encoder, "text.encoder", &mut visit);
        for_each_gru(&self.text.decoder, "text.decoder", &mut visit);
        visit("text.output.w", &self.text.output_w);
        visit("text.output.b", &self.text.output_b);
    }

    /// Visit `(name, tensor)` pairs mutably, in the same order as
    /// [`ModelParams::for_each`].
    pub fn for_each_mut(&mut self, mut visit: impl FnMut(&str, &mut Tensor)) {
        visit("region_embed.w", &mut self.region_embed_w);
        visit("region_embed.b", &mut self.region_embed_b);
        for (i, layer) in self.gcn.iter_mut().enumerate() {
            visit(&format!("gcn{i}.w_phi"), &mut layer.w_phi);
            visit(&format!("gcn{i}.w_psi"), &mut layer.w_psi);
            visit(&format!("gcn{i}.w_g"), &mut layer.w_g);
            visit(&format!("gcn{i}.w_res"), &mut layer.w_res);
        }
        for_each_gru_mut(&mut self.visual_gru, "visual_gru", &mut visit);
        visit("text.embedding", &mut self.text.embedding);
        for_each_gru_mut(&mut self.text.encoder, "text.encoder", &mut visit);
        for_each_gru_mut(&mut self.text.decoder, "text.decoder", &mut visit);
        visit("text.output.w", &mut self.text.output_w);
        visit("text.output.b", &mut self.text.output_b);
    }

    /// Snapshot all parameters as `(name, tensor)` pairs.
    pub fn named_clone(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each(|name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Rebuild a model from named tensors. Every expected parameter must be
    /// present exactly once with the right shape, and nothing extra.
    pub fn from_named(dims: ModelDims, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut pool: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
        for (name, tensor) in params {
            if pool.insert(name.clone(), tensor).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name:?}")));
            }
        }
        let mut model = ModelParams::init(dims, 0);
        let mut missing = Vec::new();
        let mut shape_error = None;
        model.for_each_mut(|name, slot| {
            match pool.remove(name) {
                Some(tensor) => {
                    if tensor.shape() != slot.shape() {
                        shape_error.get_or_insert(format!(
                            "parameter {name:?} has shape {:?}, expected {:?}",
                            tensor.shape(),
                            slot.shape()
                        ));
                    } else {
                        *slot = tensor;
                    }
                }
                None => missing.push(name.to_string()),
            }
        });
        if let Some(msg) = shape_error {
            return Err(Error::Format(msg));
        }
        if !missing.is_empty() {
            return Err(Error::Format(format!("missing parameters: {missing:?}")));
        }
        if !pool.is_empty() {
            let mut extra: Vec<String> = pool.into_keys().collect();
            extra.sort();
            return Err(Error::Format(format!("unexpected parameters: {extra:?}")));
        }
        Ok(model)
    }
}

fn for_each_gru(cell: &GruCellParams, prefix: &str, visit: &mut impl FnMut(&str, &Tensor)) {
    visit(&format!("{prefix}.w_z"), &cell.w_z);
    visit(&format!("{prefix}.u_z"), &cell.u_z);
    visit(&format!("{prefix}.b_z"), &cell.b_z);
    visit(&format!("{prefix}.w_r"), &cell.w_r);
    visit(&format!("{prefix}.u_r"), &cell.u_r);
    visit(&format!("{prefix}.b_r"), &cell.b_r);
    visit(&format!("{prefix}.w_m"), &cell.w_m);
    visit(&format!("{prefix}.u_m"), &cell.u_m);
    visit(&format!("{prefix}.b_m"), &cell.b_m);
}

fn for_each_gru_mut(
    cell: &mut GruCellParams,
    prefix: &str,
    visit: &mut impl FnMut(&str, &mut Tensor),
) {
    visit(&format!("{prefix}.w_z"), &mut cell.w_z);
    visit(&format!("{prefix}.u_z"), &mut cell.u_z);
    visit(&format!("{prefix}.b_z"), &mut cell.b_z);
    visit(&format!("{prefix}.w_r"), &mut cell.w_r);
    visit(&format!("{prefix}.u_r"), &mut cell.u_r);
    visit(&format!("{prefix}.b_r"), &mut cell.b_r);
    visit(&format!("{prefix}.w_m"), &mut cell.w_m);
    visit(&format!("{prefix}.u_m"), &mut cell.u_m);
    visit(&format!("{prefix}.b_m"), &mut cell.b_m);
}

/// Region-side forward pass: embedded regions after relationship reasoning
/// plus the final image representation.
pub struct ImageForward {
    pub v_star: EmbeddedRegions,
    pub repr: TensorId,
}

/// Run the full image side for one region set with a given region order.
pub fn image_forward(
    tape: &mut Tape,
    ids: &ModelIds,
    regions: &RegionSet,
    order: &[usize],
) -> Result<ImageForward> {
    let embedded = embed_regions(tape, regions, ids.region_embed_w, ids.region_embed_b)?;
    let v_star = relationship_reason(tape, embedded, &ids.gcn)?;
    let repr = global_semantic_reason(tape, v_star, order, &ids.visual_gru)?;
    Ok(ImageForward { v_star, repr })
}

/// One training item as borrowed data plus its precomputed region order.
pub struct BatchItem<'a> {
    pub regions: &'a RegionSet,
    pub caption: &'a TokenSequence,
    pub order: Vec<usize>,
}

/// Differentiable loss of one batch plus its recorded components.
pub struct BatchLoss {
    pub total: TensorId,
    pub breakdown: LossBreakdown,
}

/// Forward a mini-batch through both sides and combine the matching and
/// generation objectives. The generation term is averaged over the batch;
/// with generation disabled it is exactly zero and no decoder ops run.
pub fn batch_loss(
    tape: &mut Tape,
    ids: &ModelIds,
    items: &[BatchItem<'_>],
    config: &TrainConfig,
) -> Result<BatchLoss> {
    if items.is_empty() {
        return Err(Error::Parameter("batch must be nonempty".into()));
    }
    let mut image_vecs = Vec::with_capacity(items.len());
    let mut caption_vecs = Vec::with_capacity(items.len());
    let mut region_vecs = Vec::with_capacity(items.len());
    for item in items {
        let forward = image_forward(tape, ids, item.regions, &item.order)?;
        let image = maybe_normalize(tape, forward.repr, config.normalize_embeddings)?;
        let caption = encode_caption(tape, item.caption, &ids.text)?;
        let caption = maybe_normalize(tape, caption, config.normalize_embeddings)?;
        image_vecs.push(image);
        caption_vecs.push(caption);
        region_vecs.push(forward.v_star);
    }

    let batch = BatchEmbeddings::stack(tape, &image_vecs, &caption_vecs)?;
    let matching = matching_loss(tape, &batch, config.margin)?;

    let generation = if config.use_generation_loss {
        let mut sum: Option<TensorId> = None;
        for (item, &v_star) in items.iter().zip(&region_vecs) {
            let item_loss = generation_loss(tape, v_star, item.caption, &ids.text)?;
            sum = Some(match sum {
                Some(s) => tape.add(s, item_loss)?,
                None => item_loss,
            });
        }
        tape.affine(sum.expect("nonempty batch"), 1.0 / items.len() as f64, 0.0)?
    } else {
        tape.constant_scalar(0.0)
    };

    let total = tape.add(matching, generation)?;
    let breakdown = joint_loss(tape.scalar_value(matching)?, tape.scalar_value(generation)?)?;
    Ok(BatchLoss { total, breakdown })
}

fn maybe_normalize(tape: &mut Tape, id: TensorId, normalize: bool) -> Result<TensorId> {
    if normalize {
        tape.row_unit_norm(id)
    } else {
        Ok(id)
    }
}

/// Plain-value image and caption embeddings of a list of items, for
/// evaluation and visualization. Item orders follow the configured strategy
/// with per-item seeds derived from the config seed.
pub fn encode_items(
    params: &ModelParams,
    config: &TrainConfig,
    items: &[(&RegionSet, &TokenSequence)],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut images = Vec::with_capacity(items.len());
    let mut captions = Vec::with_capacity(items.len());
    for (index, (regions, caption)) in items.iter().enumerate() {
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let order = order_regions(regions, config.ordering.strategy(config.seed, index));
        let forward = image_forward(&mut tape, &ids, regions, &order)?;
        let image = maybe_normalize(&mut tape, forward.repr, config.normalize_embeddings)?;
        let encoded = encode_caption(&mut tape, caption, &ids.text)?;
        let encoded = maybe_normalize(&mut tape, encoded, config.normalize_embeddings)?;
        images.push(tape.value(image)?.to_vec());
        captions.push(tape.value(encoded)?.to_vec());
    }
    Ok((images, captions))
}

/// Region vectors and image representation of a single item, as plain
/// values, for attention rendering.
pub fn image_attention_values(
    params: &ModelParams,
    config: &TrainConfig,
    regions: &RegionSet,
    item_index: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape);
    let order = order_regions(regions, config.ordering.strategy(config.seed, item_index));
    let forward = image_forward(&mut tape, &ids, regions, &order)?;
    Ok((
        tape.value(forward.v_star.id)?.to_vec(),
        tape.value(forward.repr)?.to_vec(),
    ))
}
