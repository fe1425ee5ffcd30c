//! Dual-path Transformer decoder: alternating pixel-feature and query
//! updates with masked attention, per-layer (non-shared) prediction heads,
//! and the training-only ground-truth mask-guided re-forward.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::config::{DecoderConfig, UpdateOrder};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention, VarStore};
use crate::scenes::Mask;
use crate::tensor::{ops, Elem, Tensor};

/// Class and mask logits emitted by one decoder layer for the IA-guided
/// queries (auxiliary queries never predict).
pub struct LayerPrediction<E: Elem> {
    /// `(Na, K+1)`
    pub class_logits: Tensor<E>,
    /// `(Na, L)` over the flattened E3 grid.
    pub mask_logits: Tensor<E>,
    pub layer_index: usize,
}

/// Boolean allow-sets for masked attention: `(N, L)`, true = may attend.
/// Construction guarantees no all-false row and all-true auxiliary rows.
pub struct AttentionMaskSet {
    pub allow: Rc<Vec<bool>>,
    pub num_queries: usize,
    pub num_pixels: usize,
}

/// Threshold the previous layer's mask logits at sigmoid > 0.5 (logit > 0)
/// for IA queries; auxiliary rows are all-true; an all-false IA row falls
/// back to all-true.
pub fn build_attention_mask<E: Elem>(
    prev: &LayerPrediction<E>,
    aux_count: usize,
) -> AttentionMaskSet {
    let (na, l) = match prev.mask_logits.shape() {
        [na, l] => (*na, *l),
        _ => unreachable!("mask logits are 2-d"),
    };
    let logits = prev.mask_logits.to_vec();
    let n = na + aux_count;
    let mut allow = vec![true; n * l];
    for q in 0..na {
        let row = &mut allow[q * l..(q + 1) * l];
        let mut any = false;
        for (p, slot) in row.iter_mut().enumerate() {
            let keep = logits[q * l + p].to_f64() > 0.0;
            *slot = keep;
            any |= keep;
        }
        if !any {
            row.iter_mut().for_each(|b| *b = true);
        }
    }
    AttentionMaskSet {
        allow: Rc::new(allow),
        num_queries: n,
        num_pixels: l,
    }
}

/// Attention mask for the GT-guided re-forward: matched IA queries attend
/// within their matched ground-truth mask (downsampled to E3 by max-pool);
/// unmatched and auxiliary queries use standard (full) cross attention.
/// Empty downsampled masks also fall back to full attention.
pub fn build_gt_attention_mask(
    pairs: &[(usize, usize)],
    gt_masks_e3: &[Mask],
    na: usize,
    aux_count: usize,
    l: usize,
) -> Result<AttentionMaskSet> {
    let n = na + aux_count;
    let mut allow = vec![true; n * l];
    for &(q, t) in pairs {
        if q >= na {
            return Err(Error::invalid(format!(
                "gt attention mask: query index {q} is not an IA query (na = {na})"
            )));
        }
        let mask = gt_masks_e3.get(t).ok_or_else(|| {
            Error::invalid(format!("gt attention mask: target index {t} out of range"))
        })?;
        if mask.data.len() != l {
            return Err(Error::shape(format!(
                "gt attention mask: mask has {} cells, expected {l}",
                mask.data.len()
            )));
        }
        if mask.area() == 0 {
            continue; // vanished object: keep full attention
        }
        let row = &mut allow[q * l..(q + 1) * l];
        for (slot, &bit) in row.iter_mut().zip(mask.data.iter()) {
            *slot = bit;
        }
    }
    Ok(AttentionMaskSet {
        allow: Rc::new(allow),
        num_queries: n,
        num_pixels: l,
    })
}

/// One dual-path layer: pixel update (cross-attention + FFN, no pixel
/// self-attention) and query update (masked attention, self-attention,
/// FFN), each sublayer pre-normed with a residual. `order` decides which
/// half consumes the other's fresh output.
pub struct DecoderLayer<E: Elem> {
    px_ln_attn: LayerNorm<E>,
    px_attn: MultiHeadAttention<E>,
    px_ln_ffn: LayerNorm<E>,
    px_ffn: FeedForward<E>,
    q_ln_cross: LayerNorm<E>,
    q_cross: MultiHeadAttention<E>,
    q_ln_self: LayerNorm<E>,
    q_self: MultiHeadAttention<E>,
    q_ln_ffn: LayerNorm<E>,
    q_ffn: FeedForward<E>,
    order: UpdateOrder,
}

pub struct LayerOutput<E: Elem> {
    pub pixels: Tensor<E>,
    pub queries: Tensor<E>,
    /// Head-averaged masked-attention weights `(N, L)`.
    pub attn_weights: Tensor<E>,
}

impl<E: Elem> DecoderLayer<E> {
    pub fn new(
        vs: &mut VarStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &DecoderConfig,
        dim: usize,
    ) -> Self {
        DecoderLayer {
            px_ln_attn: LayerNorm::new(vs, &format!("{name}.px_ln_attn"), dim),
            px_attn: MultiHeadAttention::new(vs, rng, &format!("{name}.px_attn"), dim, cfg.heads),
            px_ln_ffn: LayerNorm::new(vs, &format!("{name}.px_ln_ffn"), dim),
            px_ffn: FeedForward::new(vs, rng, &format!("{name}.px_ffn"), dim, cfg.ffn_dim),
            q_ln_cross: LayerNorm::new(vs, &format!("{name}.q_ln_cross"), dim),
            q_cross: MultiHeadAttention::new(vs, rng, &format!("{name}.q_cross"), dim, cfg.heads),
            q_ln_self: LayerNorm::new(vs, &format!("{name}.q_ln_self"), dim),
            q_self: MultiHeadAttention::new(vs, rng, &format!("{name}.q_self"), dim, cfg.heads),
            q_ln_ffn: LayerNorm::new(vs, &format!("{name}.q_ffn_ln"), dim),
            q_ffn: FeedForward::new(vs, rng, &format!("{name}.q_ffn"), dim, cfg.ffn_dim),
            order: cfg.order,
        }
    }

    fn pixel_update(
        &self,
        x: &Tensor<E>,
        q: &Tensor<E>,
        pixel_pos: &Tensor<E>,
        query_pos: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let h = self.px_ln_attn.forward_rows(x)?;
        let (attn, _) = self
            .px_attn
            .forward(&h, Some(pixel_pos), q, Some(query_pos), q, None)?;
        let x1 = ops::add(x, &attn)?;
        let ffn = self.px_ffn.forward(&self.px_ln_ffn.forward_rows(&x1)?)?;
        ops::add(&x1, &ffn)
    }

    fn query_update(
        &self,
        q: &Tensor<E>,
        x: &Tensor<E>,
        pixel_pos: &Tensor<E>,
        query_pos: &Tensor<E>,
        mask: &AttentionMaskSet,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let h = self.q_ln_cross.forward_rows(q)?;
        let (attn, weights) = self.q_cross.forward(
            &h,
            Some(query_pos),
            x,
            Some(pixel_pos),
            x,
            Some(&mask.allow),
        )?;
        let q1 = ops::add(q, &attn)?;
        let h2 = self.q_ln_self.forward_rows(&q1)?;
        let (self_attn, _) =
            self.q_self
                .forward(&h2, Some(query_pos), &h2, Some(query_pos), &h2, None)?;
        let q2 = ops::add(&q1, &self_attn)?;
        let ffn = self.q_ffn.forward(&self.q_ln_ffn.forward_rows(&q2)?)?;
        Ok((ops::add(&q2, &ffn)?, weights))
    }

    /// One full dual-path update.
    pub fn forward(
        &self,
        x: &Tensor<E>,
        q: &Tensor<E>,
        pixel_pos: &Tensor<E>,
        query_pos: &Tensor<E>,
        mask: &AttentionMaskSet,
    ) -> Result<LayerOutput<E>> {
        let (l, n) = (x.shape()[0], q.shape()[0]);
        if mask.num_queries != n || mask.num_pixels != l {
            return Err(Error::shape(format!(
                "decoder layer: mask {}x{} vs queries {n} pixels {l}",
                mask.num_queries, mask.num_pixels
            )));
        }
        match self.order {
            UpdateOrder::PixelThenQuery => {
                let x_new = self.pixel_update(x, q, pixel_pos, query_pos)?;
                let (q_new, w) = self.query_update(q, &x_new, pixel_pos, query_pos, mask)?;
                Ok(LayerOutput {
                    pixels: x_new,
                    queries: q_new,
                    attn_weights: w,
                })
            }
            UpdateOrder::QueryThenPixel => {
                let (q_new, w) = self.query_update(q, x, pixel_pos, query_pos, mask)?;
                let x_new = self.pixel_update(x, &q_new, pixel_pos, query_pos)?;
                Ok(LayerOutput {
                    pixels: x_new,
                    queries: q_new,
                    attn_weights: w,
                })
            }
        }
    }
}

/// Per-layer prediction head: class and mask-embedding MLPs on the IA
/// queries plus a linear projection of the pixel features into mask
/// features; mask logits are the dot products. Parameters are never shared
/// across layers.
pub struct PredictionHead<E: Elem> {
    ln_q: LayerNorm<E>,
    ln_x: LayerNorm<E>,
    class_mlp: Mlp<E>,
    mask_mlp: Mlp<E>,
    mask_proj: Linear<E>,
    num_ia: usize,
}

impl<E: Elem> PredictionHead<E> {
    pub fn new(
        vs: &mut VarStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        num_classes: usize,
        num_ia: usize,
    ) -> Self {
        PredictionHead {
            ln_q: LayerNorm::new(vs, &format!("{name}.ln_q"), dim),
            ln_x: LayerNorm::new(vs, &format!("{name}.ln_x"), dim),
            class_mlp: Mlp::new(vs, rng, &format!("{name}.cls"), dim, dim, num_classes + 1, 3),
            mask_mlp: Mlp::new(vs, rng, &format!("{name}.mask"), dim, dim, dim, 3),
            mask_proj: Linear::new(vs, rng, &format!("{name}.feat"), dim, dim),
            num_ia,
        }
    }

    pub fn forward(
        &self,
        layer_index: usize,
        queries: &Tensor<E>,
        pixels: &Tensor<E>,
    ) -> Result<LayerPrediction<E>> {
        let ia = ops::narrow_rows(queries, 0, self.num_ia)?;
        let qn = self.ln_q.forward_rows(&ia)?;
        let class_logits = self.class_mlp.forward(&qn)?;
        let mask_embed = self.mask_mlp.forward(&qn)?;
        let mask_feats = self.mask_proj.forward(&self.ln_x.forward_rows(pixels)?)?;
        let mask_logits = ops::matmul_nt(&mask_embed, &mask_feats)?;
        Ok(LayerPrediction {
            class_logits,
            mask_logits,
            layer_index,
        })
    }
}

/// Routing decisions captured during a forward pass so that a re-run (for
/// finite-difference probes) follows the identical discrete branch.
#[derive(Default, Clone)]
pub struct FrozenMasks {
    pub allow: Vec<Rc<Vec<bool>>>,
}

pub struct DecoderOutputs<E: Elem> {
    /// D+1 predictions, layer 0 first.
    pub predictions: Vec<LayerPrediction<E>>,
    /// Pixel/query states after each layer: index 0 is the decoder input,
    /// index l the output of layer l.
    pub states: Vec<(Tensor<E>, Tensor<E>)>,
    /// Head-averaged masked-attention weights per layer (length D).
    pub attn_weights: Vec<Tensor<E>>,
    /// The attention allow-masks actually used (length D).
    pub masks: FrozenMasks,
}

/// The D-layer decoder plus its D+1 prediction heads.
pub struct DualPathDecoder<E: Elem> {
    pub layers: Vec<DecoderLayer<E>>,
    pub heads: Vec<PredictionHead<E>>,
    aux_count: usize,
}

impl<E: Elem> DualPathDecoder<E> {
    pub fn new(
        vs: &mut VarStore<E>,
        rng: &mut ChaCha8Rng,
        cfg: &DecoderConfig,
        dim: usize,
        num_classes: usize,
        num_ia: usize,
        aux_count: usize,
    ) -> Self {
        let layers = (1..=cfg.d)
            .map(|l| DecoderLayer::new(vs, rng, &format!("decoder.layer{l}"), cfg, dim))
            .collect();
        let heads = (0..=cfg.d)
            .map(|l| {
                PredictionHead::new(vs, rng, &format!("heads.layer{l}"), dim, num_classes, num_ia)
            })
            .collect();
        DualPathDecoder {
            layers,
            heads,
            aux_count,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Full decoder pass: layer-0 prediction from the raw inputs, then for
    /// each layer an attention mask from the previous prediction, the
    /// dual-path update, and that layer's prediction. `frozen` replays
    /// recorded attention masks instead of thresholding predictions.
    pub fn forward(
        &self,
        x0: Tensor<E>,
        q0: Tensor<E>,
        pixel_pos: &Tensor<E>,
        query_pos: &Tensor<E>,
        frozen: Option<&FrozenMasks>,
    ) -> Result<DecoderOutputs<E>> {
        let mut predictions = Vec::with_capacity(self.layers.len() + 1);
        let mut states = vec![(x0.clone(), q0.clone())];
        let mut attn_weights = Vec::with_capacity(self.layers.len());
        let mut masks = FrozenMasks::default();

        predictions.push(self.heads[0].forward(0, &q0, &x0)?);

        let l = x0.shape()[0];
        let (mut x, mut q) = (x0, q0);
        for (i, layer) in self.layers.iter().enumerate() {
            let mask = match frozen {
                Some(f) => AttentionMaskSet {
                    allow: Rc::clone(f.allow.get(i).ok_or_else(|| {
                        Error::invalid("frozen masks shorter than decoder depth")
                    })?),
                    num_queries: q.shape()[0],
                    num_pixels: l,
                },
                None => build_attention_mask(&predictions[i], self.aux_count),
            };
            masks.allow.push(Rc::clone(&mask.allow));
            let out = layer.forward(&x, &q, pixel_pos, query_pos, &mask)?;
            x = out.pixels;
            q = out.queries;
            attn_weights.push(out.attn_weights);
            states.push((x.clone(), q.clone()));
            predictions.push(self.heads[i + 1].forward(i + 1, &q, &x)?);
        }
        Ok(DecoderOutputs {
            predictions,
            states,
            attn_weights,
            masks,
        })
    }

    /// Training-only guided re-forward of layer `l` (1-based): rerun that
    /// layer's own parameters on its ORIGINAL OUTPUT state `(X_l, Q_l)`
    /// with attention masks built from matched GT masks, then emit a
    /// prediction through layer l's head. Pure: no state is retained.
    #[allow(clippy::too_many_arguments)]
    pub fn gt_guided_forward(
        &self,
        l: usize,
        x_l: &Tensor<E>,
        q_l: &Tensor<E>,
        pixel_pos: &Tensor<E>,
        query_pos: &Tensor<E>,
        pairs: &[(usize, usize)],
        gt_masks_e3: &[Mask],
    ) -> Result<LayerPrediction<E>> {
        if l == 0 || l > self.layers.len() {
            return Err(Error::invalid(format!(
                "gt_guided_forward: layer {l} out of 1..={}",
                self.layers.len()
            )));
        }
        let num_ia = self.heads[0].num_ia;
        let mask = build_gt_attention_mask(
            pairs,
            gt_masks_e3,
            num_ia,
            self.aux_count,
            x_l.shape()[0],
        )?;
        let out = self.layers[l - 1].forward(x_l, q_l, pixel_pos, query_pos, &mask)?;
        self.heads[l].forward(l, &out.queries, &out.pixels)
    }
}
