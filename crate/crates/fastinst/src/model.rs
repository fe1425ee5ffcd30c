//! Full model assembly: backbone, PPM-FPN, auxiliary activation head,
//! IA-guided query selection, positional embeddings and the dual-path
//! decoder, with the routing trace needed to replay a forward pass along
//! the identical discrete branch.

use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, SourceLevel};
use crate::decoder::{DecoderOutputs, DualPathDecoder, FrozenMasks, LayerPrediction};
use crate::error::{Error, Result};
use crate::nn::{init_normal, VarStore};
use crate::pixel::{Backbone, PpmFpn};
use crate::query::{
    build_positional_embeddings, select_ia_queries, select_indices, ActivationMap, AuxClassHead,
    PositionalTables, QuerySelection,
};
use crate::rng::rng_for;
use crate::scenes::SceneSample;
use crate::tensor::{ops, Elem, Tensor};

/// Discrete routing decisions of one forward pass. Replaying them makes
/// the forward a smooth function of the parameters, which is what
/// finite-difference probes must differentiate.
#[derive(Clone, Default)]
pub struct RoutingTrace {
    pub ia_indices: Option<Vec<usize>>,
    pub masks: Option<FrozenMasks>,
}

/// Everything a forward pass produces that training, evaluation or
/// visualization consumes.
pub struct ModelOutputs<E: Elem> {
    pub activation: ActivationMap<E>,
    /// Pre-softmax activation logits `(P, K+1)` for the activation loss.
    pub activation_logits: Tensor<E>,
    pub selection: QuerySelection<E>,
    pub decoder: DecoderOutputs<E>,
    pub pixel_pos: Tensor<E>,
    pub query_pos: Tensor<E>,
    /// E3 grid extents (mask logits live on this grid).
    pub e3_hw: (usize, usize),
    /// Query-source grid extents (location costs live on this grid).
    pub src_hw: (usize, usize),
    /// Routing actually used, replayable via `RoutingTrace`.
    pub routing: RoutingTrace,
}

impl<E: Elem> ModelOutputs<E> {
    pub fn final_prediction(&self) -> &LayerPrediction<E> {
        self.decoder.predictions.last().expect("D+1 predictions")
    }
}

pub struct FastInst<E: Elem> {
    pub vs: VarStore<E>,
    backbone: Backbone<E>,
    fpn: PpmFpn<E>,
    aux_head: AuxClassHead<E>,
    tables: PositionalTables<E>,
    aux_query_feat: Tensor<E>,
    pub decoder: DualPathDecoder<E>,
    pub cfg: RunConfig,
    pub num_classes: usize,
}

impl<E: Elem> FastInst<E> {
    /// Build and initialize from the config; `seed` fixes every draw.
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut vs = VarStore::new();
        let mut rng: ChaCha8Rng = rng_for(seed, "init", 0);
        let dim = cfg.pixel.dim;
        let num_classes = cfg.dataset.num_classes;
        let backbone = Backbone::new(&mut vs, &mut rng, dim);
        let fpn = PpmFpn::new(&mut vs, &mut rng, &cfg.pixel, backbone.channels);
        let aux_head = AuxClassHead::new(&mut vs, &mut rng, dim, num_classes);
        let tables = PositionalTables::new(&mut vs, &mut rng, &cfg.query, dim);
        let aux_query_feat = init_normal(
            &mut vs,
            &mut rng,
            "aux_queries.feat",
            &[cfg.query.nb.max(1), dim],
            0.02,
        );
        let decoder = DualPathDecoder::new(
            &mut vs,
            &mut rng,
            &cfg.decoder,
            dim,
            num_classes,
            cfg.query.na,
            cfg.query.nb,
        );
        Ok(FastInst {
            vs,
            backbone,
            fpn,
            aux_head,
            tables,
            aux_query_feat,
            decoder,
            cfg: cfg.clone(),
            num_classes,
        })
    }

    /// Named parameter groups, used by the optimizer (backbone LR
    /// multiplier) and by per-group gradient checks.
    pub fn param_groups(&self) -> Vec<(String, Vec<(String, Tensor<E>)>)> {
        let mut groups = vec![
            ("backbone".to_string(), self.vs.group("backbone.")),
            ("fpn".to_string(), self.vs.group("fpn.")),
            ("aux_head".to_string(), self.vs.group("aux_head.")),
            ("pos".to_string(), self.vs.group("pos.")),
            ("aux_queries".to_string(), self.vs.group("aux_queries.")),
        ];
        for l in 1..=self.decoder.depth() {
            groups.push((
                format!("decoder.layer{l}"),
                self.vs.group(&format!("decoder.layer{l}.")),
            ));
        }
        for l in 0..=self.decoder.depth() {
            groups.push((
                format!("heads.layer{l}"),
                self.vs.group(&format!("heads.layer{l}.")),
            ));
        }
        groups.retain(|(_, params)| !params.is_empty());
        groups
    }

    pub fn image_tensor(&self, sample: &SceneSample) -> Result<Tensor<E>> {
        Tensor::from_vec(
            sample.image.iter().map(|&v| E::from_f64(v as f64)).collect(),
            &[3, sample.h, sample.w],
        )
    }

    /// Full forward pass. `routing` replays the recorded discrete choices
    /// (query selection, attention masks) of an earlier pass.
    pub fn forward(&self, image: &Tensor<E>, routing: Option<&RoutingTrace>) -> Result<ModelOutputs<E>> {
        let c = self.backbone.forward(image)?;
        let e = self.fpn.forward(&c)?;
        let (src_idx, src_hw) = match self.cfg.query.source_level {
            SourceLevel::E3 => (0usize, e.hw(0)),
            SourceLevel::E4 => (1, e.hw(1)),
            SourceLevel::E5 => (2, e.hw(2)),
        };
        let source = &e.levels[src_idx];
        let activation = self.aux_head.forward(source)?;
        let activation_logits = self.aux_head.forward_logits(source)?;

        let na = self.cfg.query.na;
        let selection = match routing.and_then(|r| r.ia_indices.as_ref()) {
            Some(indices) => {
                let rows = ops::chw_to_lc(source)?;
                let embeddings = ops::select_rows(&rows, indices)?;
                let w = src_hw.1;
                QuerySelection {
                    indices: indices.clone(),
                    locations: indices.iter().map(|&i| (i % w, i / w)).collect(),
                    embeddings,
                }
            }
            None => select_ia_queries(&activation, source, na)?,
        };

        let nb = self.cfg.query.nb;
        let q0 = if nb > 0 {
            let aux = ops::narrow_rows(&self.aux_query_feat, 0, nb)?;
            ops::concat_rows(&selection.embeddings, &aux)?
        } else {
            selection.embeddings.clone()
        };

        let e3_hw = e.hw(0);
        let (pixel_pos, query_pos) = build_positional_embeddings(
            &self.tables,
            self.cfg.query.pos,
            e3_hw,
            src_hw,
            &selection.locations,
            nb,
        )?;

        let x0 = ops::chw_to_lc(&e.levels[0])?;
        let decoder = self.decoder.forward(
            x0,
            q0,
            &pixel_pos,
            &query_pos,
            routing.and_then(|r| r.masks.as_ref()),
        )?;

        let routing_used = RoutingTrace {
            ia_indices: Some(selection.indices.clone()),
            masks: Some(decoder.masks.clone()),
        };
        Ok(ModelOutputs {
            activation,
            activation_logits,
            selection,
            decoder,
            pixel_pos,
            query_pos,
            e3_hw,
            src_hw,
            routing: routing_used,
        })
    }

    /// Training-only guided re-forward of decoder layer `l` under the
    /// final matching; see `DualPathDecoder::gt_guided_forward`.
    pub fn gt_guided_forward(
        &self,
        outputs: &ModelOutputs<E>,
        l: usize,
        pairs: &[(usize, usize)],
        gt_masks_e3: &[crate::scenes::Mask],
    ) -> Result<LayerPrediction<E>> {
        let (x_l, q_l) = outputs
            .decoder
            .states
            .get(l)
            .ok_or_else(|| Error::invalid(format!("gt_guided_forward: no state for layer {l}")))?;
        self.decoder.gt_guided_forward(
            l,
            x_l,
            q_l,
            &outputs.pixel_pos,
            &outputs.query_pos,
            pairs,
            gt_masks_e3,
        )
    }

    /// IA selection indices for an activation map (exposed for the
    /// query-distribution visualization).
    pub fn selection_for(&self, act: &ActivationMap<E>) -> Vec<usize> {
        select_indices(act, self.cfg.query.na)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn small_cfg(d: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.pixel.dim = 16;
        cfg.decoder.d = d;
        cfg.decoder.heads = 2;
        cfg.decoder.ffn_dim = 32;
        cfg.query.na = 6;
        cfg.query.nb = 2;
        cfg.dataset.height = 64;
        cfg.dataset.width = 64;
        cfg.aug.crop_h = 64;
        cfg.aug.crop_w = 64;
        cfg
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = small_cfg(1);
        let model = FastInst::<f64>::new(&cfg, 3).unwrap();
        let spec = crate::scenes::DatasetSpec {
            height: 64,
            width: 64,
            ..Default::default()
        };
        let sample = crate::scenes::generate_scene(&spec, 0).unwrap();
        let image = model.image_tensor(&sample).unwrap();
        let out = model.forward(&image, None).unwrap();
        assert_eq!(out.e3_hw, (8, 8));
        assert_eq!(out.src_hw, (4, 4));
        assert_eq!(out.decoder.predictions.len(), 2);
        assert_eq!(out.final_prediction().class_logits.shape(), &[6, 4]);
        assert_eq!(out.final_prediction().mask_logits.shape(), &[6, 64]);
        assert_eq!(out.selection.locations.len(), 6);

        // reforward with the recorded routing reproduces outputs exactly
        let out2 = model.forward(&image, Some(&out.routing)).unwrap();
        assert_eq!(
            out.final_prediction().mask_logits.to_vec(),
            out2.final_prediction().mask_logits.to_vec()
        );

        // same seed, fresh model: identical parameters and outputs
        let model2 = FastInst::<f64>::new(&cfg, 3).unwrap();
        let out3 = model2.forward(&image, None).unwrap();
        assert_eq!(
            out.final_prediction().class_logits.to_vec(),
            out3.final_prediction().class_logits.to_vec()
        );
    }

    #[test]
    fn changing_nb_leaves_ia_selection_unchanged() {
        let cfg_a = small_cfg(1);
        let mut cfg_b = small_cfg(1);
        cfg_b.query.nb = 5;
        let m_a = FastInst::<f64>::new(&cfg_a, 1).unwrap();
        let m_b = FastInst::<f64>::new(&cfg_b, 1).unwrap();
        // feed both the same pixel pipeline output by copying parameters
        for (name, t) in m_a.vs.iter() {
            if let Some(dst) = m_b.vs.get(name) {
                if dst.numel() == t.numel() {
                    dst.set_data(&t.to_vec());
                }
            }
        }
        let spec = crate::scenes::DatasetSpec {
            height: 64,
            width: 64,
            ..Default::default()
        };
        let sample = crate::scenes::generate_scene(&spec, 1).unwrap();
        let out_a = m_a.forward(&m_a.image_tensor(&sample).unwrap(), None).unwrap();
        let out_b = m_b.forward(&m_b.image_tensor(&sample).unwrap(), None).unwrap();
        assert_eq!(out_a.selection.indices, out_b.selection.indices);
    }

    #[test]
    fn d_zero_and_d_three_prediction_counts() {
        let spec = crate::scenes::DatasetSpec {
            height: 64,
            width: 64,
            ..Default::default()
        };
        let sample = crate::scenes::generate_scene(&spec, 2).unwrap();
        for d in [0usize, 3] {
            let cfg = small_cfg(d);
            let model = FastInst::<f32>::new(&cfg, 0).unwrap();
            let out = model
                .forward(&model.image_tensor(&sample).unwrap(), None)
                .unwrap();
            assert_eq!(out.decoder.predictions.len(), d + 1);
        }
    }

    #[test]
    fn source_level_e3_and_e5() {
        let spec = crate::scenes::DatasetSpec {
            height: 64,
            width: 64,
            ..Default::default()
        };
        let sample = crate::scenes::generate_scene(&spec, 3).unwrap();
        for (level, hw) in [(SourceLevel::E3, (8, 8)), (SourceLevel::E5, (2, 2))] {
            let mut cfg = small_cfg(1);
            cfg.query.source_level = level;
            cfg.query.na = 4;
            let model = FastInst::<f32>::new(&cfg, 0).unwrap();
            let out = model
                .forward(&model.image_tensor(&sample).unwrap(), None)
                .unwrap();
            assert_eq!(out.src_hw, hw);
            assert_eq!(out.activation.h * out.activation.w, hw.0 * hw.1);
        }
    }
}
