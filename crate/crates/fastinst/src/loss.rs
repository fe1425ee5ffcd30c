//! Set-prediction losses: Hungarian assignment with the binary location
//! cost, the instance activation loss, the deeply supervised prediction
//! loss, the GT mask-guided loss, and their sum.

use crate::config::LossConfig;
use crate::decoder::LayerPrediction;
use crate::error::{Error, Result};
use crate::matching::{hungarian_match, MatchingAssignment};
use crate::model::{FastInst, ModelOutputs};
use crate::scenes::{Mask, SceneSample};
use crate::tensor::{ops, Elem, Tensor};

/// Ground-truth targets resampled onto the grids the losses live on.
pub struct PreparedTargets {
    /// Class ids in `1..=K`, one per instance.
    pub class_ids: Vec<usize>,
    /// Mask-loss targets: area-average > 0.5 downsample to E3, as 0/1.
    pub masks_e3_loss: Vec<Vec<f64>>,
    /// Attention-mask targets: max-pool downsample to E3.
    pub masks_e3_attn: Vec<Mask>,
    /// Location-cost targets: max-pool downsample to the query source grid.
    pub masks_src: Vec<Mask>,
}

impl PreparedTargets {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

pub fn prepare_targets(
    sample: &SceneSample,
    e3_hw: (usize, usize),
    src_hw: (usize, usize),
) -> PreparedTargets {
    let mut class_ids = Vec::with_capacity(sample.instances.len());
    let mut masks_e3_loss = Vec::with_capacity(sample.instances.len());
    let mut masks_e3_attn = Vec::with_capacity(sample.instances.len());
    let mut masks_src = Vec::with_capacity(sample.instances.len());
    for inst in &sample.instances {
        class_ids.push(inst.class_id);
        masks_e3_loss.push(inst.mask.downsample_majority(e3_hw.0, e3_hw.1).to_f64s());
        masks_e3_attn.push(inst.mask.downsample_max(e3_hw.0, e3_hw.1));
        masks_src.push(inst.mask.downsample_max(src_hw.0, src_hw.1));
    }
    PreparedTargets {
        class_ids,
        masks_e3_loss,
        masks_e3_attn,
        masks_src,
    }
}

/// Binary location cost: 0 iff the source-grid cell lies inside the
/// target's max-pool-downsampled mask, else 1.
pub fn location_cost(cell: (usize, usize), target_mask_src: &Mask) -> f64 {
    let (x, y) = cell;
    if target_mask_src.get(y, x) {
        0.0
    } else {
        1.0
    }
}

// ── raw (graph-free) loss kernels for matching costs ────────────────

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean stable BCE-with-logits.
pub fn bce_mean_raw(logits: &[f64], targets: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&x, &z)| x.max(0.0) - x * z + (1.0 + (-x.abs()).exp()).ln())
        .sum::<f64>()
        / n
}

/// Dice loss `1 - (2|A.B| + 1) / (|A| + |B| + 1)` on sigmoid probabilities.
pub fn dice_loss_raw(logits: &[f64], targets: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&x, &z) in logits.iter().zip(targets) {
        let p = sigmoid_f64(x);
        inter += p * z;
        psum += p;
        gsum += z;
    }
    1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0)
}

fn softmax_rows_f64(logits: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let mut z = 0.0;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mx).exp();
            z += *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= z;
        }
    }
    out
}

// ── graph-side dice ─────────────────────────────────────────────────

/// Differentiable dice loss of one mask-logit row against a 0/1 target.
fn dice_loss_graph<E: Elem>(logits: &Tensor<E>, target: &[f64]) -> Result<Tensor<E>> {
    let gsum: f64 = target.iter().sum();
    let tgt = Tensor::from_vec(
        target.iter().map(|&v| E::from_f64(v)).collect(),
        logits.shape(),
    )?;
    let p = ops::sigmoid(logits);
    let inter = ops::sum_all(&ops::mul(&p, &tgt)?)?;
    let psum = ops::sum_all(&p)?;
    let num = ops::add_scalar(&ops::mul_scalar(&inter, E::from_f64(2.0)), E::ONE);
    let den = ops::add_scalar(&psum, E::from_f64(gsum + 1.0));
    let one = Tensor::scalar(E::ONE);
    ops::sub(&one, &ops::div(&num, &den)?)
}

// ── instance activation loss ────────────────────────────────────────

pub struct ActivationLoss<E: Elem> {
    pub loss: Tensor<E>,
    pub assignment: MatchingAssignment,
    /// Total weighted location cost of the chosen matching (diagnostic).
    pub loc_cost: f64,
}

/// Hungarian-matched cross entropy over every source-grid pixel. The
/// matching cost per (pixel, target) is `-p_{pixel, class(target)}` plus
/// the weighted location cost; matched pixels supervise their instance
/// class, all others the no-object class at `no_object_weight`.
///
/// With `use_bipartite = false` the assignment is fixed per pixel from the
/// semantic class labels instead (earliest instance covering the cell).
pub fn instance_activation_loss<E: Elem>(
    activation_logits: &Tensor<E>,
    targets: &PreparedTargets,
    src_hw: (usize, usize),
    cfg: &LossConfig,
    frozen: Option<&MatchingAssignment>,
) -> Result<ActivationLoss<E>> {
    let (p, cols) = match activation_logits.shape() {
        [p, c] => (*p, *c),
        s => return Err(Error::shape(format!("activation loss: logits {s:?}"))),
    };
    let k = cols - 1;
    let (hs, ws) = src_hw;
    if p != hs * ws {
        return Err(Error::shape(format!(
            "activation loss: {p} pixels vs {hs}x{ws} grid"
        )));
    }
    let nobj = targets.len();

    let mut ce_targets = vec![k; p]; // no-object column
    let mut ce_weights = vec![E::from_f64(cfg.no_object_weight); p];
    let mut assignment = MatchingAssignment::empty();
    let mut loc_cost = 0.0;

    if cfg.use_bipartite {
        if nobj > 0 {
            assignment = match frozen {
                Some(a) => a.clone(),
                None => {
                    let probs = softmax_rows_f64(
                        &activation_logits.to_vec().iter().map(|v| v.to_f64()).collect::<Vec<_>>(),
                        p,
                        cols,
                    );
                    let mut cost = vec![0.0f64; p * nobj];
                    for i in 0..p {
                        let cell = (i % ws, i / ws);
                        for (j, (&cj, mask)) in targets
                            .class_ids
                            .iter()
                            .zip(targets.masks_src.iter())
                            .enumerate()
                        {
                            let mut c = -probs[i * cols + (cj - 1)];
                            if cfg.use_location_cost {
                                c += cfg.lambda_loc * location_cost(cell, mask);
                            }
                            cost[i * nobj + j] = c;
                        }
                    }
                    hungarian_match(&cost, p, nobj)?
                }
            };
            for &(i, j) in &assignment.pairs {
                ce_targets[i] = targets.class_ids[j] - 1;
                ce_weights[i] = E::ONE;
                if cfg.use_location_cost {
                    loc_cost += cfg.lambda_loc
                        * location_cost((i % ws, i / ws), &targets.masks_src[j]);
                }
            }
        }
    } else {
        // fixed per-pixel semantic targets: earliest instance covering the
        // cell wins
        for i in 0..p {
            let cell = (i % ws, i / ws);
            for (j, mask) in targets.masks_src.iter().enumerate() {
                if mask.get(cell.1, cell.0) {
                    ce_targets[i] = targets.class_ids[j] - 1;
                    ce_weights[i] = E::ONE;
                    break;
                }
            }
        }
    }

    let ce = ops::cross_entropy_rows(activation_logits, &ce_targets, &ce_weights)?;
    let loss = ops::mul_scalar(&ce, E::from_f64(cfg.lambda_cls_q));
    Ok(ActivationLoss {
        loss,
        assignment,
        loc_cost,
    })
}

// ── prediction loss (deep supervision) ──────────────────────────────

pub struct PredictionLoss<E: Elem> {
    pub loss: Tensor<E>,
    pub per_layer: Vec<f64>,
    pub assignments: Vec<MatchingAssignment>,
    pub loc_cost: f64,
}

impl<E: Elem> PredictionLoss<E> {
    /// The last layer's matching, fixed for GT-guided supervision.
    pub fn final_assignment(&self) -> &MatchingAssignment {
        self.assignments.last().expect("at least layer 0")
    }
}

/// Matching cost matrix for one layer's predictions (detached values).
fn layer_cost_matrix<E: Elem>(
    pred: &LayerPrediction<E>,
    locations: &[(usize, usize)],
    targets: &PreparedTargets,
    cfg: &LossConfig,
) -> Vec<f64> {
    let (na, cols) = (pred.class_logits.shape()[0], pred.class_logits.shape()[1]);
    let l = pred.mask_logits.shape()[1];
    let nobj = targets.len();
    let class_logits: Vec<f64> = pred.class_logits.to_vec().iter().map(|v| v.to_f64()).collect();
    let probs = softmax_rows_f64(&class_logits, na, cols);
    let mask_logits: Vec<f64> = pred.mask_logits.to_vec().iter().map(|v| v.to_f64()).collect();
    let mut cost = vec![0.0f64; na * nobj];
    for q in 0..na {
        let mrow = &mask_logits[q * l..(q + 1) * l];
        for j in 0..nobj {
            let cj = targets.class_ids[j];
            let mut c = cfg.lambda_cls * (-probs[q * cols + (cj - 1)])
                + cfg.lambda_ce * bce_mean_raw(mrow, &targets.masks_e3_loss[j])
                + cfg.lambda_dice * dice_loss_raw(mrow, &targets.masks_e3_loss[j]);
            if cfg.use_location_cost {
                c += cfg.lambda_loc * location_cost(locations[q], &targets.masks_src[j]);
            }
            cost[q * nobj + j] = c;
        }
    }
    cost
}

/// One layer's loss under a given assignment: mask BCE and dice summed
/// over matched pairs (normalized by the target count) plus the weighted
/// classification cross entropy over every IA query.
fn layer_loss_under_assignment<E: Elem>(
    pred: &LayerPrediction<E>,
    assignment: &MatchingAssignment,
    targets: &PreparedTargets,
    cfg: &LossConfig,
) -> Result<Tensor<E>> {
    let (na, cols) = (pred.class_logits.shape()[0], pred.class_logits.shape()[1]);
    let k = cols - 1;
    let l = pred.mask_logits.shape()[1];
    let nobj = targets.len();

    let mut ce_targets = vec![k; na];
    let mut ce_weights = vec![E::from_f64(cfg.no_object_weight); na];
    let mut mask_terms: Option<Tensor<E>> = None;
    for &(q, j) in &assignment.pairs {
        if q >= na || j >= nobj {
            return Err(Error::invalid(format!(
                "assignment pair ({q},{j}) out of range ({na} queries, {nobj} targets)"
            )));
        }
        ce_targets[q] = targets.class_ids[j] - 1;
        ce_weights[q] = E::ONE;
        let row = ops::narrow_rows(&pred.mask_logits, q, 1)?;
        let tgt = &targets.masks_e3_loss[j];
        debug_assert_eq!(tgt.len(), l);
        let bce = ops::bce_with_logits_mean(
            &row,
            &tgt.iter().map(|&v| E::from_f64(v)).collect::<Vec<_>>(),
        )?;
        let dice = dice_loss_graph(&row, tgt)?;
        let term = ops::add(
            &ops::mul_scalar(&bce, E::from_f64(cfg.lambda_ce)),
            &ops::mul_scalar(&dice, E::from_f64(cfg.lambda_dice)),
        )?;
        mask_terms = Some(match mask_terms {
            Some(acc) => ops::add(&acc, &term)?,
            None => term,
        });
    }

    let ce = ops::cross_entropy_rows(&pred.class_logits, &ce_targets, &ce_weights)?;
    let mut loss = ops::mul_scalar(&ce, E::from_f64(cfg.lambda_cls));
    if let Some(terms) = mask_terms {
        loss = ops::add(
            &loss,
            &ops::mul_scalar(&terms, E::from_f64(1.0 / nobj.max(1) as f64)),
        )?;
    }
    Ok(loss)
}

/// Deep-supervised prediction loss: per layer, a Hungarian matching on
/// class, mask and location costs, then the layer loss under that
/// assignment; the total is the sum over layers 0..=D. Returns every
/// layer's assignment (the last one feeds GT-guided supervision).
pub fn prediction_loss<E: Elem>(
    preds: &[LayerPrediction<E>],
    locations: &[(usize, usize)],
    targets: &PreparedTargets,
    cfg: &LossConfig,
    frozen: Option<&[MatchingAssignment]>,
) -> Result<PredictionLoss<E>> {
    let nobj = targets.len();
    let mut total: Option<Tensor<E>> = None;
    let mut per_layer = Vec::with_capacity(preds.len());
    let mut assignments = Vec::with_capacity(preds.len());
    let mut loc_cost = 0.0;
    for (i, pred) in preds.iter().enumerate() {
        let assignment = if nobj == 0 {
            MatchingAssignment::empty()
        } else {
            match frozen {
                Some(f) => f
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid("frozen assignments shorter than layers"))?,
                None => {
                    let cost = layer_cost_matrix(pred, locations, targets, cfg);
                    hungarian_match(&cost, pred.class_logits.shape()[0], nobj)?
                }
            }
        };
        if cfg.use_location_cost {
            for &(q, j) in &assignment.pairs {
                loc_cost += cfg.lambda_loc * location_cost(locations[q], &targets.masks_src[j]);
            }
        }
        let layer = layer_loss_under_assignment(pred, &assignment, targets, cfg)?;
        per_layer.push(layer.item().to_f64());
        assignments.push(assignment);
        total = Some(match total {
            Some(acc) => ops::add(&acc, &layer)?,
            None => layer,
        });
    }
    Ok(PredictionLoss {
        loss: total.expect("at least one layer prediction"),
        per_layer,
        assignments,
        loc_cost,
    })
}

/// Per-pair contribution of matching query `q` to target `j` in the layer
/// loss, relative to leaving `q` unmatched. The layer loss under any full
/// assignment equals a constant plus the sum of these, so a Hungarian run
/// on this matrix minimizes the layer loss itself (used by the
/// fixed-matching optimality checks).
pub fn pairwise_loss_cost<E: Elem>(
    pred: &LayerPrediction<E>,
    targets: &PreparedTargets,
    cfg: &LossConfig,
) -> Vec<f64> {
    let (na, cols) = (pred.class_logits.shape()[0], pred.class_logits.shape()[1]);
    let k = cols - 1;
    let l = pred.mask_logits.shape()[1];
    let nobj = targets.len();
    let class_logits: Vec<f64> = pred.class_logits.to_vec().iter().map(|v| v.to_f64()).collect();
    let mask_logits: Vec<f64> = pred.mask_logits.to_vec().iter().map(|v| v.to_f64()).collect();
    let matched = na.min(nobj) as f64;
    let weight_sum = matched + cfg.no_object_weight * (na as f64 - matched);
    let mut cost = vec![0.0f64; na * nobj];
    for q in 0..na {
        let row = &class_logits[q * cols..(q + 1) * cols];
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let log_z = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        let nll = |c: usize| log_z - row[c];
        let mrow = &mask_logits[q * l..(q + 1) * l];
        for j in 0..nobj {
            let cj = targets.class_ids[j] - 1;
            cost[q * nobj + j] = cfg.lambda_ce * bce_mean_raw(mrow, &targets.masks_e3_loss[j])
                / nobj.max(1) as f64
                + cfg.lambda_dice * dice_loss_raw(mrow, &targets.masks_e3_loss[j])
                    / nobj.max(1) as f64
                + cfg.lambda_cls * (nll(cj) - cfg.no_object_weight * nll(k)) / weight_sum;
        }
    }
    cost
}

// ── GT mask-guided loss ─────────────────────────────────────────────

/// Same per-layer structure as the prediction loss, but over the guided
/// re-forward outputs of layers 1..=D with the assignment fixed to the
/// final layer's matching (no re-matching).
pub fn gt_guided_loss<E: Elem>(
    guided_preds: &[LayerPrediction<E>],
    sigma: &MatchingAssignment,
    targets: &PreparedTargets,
    cfg: &LossConfig,
) -> Result<(Tensor<E>, Vec<f64>)> {
    for &(q, j) in &sigma.pairs {
        if j >= targets.len() {
            return Err(Error::invalid(format!(
                "gt_guided_loss: assignment target {j} out of {} targets",
                targets.len()
            )));
        }
        let _ = q;
    }
    let mut total: Option<Tensor<E>> = None;
    let mut per_layer = Vec::with_capacity(guided_preds.len());
    for pred in guided_preds {
        let layer = layer_loss_under_assignment(pred, sigma, targets, cfg)?;
        per_layer.push(layer.item().to_f64());
        total = Some(match total {
            Some(acc) => ops::add(&acc, &layer)?,
            None => layer,
        });
    }
    let total = match total {
        Some(t) => t,
        None => Tensor::scalar(E::ZERO), // D = 0: no guided layers
    };
    Ok((total, per_layer))
}

// ── total objective ─────────────────────────────────────────────────

/// Matching decisions of one loss evaluation, replayable so that probe
/// re-evaluations follow the identical assignments.
#[derive(Clone, Default)]
pub struct FrozenAssignments {
    pub activation: Option<MatchingAssignment>,
    pub prediction: Option<Vec<MatchingAssignment>>,
}

pub struct SampleLoss<E: Elem> {
    pub total: Tensor<E>,
    pub ia: f64,
    pub pred: f64,
    pub gt: f64,
    pub loc_cost_ia: f64,
    pub loc_cost_pred: f64,
    pub num_targets: usize,
    pub frozen: FrozenAssignments,
}

/// The overall training objective for one sample: instance activation
/// loss + prediction loss + GT mask-guided loss (when enabled). Runs the
/// guided re-forward of every decoder layer under the final matching.
pub fn total_loss<E: Elem>(
    model: &FastInst<E>,
    outputs: &ModelOutputs<E>,
    sample: &SceneSample,
    frozen: Option<&FrozenAssignments>,
) -> Result<SampleLoss<E>> {
    let cfg = &model.cfg.loss;
    let targets = prepare_targets(sample, outputs.e3_hw, outputs.src_hw);

    let act = instance_activation_loss(
        &outputs.activation_logits,
        &targets,
        outputs.src_hw,
        cfg,
        frozen.and_then(|f| f.activation.as_ref()),
    )?;
    let pred = prediction_loss(
        &outputs.decoder.predictions,
        &outputs.selection.locations,
        &targets,
        cfg,
        frozen.and_then(|f| f.prediction.as_deref()),
    )?;

    let mut total = ops::add(&act.loss, &pred.loss)?;
    let mut gt_value = 0.0;
    if cfg.use_gt_guidance && model.decoder.depth() > 0 {
        let sigma = pred.final_assignment().clone();
        let mut guided_preds = Vec::with_capacity(model.decoder.depth());
        for l in 1..=model.decoder.depth() {
            guided_preds.push(model.gt_guided_forward(
                outputs,
                l,
                &sigma.pairs,
                &targets.masks_e3_attn,
            )?);
        }
        let (guided, _) = gt_guided_loss(&guided_preds, &sigma, &targets, cfg)?;
        gt_value = guided.item().to_f64();
        total = ops::add(&total, &guided)?;
    }

    Ok(SampleLoss {
        ia: act.loss.item().to_f64(),
        pred: pred.loss.item().to_f64(),
        gt: gt_value,
        loc_cost_ia: act.loc_cost,
        loc_cost_pred: pred.loc_cost,
        num_targets: targets.len(),
        frozen: FrozenAssignments {
            activation: Some(act.assignment),
            prediction: Some(pred.assignments),
        },
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::brute_force_match;
    use crate::rng::rng_for;
    use rand::Rng;

    fn mask_from_bits(bits: &[u8], h: usize, w: usize) -> Mask {
        Mask {
            h,
            w,
            data: bits.iter().map(|&b| b != 0).collect(),
        }
    }

    fn loss_cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn location_cost_definition() {
        let mask = mask_from_bits(&[0, 1, 0, 0], 2, 2);
        assert_eq!(location_cost((1, 0), &mask), 0.0); // inside
        assert_eq!(location_cost((0, 0), &mask), 1.0); // outside
    }

    #[test]
    fn location_cost_single_fine_pixel_survives_maxpool() {
        // one positive pixel in a 4x4 block: the covering cell is inside
        // under the max-pool rule
        let mut fine = Mask::zeros(8, 8);
        fine.data[2 * 8 + 3] = true; // inside top-left 4x4 block
        let coarse = fine.downsample_max(2, 2);
        assert_eq!(location_cost((0, 0), &coarse), 0.0);
        assert_eq!(location_cost((1, 0), &coarse), 1.0);
        assert_eq!(location_cost((0, 1), &coarse), 1.0);
    }

    fn simple_targets(src_hw: (usize, usize), e3_hw: (usize, usize)) -> PreparedTargets {
        // one target occupying the top-left quadrant
        let (hs, ws) = src_hw;
        let mut src = Mask::zeros(hs, ws);
        for y in 0..hs / 2 {
            for x in 0..ws / 2 {
                src.data[y * ws + x] = true;
            }
        }
        let (h3, w3) = e3_hw;
        let mut e3 = vec![0.0; h3 * w3];
        let mut e3m = Mask::zeros(h3, w3);
        for y in 0..h3 / 2 {
            for x in 0..w3 / 2 {
                e3[y * w3 + x] = 1.0;
                e3m.data[y * w3 + x] = true;
            }
        }
        PreparedTargets {
            class_ids: vec![1],
            masks_e3_loss: vec![e3],
            masks_e3_attn: vec![e3m],
            masks_src: vec![src],
        }
    }

    #[test]
    fn activation_matching_prefers_inside_pixel_with_dominant_loc_cost() {
        // 3x3 grid, K=1: one pixel inside the target with p = 0.99 for its
        // class; lambda_loc dominates so that pixel must be matched
        let (hs, ws) = (3, 3);
        let mut src = Mask::zeros(hs, ws);
        src.data[4] = true; // center cell only
        let targets = PreparedTargets {
            class_ids: vec![1],
            masks_e3_loss: vec![vec![0.0; 4]],
            masks_e3_attn: vec![Mask::zeros(2, 2)],
            masks_src: vec![src],
        };
        // logits: outside pixels adore class 1 even more, but location cost
        // dominates
        let mut logits = vec![0.0f64; 9 * 2];
        for i in 0..9 {
            logits[i * 2] = if i == 4 { 4.6 } else { 6.0 }; // p~0.99 center
            logits[i * 2 + 1] = 0.0;
        }
        let t = Tensor::from_vec(logits, &[9, 2]).unwrap();
        let out = instance_activation_loss(&t, &targets, (hs, ws), &loss_cfg(), None).unwrap();
        assert_eq!(out.assignment.pairs, vec![(4, 0)]);
        assert_eq!(out.loc_cost, 0.0);
    }

    #[test]
    fn perfect_activation_predictions_drive_ce_to_zero() {
        let (hs, ws) = (2, 2);
        let mut src = Mask::zeros(hs, ws);
        src.data[0] = true;
        let targets = PreparedTargets {
            class_ids: vec![2],
            masks_e3_loss: vec![vec![1.0; 1]],
            masks_e3_attn: vec![mask_from_bits(&[1], 1, 1)],
            masks_src: vec![src],
        };
        // pixel 0: saturated class-2; others saturated no-object (K=2)
        let mut logits = vec![0.0f64; 4 * 3];
        logits[0 * 3 + 1] = 50.0;
        for i in 1..4 {
            logits[i * 3 + 2] = 50.0;
        }
        let t = Tensor::from_vec(logits, &[4, 3]).unwrap();
        let out = instance_activation_loss(&t, &targets, (hs, ws), &loss_cfg(), None).unwrap();
        assert!(out.loss.item() < 1e-10, "{}", out.loss.item());
    }

    #[test]
    fn activation_matching_equals_brute_force_5x5_two_targets() {
        let (hs, ws) = (5, 5);
        let mut src_a = Mask::zeros(hs, ws);
        let mut src_b = Mask::zeros(hs, ws);
        for y in 0..2 {
            for x in 0..2 {
                src_a.data[y * ws + x] = true;
                src_b.data[(y + 3) * ws + (x + 3)] = true;
            }
        }
        let targets = PreparedTargets {
            class_ids: vec![1, 3],
            masks_e3_loss: vec![vec![0.0; 4], vec![0.0; 4]],
            masks_e3_attn: vec![Mask::zeros(2, 2), Mask::zeros(2, 2)],
            masks_src: vec![src_a.clone(), src_b.clone()],
        };
        let mut rng = rng_for(4, "actloss", 0);
        let logits: Vec<f64> = (0..25 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = Tensor::from_vec(logits.clone(), &[25, 4]).unwrap();
        let cfg = loss_cfg();
        let out = instance_activation_loss(&t, &targets, (hs, ws), &cfg, None).unwrap();
        // rebuild the full cost matrix and brute-force it
        let probs = softmax_rows_f64(&logits, 25, 4);
        let mut cost = vec![0.0; 25 * 2];
        for i in 0..25 {
            for (j, (cid, m)) in [(0usize, &src_a), (1, &src_b)]
                .iter()
                .map(|&(j, m)| (targets.class_ids[j], m))
                .enumerate()
            {
                cost[i * 2 + j] = -probs[i * 4 + (cid - 1)]
                    + cfg.lambda_loc * location_cost((i % ws, i / ws), m);
            }
        }
        let brute = brute_force_match(&cost, 25, 2);
        assert_eq!(out.assignment.pairs, brute.pairs);
        assert!((out.assignment.total_cost - brute.total_cost).abs() < 1e-9);
    }

    #[test]
    fn semantic_fallback_assigns_by_coverage() {
        let (hs, ws) = (2, 2);
        let mut src = Mask::zeros(hs, ws);
        src.data[1] = true;
        let targets = PreparedTargets {
            class_ids: vec![2],
            masks_e3_loss: vec![vec![0.0; 1]],
            masks_e3_attn: vec![Mask::zeros(1, 1)],
            masks_src: vec![src],
        };
        let mut cfg = loss_cfg();
        cfg.use_bipartite = false;
        // saturated correct predictions: pixel 1 class 2, others no-object
        let mut logits = vec![0.0f64; 4 * 3];
        logits[1 * 3 + 1] = 50.0;
        for i in [0usize, 2, 3] {
            logits[i * 3 + 2] = 50.0;
        }
        let t = Tensor::from_vec(logits, &[4, 3]).unwrap();
        let out = instance_activation_loss(&t, &targets, (hs, ws), &cfg, None).unwrap();
        assert!(out.loss.item() < 1e-10);
        assert!(out.assignment.pairs.is_empty());
    }

    fn pred_from(class_logits: Vec<f64>, mask_logits: Vec<f64>, na: usize, k: usize, l: usize) -> LayerPrediction<f64> {
        LayerPrediction {
            class_logits: Tensor::from_vec(class_logits, &[na, k + 1]).unwrap(),
            mask_logits: Tensor::from_vec(mask_logits, &[na, l]).unwrap(),
            layer_index: 0,
        }
    }

    #[test]
    fn perfect_prediction_loss_is_tiny() {
        // one target, one query with saturated correct class and mask
        let targets = simple_targets((4, 4), (4, 4));
        let l = 16;
        let mut class_logits = vec![0.0; 2];
        class_logits[0] = 50.0; // class 1
        let mask_logits: Vec<f64> = targets.masks_e3_loss[0]
            .iter()
            .map(|&v| if v > 0.5 { 50.0 } else { -50.0 })
            .collect();
        let pred = pred_from(class_logits, mask_logits.clone(), 1, 1, l);
        let cfg = loss_cfg();
        let out = prediction_loss(&[pred], &[(0, 0)], &targets, &cfg, None).unwrap();
        // dice bounded by the +1 smoothing: 1 - (2A+1)/(2A+1) = 0 for exact
        // saturated masks up to sigmoid saturation error
        let bce = bce_mean_raw(&mask_logits, &targets.masks_e3_loss[0]);
        assert!(bce < 1e-3);
        let dice = dice_loss_raw(&mask_logits, &targets.masks_e3_loss[0]);
        assert!(dice < 1e-3);
        assert!(out.loss.item() < 1e-2, "{}", out.loss.item());
    }

    #[test]
    fn dice_of_disjoint_masks_is_near_one() {
        let logits = vec![50.0, 50.0, -50.0, -50.0];
        let target = vec![0.0, 0.0, 1.0, 1.0];
        let d = dice_loss_raw(&logits, &target);
        assert!((d - (1.0 - 1.0 / 5.0)).abs() < 1e-6); // 1 - 1/(2+2+1)
        assert!(d > 0.75 && d <= 1.0);
    }

    #[test]
    fn dice_and_bce_ranges() {
        let mut rng = rng_for(8, "diceranges", 0);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let target: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let d = dice_loss_raw(&logits, &target);
            assert!((0.0..=1.0).contains(&d), "dice {d}");
            let b = bce_mean_raw(&logits, &target);
            assert!(b >= 0.0 && b.is_finite(), "bce {b}");
        }
    }

    #[test]
    fn per_layer_matchings_equal_exhaustive_optima() {
        // D=1 (two prediction sets), na=3, 2 targets
        let mut rng = rng_for(9, "predmatch", 0);
        let (hs, ws) = (4, 4);
        let mut src_a = Mask::zeros(hs, ws);
        let mut src_b = Mask::zeros(hs, ws);
        src_a.data[0] = true;
        src_b.data[15] = true;
        let mut e3_a = vec![0.0; 16];
        let mut e3_b = vec![0.0; 16];
        e3_a[0] = 1.0;
        e3_b[15] = 1.0;
        let targets = PreparedTargets {
            class_ids: vec![1, 2],
            masks_e3_loss: vec![e3_a, e3_b],
            masks_e3_attn: vec![Mask::zeros(4, 4), Mask::zeros(4, 4)],
            masks_src: vec![src_a, src_b],
        };
        let locations = vec![(0, 0), (3, 3), (2, 1)];
        let cfg = loss_cfg();
        for trial in 0..20 {
            let preds: Vec<LayerPrediction<f64>> = (0..2)
                .map(|_| {
                    pred_from(
                        (0..3 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                        (0..3 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                        3,
                        2,
                        16,
                    )
                })
                .collect();
            let out = prediction_loss(&preds, &locations, &targets, &cfg, None).unwrap();
            for (i, pred) in preds.iter().enumerate() {
                let cost = layer_cost_matrix(pred, &locations, &targets, &cfg);
                let brute = brute_force_match(&cost, 3, 2);
                assert_eq!(out.assignments[i].pairs, brute.pairs, "trial {trial} layer {i}");
            }
        }
    }

    #[test]
    fn zero_targets_gives_class_only_loss() {
        let targets = PreparedTargets {
            class_ids: vec![],
            masks_e3_loss: vec![],
            masks_e3_attn: vec![],
            masks_src: vec![],
        };
        let pred = pred_from(vec![0.0; 2 * 3], vec![0.0; 2 * 4], 2, 2, 4);
        let out = prediction_loss(&[pred], &[(0, 0), (1, 1)], &targets, &loss_cfg(), None).unwrap();
        assert!(out.assignments[0].pairs.is_empty());
        // uniform logits, all-no-object targets: CE = ln(3)
        let expect = 2.0 * (3f64).ln();
        assert!((out.loss.item() - expect).abs() < 1e-9);
    }

    #[test]
    fn matched_pixels_stay_inside_with_dominant_location_cost() {
        // with lambda_loc >= 2, no matched activation pixel lies outside
        // its target's downsampled mask unless the inside set is too small
        let mut rng = rng_for(10, "locdom", 0);
        for trial in 0..30 {
            let (hs, ws) = (4, 4);
            let nobj = rng.gen_range(1..=3);
            let mut masks = Vec::new();
            let mut class_ids = Vec::new();
            for _ in 0..nobj {
                let mut m = Mask::zeros(hs, ws);
                // random nonempty inside-set
                let count = rng.gen_range(1..5);
                for _ in 0..count {
                    let p = rng.gen_range(0..16);
                    m.data[p] = true;
                }
                masks.push(m);
                class_ids.push(rng.gen_range(1..=2));
            }
            let targets = PreparedTargets {
                class_ids,
                masks_e3_loss: vec![vec![0.0; 4]; nobj],
                masks_e3_attn: vec![Mask::zeros(2, 2); nobj],
                masks_src: masks.clone(),
            };
            let logits: Vec<f64> = (0..16 * 3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = Tensor::from_vec(logits, &[16, 3]).unwrap();
            let mut cfg = loss_cfg();
            cfg.lambda_loc = 2.0;
            let out = instance_activation_loss(&t, &targets, (hs, ws), &cfg, None).unwrap();
            // count demand per mask: 1 (each target matched once)
            for &(i, j) in &out.assignment.pairs {
                let inside = masks[j].get(i / ws, i % ws);
                if masks[j].area() >= 1 {
                    assert!(inside, "trial {trial}: pixel {i} outside target {j}");
                }
            }
        }
    }

    #[test]
    fn guided_loss_with_empty_sigma_is_pure_no_object() {
        let targets = PreparedTargets {
            class_ids: vec![],
            masks_e3_loss: vec![],
            masks_e3_attn: vec![],
            masks_src: vec![],
        };
        let pred = pred_from(vec![0.0; 2 * 3], vec![0.0; 2 * 4], 2, 2, 4);
        let (loss, _) = gt_guided_loss(
            &[pred],
            &MatchingAssignment::empty(),
            &targets,
            &loss_cfg(),
        )
        .unwrap();
        let expect = 2.0 * (3f64).ln();
        assert!((loss.item() - expect).abs() < 1e-9);
    }

    #[test]
    fn guided_loss_equals_final_layer_loss_on_identical_predictions() {
        let mut rng = rng_for(11, "guided-eq", 0);
        let targets = simple_targets((4, 4), (4, 4));
        let pred = pred_from(
            (0..3 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            3,
            1,
            16,
        );
        let cfg = loss_cfg();
        let locations = vec![(0, 0), (1, 1), (3, 3)];
        let out = prediction_loss(
            &[pred_clone(&pred)],
            &locations,
            &targets,
            &cfg,
            None,
        )
        .unwrap();
        let sigma = out.final_assignment().clone();
        let (guided, _) =
            gt_guided_loss(&[pred_clone(&pred)], &sigma, &targets, &cfg).unwrap();
        assert!((guided.item() - out.per_layer[0]).abs() < 1e-12);
    }

    fn pred_clone(p: &LayerPrediction<f64>) -> LayerPrediction<f64> {
        LayerPrediction {
            class_logits: Tensor::from_vec(p.class_logits.to_vec(), p.class_logits.shape())
                .unwrap(),
            mask_logits: Tensor::from_vec(p.mask_logits.to_vec(), p.mask_logits.shape()).unwrap(),
            layer_index: p.layer_index,
        }
    }

    #[test]
    fn fixed_sigma_loss_dominates_rematched_optimum() {
        // Hungarian on the pairwise-loss matrix minimizes the layer loss,
        // so any other valid sigma can only do worse
        let mut rng = rng_for(12, "fixopt", 0);
        let targets = simple_targets((4, 4), (4, 4));
        let cfg = loss_cfg();
        let mut strict = 0;
        for _ in 0..100 {
            let pred = pred_from(
                (0..3 * 2).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                (0..3 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                3,
                1,
                16,
            );
            let cost = pairwise_loss_cost(&pred, &targets, &cfg);
            let best = hungarian_match(&cost, 3, 1).unwrap();
            let (opt_loss, _) =
                gt_guided_loss(&[pred_clone(&pred)], &best, &targets, &cfg).unwrap();
            // a deliberately different assignment
            let other_q = (best.pairs[0].0 + 1) % 3;
            let other = MatchingAssignment {
                pairs: vec![(other_q, 0)],
                total_cost: 0.0,
            };
            let (other_loss, _) =
                gt_guided_loss(&[pred_clone(&pred)], &other, &targets, &cfg).unwrap();
            assert!(opt_loss.item() <= other_loss.item() + 1e-9);
            if other_loss.item() > opt_loss.item() + 1e-9 {
                strict += 1;
            }
        }
        assert!(strict > 0, "ties everywhere is implausible");
    }

    #[test]
    fn guided_loss_rejects_bad_target_index() {
        let targets = simple_targets((4, 4), (4, 4));
        let pred = pred_from(vec![0.0; 2], vec![0.0; 16], 1, 1, 16);
        let sigma = MatchingAssignment {
            pairs: vec![(0, 5)],
            total_cost: 0.0,
        };
        assert!(gt_guided_loss(&[pred], &sigma, &targets, &loss_cfg()).is_err());
    }
}
