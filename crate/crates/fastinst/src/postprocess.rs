//! Inference post-processing: turn the final layer prediction into scored
//! full-resolution detections. No NMS or duplicate suppression anywhere.

use crate::decoder::LayerPrediction;
use crate::error::{Error, Result};
use crate::scenes::Mask;
use crate::tensor::ops::bilinear_resize_plane;
use crate::tensor::Elem;

/// One scored instance prediction at full image resolution.
#[derive(Debug, Clone)]
pub struct Detection {
    /// Category in `1..=K`.
    pub class_id: usize,
    /// `class_prob * mask_score`, both factors in [0,1].
    pub score: f64,
    pub mask: Mask,
}

/// Per IA query: softmax the class logits; drop the query if the argmax
/// over all K+1 columns is no-object. Otherwise upsample its mask logits
/// bilinearly from the E3 grid to the image, threshold the sigmoid at 0.5
/// for the foreground, and score with class probability times the mean
/// foreground mask probability (0 if the foreground is empty). Sorted by
/// descending score; ties break by query index.
pub fn postprocess<E: Elem>(
    pred: &LayerPrediction<E>,
    e3_hw: (usize, usize),
    image_hw: (usize, usize),
) -> Result<Vec<Detection>> {
    let (na, cols) = match pred.class_logits.shape() {
        [na, c] => (*na, *c),
        s => return Err(Error::shape(format!("postprocess: class logits {s:?}"))),
    };
    let k = cols - 1;
    let (h3, w3) = e3_hw;
    let l = pred.mask_logits.shape()[1];
    if l != h3 * w3 {
        return Err(Error::shape(format!(
            "postprocess: {l} mask cells vs {h3}x{w3} E3 grid"
        )));
    }
    let (h, w) = image_hw;
    let class_logits = pred.class_logits.to_vec();
    let mask_logits = pred.mask_logits.to_vec();

    let mut detections: Vec<(usize, Detection)> = Vec::new();
    for q in 0..na {
        let row: Vec<f64> = class_logits[q * cols..(q + 1) * cols]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let probs: Vec<f64> = row.iter().map(|v| (v - mx).exp() / z).collect();
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if argmax == k {
            continue; // no-object query
        }
        let class_prob = probs[argmax];

        let logits_plane: Vec<f64> = mask_logits[q * l..(q + 1) * l]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let up = bilinear_resize_plane(&logits_plane, h3, w3, h, w);
        let mut mask = Mask::zeros(h, w);
        let mut fg_prob_sum = 0.0;
        let mut fg_count = 0usize;
        for (bit, &logit) in mask.data.iter_mut().zip(up.iter()) {
            let p = 1.0 / (1.0 + (-logit).exp());
            if p > 0.5 {
                *bit = true;
                fg_prob_sum += p;
                fg_count += 1;
            }
        }
        let mask_score = if fg_count == 0 {
            0.0
        } else {
            fg_prob_sum / fg_count as f64
        };
        detections.push((
            q,
            Detection {
                class_id: argmax + 1,
                score: class_prob * mask_score,
                mask,
            },
        ));
    }
    detections.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(detections.into_iter().map(|(_, d)| d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::LayerPrediction;
    use crate::tensor::Tensor;

    fn pred(class_logits: Vec<f64>, mask_logits: Vec<f64>, na: usize, k: usize, l: usize) -> LayerPrediction<f64> {
        LayerPrediction {
            class_logits: Tensor::from_vec(class_logits, &[na, k + 1]).unwrap(),
            mask_logits: Tensor::from_vec(mask_logits, &[na, l]).unwrap(),
            layer_index: 0,
        }
    }

    #[test]
    fn score_is_class_prob_times_mask_score() {
        // uniform foreground probability p = 0.5 + eps contributes ~0.5;
        // exact contract checked with saturated class prob
        let l = 4;
        // class prob 0.8 for class 1 (K=1): logits [ln(4), 0] -> 0.8 / 0.2
        let class_logits = vec![(4f64).ln(), 0.0];
        // mask logit chosen so sigmoid = 0.75 everywhere
        let m = (3f64).ln(); // sigmoid(ln 3) = 0.75
        let pd = pred(class_logits, vec![m; l], 1, 1, l);
        let dets = postprocess(&pd, (2, 2), (2, 2)).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
        assert!((dets[0].score - 0.8 * 0.75).abs() < 1e-9);
        assert_eq!(dets[0].mask.area(), 4);
    }

    #[test]
    fn all_no_object_yields_zero_detections() {
        let mut class_logits = vec![0.0; 3 * 3];
        for q in 0..3 {
            class_logits[q * 3 + 2] = 10.0;
        }
        let pd = pred(class_logits, vec![0.0; 3 * 4], 3, 2, 4);
        let dets = postprocess(&pd, (2, 2), (4, 4)).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn empty_foreground_scores_zero() {
        let class_logits = vec![5.0, 0.0];
        let pd = pred(class_logits, vec![-10.0; 4], 1, 1, 4);
        let dets = postprocess(&pd, (2, 2), (4, 4)).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].score, 0.0);
        assert_eq!(dets[0].mask.area(), 0);
    }

    #[test]
    fn saturated_rectangle_survives_upsample_threshold() {
        // +10 logits inside the left half of a 2x4 E3 grid, -10 outside:
        // after 4x upsampling and thresholding the mask is the left half
        let (h3, w3) = (2, 4);
        let mut mask_logits = vec![-10.0; h3 * w3];
        for y in 0..h3 {
            for x in 0..2 {
                mask_logits[y * w3 + x] = 10.0;
            }
        }
        let pd = pred(vec![8.0, 0.0], mask_logits, 1, 1, h3 * w3);
        let dets = postprocess(&pd, (h3, w3), (8, 16)).unwrap();
        assert_eq!(dets.len(), 1);
        let m = &dets[0].mask;
        // interior columns strictly inside the half are foreground;
        // check representative pixels away from the blend boundary
        for y in 0..8 {
            assert!(m.get(y, 0));
            assert!(m.get(y, 5));
            assert!(!m.get(y, 10));
            assert!(!m.get(y, 15));
        }
        // class prob of logit gap 8 is ~1; score approx class_prob
        assert!(dets[0].score > 0.9);
        // scores stay in [0,1] and detection count <= Na
        assert!(dets[0].score <= 1.0);
    }
}
