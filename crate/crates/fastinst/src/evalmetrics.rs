//! COCO-style mask AP/AR: greedy matching per IoU threshold by descending
//! score, 101-point interpolated precision, area buckets scaled to the
//! desk image size, AR at 100 detections per image.

use serde::Serialize;

use crate::error::Result;
use crate::postprocess::Detection;
use crate::scenes::{InstanceTarget, Mask};

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const MAX_DETS: usize = 100;

/// COCO uses 32^2 / 96^2 pixel thresholds at ~640px images; buckets scale
/// by (shorter_edge / 640)^2 so they stay meaningful at desk resolution.
fn area_thresholds(shorter_edge: usize) -> (f64, f64) {
    let scale = (shorter_edge as f64 / 640.0).powi(2);
    (32.0 * 32.0 * scale, 96.0 * 96.0 * scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AreaBucket {
    All,
    Small,
    Medium,
    Large,
}

impl AreaBucket {
    fn contains(self, area: f64, thresholds: (f64, f64)) -> bool {
        match self {
            AreaBucket::All => true,
            AreaBucket::Small => area < thresholds.0,
            AreaBucket::Medium => area >= thresholds.0 && area < thresholds.1,
            AreaBucket::Large => area >= thresholds.1,
        }
    }
}

/// Aggregate metrics; `None` where a bucket has no ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ar100: Option<f64>,
    pub num_images: usize,
    pub num_gt: usize,
}

struct FlatDet {
    image: usize,
    score: f64,
    det_index: usize,
}

/// Evaluate per-image detection lists against per-image ground truth.
/// `num_classes` fixes the category set; classes without ground truth are
/// excluded from the averages.
pub fn evaluate(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<InstanceTarget>],
    num_classes: usize,
    image_hw: (usize, usize),
) -> Result<EvalMetrics> {
    assert_eq!(detections.len(), ground_truth.len());
    let thresholds = area_thresholds(image_hw.0.min(image_hw.1));
    let num_gt: usize = ground_truth.iter().map(|g| g.len()).sum();

    // cap detections per image (by score, the documented index tie-break)
    let kept: Vec<Vec<&Detection>> = detections
        .iter()
        .map(|dets| {
            let mut idx: Vec<usize> = (0..dets.len()).collect();
            idx.sort_by(|&a, &b| {
                dets[b]
                    .score
                    .partial_cmp(&dets[a].score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            idx.into_iter().take(MAX_DETS).map(|i| &dets[i]).collect()
        })
        .collect();

    // precompute per-image, per-class IoU tables
    struct ClassImage {
        det_order: Vec<usize>,   // indices into kept[image]
        gt_indices: Vec<usize>,  // indices into ground_truth[image]
        iou: Vec<f64>,           // det-major [d * gts + g]
    }
    let mut tables: Vec<Vec<ClassImage>> = Vec::with_capacity(num_classes);
    for class_id in 1..=num_classes {
        let mut per_image = Vec::with_capacity(kept.len());
        for (img, dets) in kept.iter().enumerate() {
            let det_order: Vec<usize> = (0..dets.len())
                .filter(|&i| dets[i].class_id == class_id)
                .collect();
            let gt_indices: Vec<usize> = (0..ground_truth[img].len())
                .filter(|&g| ground_truth[img][g].class_id == class_id)
                .collect();
            let mut iou = vec![0.0; det_order.len() * gt_indices.len()];
            for (di, &d) in det_order.iter().enumerate() {
                for (gi, &g) in gt_indices.iter().enumerate() {
                    iou[di * gt_indices.len() + gi] =
                        mask_iou(&dets[d].mask, &ground_truth[img][g].mask);
                }
            }
            per_image.push(ClassImage {
                det_order,
                gt_indices,
                iou,
            });
        }
        tables.push(per_image);
    }

    // evaluate one (class, threshold, bucket): returns (ap, matched, total_gt)
    let eval_cell = |class_id: usize, t: f64, bucket: AreaBucket| -> (Option<f64>, usize, usize) {
        let per_image = &tables[class_id - 1];
        let mut flats: Vec<FlatDet> = Vec::new();
        let mut det_flags: Vec<(bool, bool)> = Vec::new(); // (tp, ignored)
        let mut total_gt = 0usize;
        // per-image greedy matching in score order
        for (img, ci) in per_image.iter().enumerate() {
            let gts = &ground_truth[img];
            let gt_ignore: Vec<bool> = ci
                .gt_indices
                .iter()
                .map(|&g| !bucket.contains(gts[g].mask.area() as f64, thresholds))
                .collect();
            total_gt += gt_ignore.iter().filter(|&&ig| !ig).count();
            let mut gt_used = vec![false; ci.gt_indices.len()];
            // detections are already in per-image score order within kept
            for (di, &d) in ci.det_order.iter().enumerate() {
                let det = kept[img][d];
                // prefer non-ignored GT with the highest IoU >= t; fall
                // back to an ignored GT (detection then ignored)
                let mut best: Option<(usize, f64, bool)> = None;
                for (gi, &ignored) in gt_ignore.iter().enumerate() {
                    if gt_used[gi] {
                        continue;
                    }
                    let iou = ci.iou[di * ci.gt_indices.len() + gi];
                    if iou < t {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((_, best_iou, best_ignored)) => {
                            if best_ignored && !ignored {
                                true
                            } else if !best_ignored && ignored {
                                false
                            } else {
                                iou > best_iou
                            }
                        }
                    };
                    if better {
                        best = Some((gi, iou, ignored));
                    }
                }
                let (tp, ignored_det) = match best {
                    Some((gi, _, ignored)) => {
                        gt_used[gi] = true;
                        (!ignored, ignored)
                    }
                    None => {
                        // unmatched detection outside the bucket is ignored
                        let outside = !bucket.contains(det.mask.area() as f64, thresholds);
                        (false, outside)
                    }
                };
                flats.push(FlatDet {
                    image: img,
                    score: det.score,
                    det_index: det_flags.len(),
                });
                det_flags.push((tp, ignored_det));
            }
        }
        if total_gt == 0 {
            return (None, 0, 0);
        }
        // global score ordering with the documented tie-break
        flats.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.image.cmp(&b.image))
                .then(a.det_index.cmp(&b.det_index))
        });
        let mut tp_cum = 0usize;
        let mut fp_cum = 0usize;
        let mut recalls = Vec::with_capacity(flats.len());
        let mut precisions = Vec::with_capacity(flats.len());
        for f in &flats {
            let (tp, ignored) = det_flags[f.det_index];
            if ignored {
                continue;
            }
            if tp {
                tp_cum += 1;
            } else {
                fp_cum += 1;
            }
            recalls.push(tp_cum as f64 / total_gt as f64);
            precisions.push(tp_cum as f64 / (tp_cum + fp_cum) as f64);
        }
        // monotone non-increasing envelope from the right
        for i in (1..precisions.len()).rev() {
            if precisions[i - 1] < precisions[i] {
                precisions[i - 1] = precisions[i];
            }
        }
        // 101-point interpolation
        let mut ap = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            let idx = recalls.partition_point(|&rec| rec < level);
            if idx < precisions.len() {
                ap += precisions[idx];
            }
        }
        (Some(ap / 101.0), tp_cum, total_gt)
    };

    let mean = |values: Vec<Option<f64>>| -> Option<f64> {
        let present: Vec<f64> = values.into_iter().flatten().collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    };

    let ap_over = |bucket: AreaBucket, thrs: &[f64]| -> Option<f64> {
        mean(
            (1..=num_classes)
                .flat_map(|c| thrs.iter().map(move |&t| (c, t)))
                .map(|(c, t)| eval_cell(c, t, bucket).0)
                .collect(),
        )
    };

    // AR@100: recall averaged over IoU thresholds and classes (all areas)
    let ar100 = mean(
        (1..=num_classes)
            .flat_map(|c| IOU_THRESHOLDS.iter().map(move |&t| (c, t)))
            .map(|(c, t)| {
                let (_, matched, total) = eval_cell(c, t, AreaBucket::All);
                if total == 0 {
                    None
                } else {
                    Some(matched as f64 / total as f64)
                }
            })
            .collect(),
    );

    Ok(EvalMetrics {
        ap: ap_over(AreaBucket::All, &IOU_THRESHOLDS),
        ap50: ap_over(AreaBucket::All, &[0.50]),
        ap75: ap_over(AreaBucket::All, &[0.75]),
        ap_s: ap_over(AreaBucket::Small, &IOU_THRESHOLDS),
        ap_m: ap_over(AreaBucket::Medium, &IOU_THRESHOLDS),
        ap_l: ap_over(AreaBucket::Large, &IOU_THRESHOLDS),
        ar100,
        num_images: detections.len(),
        num_gt,
    })
}

pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    a.iou(b)
}
