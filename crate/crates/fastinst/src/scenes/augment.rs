//! Training-time augmentation: scale jittering of the shorter edge with a
//! longer-edge cap, then a random crop to the training size. Masks follow
//! the image transform; instances left empty are dropped.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::tensor::ops::bilinear_resize_plane;

use super::{InstanceTarget, Mask, SceneSample};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Shorter-edge jitter range, inclusive.
    pub jitter_lo: usize,
    pub jitter_hi: usize,
    /// Longer edge is capped at this after scaling.
    pub max_long: usize,
    /// Output (training) size; images smaller after jitter are padded with
    /// zeros at the bottom/right.
    pub crop_h: usize,
    pub crop_w: usize,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        // desk-scale mirror of the paper-scale 416-640 / 864 profile
        AugmentConfig {
            jitter_lo: 64,
            jitter_hi: 128,
            max_long: 160,
            crop_h: 96,
            crop_w: 96,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    /// The full-scale profile: shorter edge 416..=640, longer edge <= 864.
    pub fn paper_scale() -> Self {
        AugmentConfig {
            jitter_lo: 416,
            jitter_hi: 640,
            max_long: 864,
            crop_h: 640,
            crop_w: 640,
            enabled: true,
        }
    }
}

fn nearest_taps(input: usize, output: usize) -> Vec<usize> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            (((o as f64 + 0.5) * ratio - 0.5).round().max(0.0) as usize).min(input - 1)
        })
        .collect()
}

fn resize_mask(mask: &Mask, out_h: usize, out_w: usize) -> Mask {
    let ty = nearest_taps(mask.h, out_h);
    let tx = nearest_taps(mask.w, out_w);
    let mut out = Mask::zeros(out_h, out_w);
    for (oy, &sy) in ty.iter().enumerate() {
        for (ox, &sx) in tx.iter().enumerate() {
            out.data[oy * out_w + ox] = mask.get(sy, sx);
        }
    }
    out
}

pub fn augment(sample: &SceneSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> SceneSample {
    if !cfg.enabled {
        return sample.clone();
    }
    let (h, w) = (sample.h, sample.w);
    let shorter = h.min(w) as f64;
    let longer = h.max(w) as f64;
    let target_short = if cfg.jitter_lo == cfg.jitter_hi {
        cfg.jitter_lo
    } else {
        rng.gen_range(cfg.jitter_lo..=cfg.jitter_hi)
    } as f64;
    let mut scale = target_short / shorter;
    if longer * scale > cfg.max_long as f64 {
        scale = cfg.max_long as f64 / longer;
    }
    let new_h = ((h as f64 * scale).round() as usize).max(1);
    let new_w = ((w as f64 * scale).round() as usize).max(1);

    // resize image per channel (bilinear), masks by nearest neighbor
    let mut resized = vec![0f32; 3 * new_h * new_w];
    for c in 0..3 {
        let plane = bilinear_resize_plane(
            &sample.image[c * h * w..(c + 1) * h * w],
            h,
            w,
            new_h,
            new_w,
        );
        resized[c * new_h * new_w..(c + 1) * new_h * new_w].copy_from_slice(&plane);
    }

    let oy = if new_h > cfg.crop_h {
        rng.gen_range(0..=new_h - cfg.crop_h)
    } else {
        0
    };
    let ox = if new_w > cfg.crop_w {
        rng.gen_range(0..=new_w - cfg.crop_w)
    } else {
        0
    };

    let (ch, cw) = (cfg.crop_h, cfg.crop_w);
    let mut image = vec![0f32; 3 * ch * cw];
    for c in 0..3 {
        for y in 0..ch.min(new_h.saturating_sub(oy)) {
            for x in 0..cw.min(new_w.saturating_sub(ox)) {
                image[c * ch * cw + y * cw + x] =
                    resized[c * new_h * new_w + (y + oy) * new_w + (x + ox)];
            }
        }
    }

    let mut instances = Vec::new();
    for inst in &sample.instances {
        let rm = resize_mask(&inst.mask, new_h, new_w);
        let mut cropped = Mask::zeros(ch, cw);
        let mut any = false;
        for y in 0..ch.min(new_h.saturating_sub(oy)) {
            for x in 0..cw.min(new_w.saturating_sub(ox)) {
                let b = rm.get(y + oy, x + ox);
                cropped.data[y * cw + x] = b;
                any |= b;
            }
        }
        if any {
            instances.push(InstanceTarget {
                class_id: inst.class_id,
                mask: cropped,
            });
        }
    }

    SceneSample {
        image,
        h: ch,
        w: cw,
        instances,
        image_id: sample.image_id,
    }
}
