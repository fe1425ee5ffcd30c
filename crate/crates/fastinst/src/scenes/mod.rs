//! Procedural instance-segmentation scenes: colored geometric shapes on
//! textured backgrounds, with deterministic generation, the training-time
//! augmentation pipeline, RLE annotation serialization and dataset files.

mod augment;
mod generate;
mod io;
mod rle;

pub use augment::{augment, AugmentConfig};
pub use generate::{compose_scene, generate_dataset, generate_scene, Shape};
pub use io::{dataset_digest, load_dataset, save_dataset};
pub use rle::{rle_decode, rle_encode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generation parameters for a synthetic dataset. Everything downstream is
/// a pure function of this value.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Number of shape categories (circle, square, triangle, ...).
    pub num_classes: usize,
    /// Image height in pixels; must be divisible by 32.
    pub height: usize,
    /// Image width in pixels; must be divisible by 32.
    pub width: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    /// Instances whose visible area falls below this are not annotated.
    pub min_instance_area: usize,
    pub seed: u64,
    pub num_images: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 3,
            height: 96,
            width: 96,
            instances_min: 2,
            instances_max: 6,
            min_instance_area: 16,
            seed: 0,
            num_images: 64,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("dataset: num_classes must be >= 1"));
        }
        if self.num_classes > 6 {
            return Err(Error::invalid(
                "dataset: at most 6 shape categories are defined",
            ));
        }
        if self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::invalid(format!(
                "dataset: image size {}x{} must be divisible by 32 (pixel pyramid needs /8,/16,/32)",
                self.height, self.width
            )));
        }
        if self.instances_min == 0 || self.instances_min > self.instances_max {
            return Err(Error::invalid(format!(
                "dataset: bad instance range {}..={}",
                self.instances_min, self.instances_max
            )));
        }
        Ok(())
    }
}

/// Binary mask with explicit extents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Downsample by integer stride: output cell is true if ANY covered
    /// input pixel is true (max-pool).
    pub fn downsample_max(&self, out_h: usize, out_w: usize) -> Mask {
        self.downsample_by(out_h, out_w, |pos, cnt| pos > 0 && cnt > 0)
    }

    /// Downsample by integer stride: output cell is true if MORE THAN HALF
    /// of the covered input pixels are true (area-average then > 0.5).
    pub fn downsample_majority(&self, out_h: usize, out_w: usize) -> Mask {
        self.downsample_by(out_h, out_w, |pos, cnt| 2 * pos > cnt)
    }

    fn downsample_by(
        &self,
        out_h: usize,
        out_w: usize,
        rule: impl Fn(usize, usize) -> bool,
    ) -> Mask {
        assert!(
            self.h % out_h == 0 && self.w % out_w == 0,
            "downsample: {}x{} not divisible into {}x{}",
            self.h,
            self.w,
            out_h,
            out_w
        );
        let sy = self.h / out_h;
        let sx = self.w / out_w;
        let mut out = Mask::zeros(out_h, out_w);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut pos = 0usize;
                for y in oy * sy..(oy + 1) * sy {
                    for x in ox * sx..(ox + 1) * sx {
                        pos += self.get(y, x) as usize;
                    }
                }
                out.data[oy * out_w + ox] = rule(pos, sy * sx);
            }
        }
        out
    }

    /// Values as 0/1 floats (row-major), for loss targets.
    pub fn to_f64s(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// One annotated object: its category and visible-region mask.
#[derive(Debug, Clone)]
pub struct InstanceTarget {
    /// Category in `1..=K`.
    pub class_id: usize,
    pub mask: Mask,
}

/// One training/eval unit: an image plus its instance annotations.
/// `image` is (3,H,W) row-major in [0,1], quantized to multiples of 1/255
/// so that the PPM round trip is exact.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub image: Vec<f32>,
    pub h: usize,
    pub w: usize,
    pub instances: Vec<InstanceTarget>,
    pub image_id: usize,
}

impl SceneSample {
    /// Checks the documented invariants: disjoint visible masks, nonempty
    /// instances, image range.
    pub fn check_invariants(&self, min_area: usize) -> Result<()> {
        let mut covered = vec![false; self.h * self.w];
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.mask.area() < min_area.max(1) {
                return Err(Error::Dataset(format!(
                    "instance {i} area {} below minimum",
                    inst.mask.area()
                )));
            }
            for (p, &b) in inst.mask.data.iter().enumerate() {
                if b {
                    if covered[p] {
                        return Err(Error::Dataset(format!(
                            "instance {i} overlaps an earlier visible mask at pixel {p}"
                        )));
                    }
                    covered[p] = true;
                }
            }
        }
        if self.image.len() != 3 * self.h * self.w {
            return Err(Error::Dataset("image buffer size mismatch".into()));
        }
        if self.image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Dataset("image values outside [0,1]".into()));
        }
        Ok(())
    }
}
