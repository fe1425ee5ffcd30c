//! Dataset persistence: one JSON manifest (COCO-shaped subset with RLE
//! masks inline) plus binary PPM images alongside.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{chw_f32_to_rgb, read_ppm, rgb_to_chw_f32, write_ppm};
use crate::rng::PRNG_SCHEME;

use super::{rle_decode, rle_encode, DatasetSpec, InstanceTarget, SceneSample};

pub const MANIFEST_NAME: &str = "dataset.json";

#[derive(Serialize, Deserialize)]
struct CategoryRecord {
    id: usize,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    id: usize,
    file: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: usize,
    category_id: usize,
    rle: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    prng: String,
    categories: Vec<CategoryRecord>,
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
}

const CATEGORY_NAMES: [&str; 6] = ["circle", "square", "triangle", "pentagon", "hexagon", "heptagon"];

pub fn category_name(class_id: usize) -> &'static str {
    CATEGORY_NAMES.get(class_id - 1).copied().unwrap_or("shape")
}

fn image_file(id: usize) -> String {
    format!("img_{id:06}.ppm")
}

/// Write the manifest and one PPM per image into `dir`.
pub fn save_dataset(dir: &Path, spec: &DatasetSpec, samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut images = Vec::with_capacity(samples.len());
    let mut annotations = Vec::new();
    for s in samples {
        let file = image_file(s.image_id);
        write_ppm(
            &dir.join(&file),
            s.w,
            s.h,
            &chw_f32_to_rgb(&s.image, s.h, s.w),
        )?;
        images.push(ImageRecord {
            id: s.image_id,
            file,
            width: s.w,
            height: s.h,
        });
        for inst in &s.instances {
            annotations.push(AnnotationRecord {
                image_id: s.image_id,
                category_id: inst.class_id,
                rle: rle_encode(&inst.mask),
            });
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        prng: PRNG_SCHEME.to_string(),
        categories: (1..=spec.num_classes)
            .map(|id| CategoryRecord {
                id,
                name: category_name(id).to_string(),
            })
            .collect(),
        images,
        annotations,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(())
}

/// Load a dataset directory back into memory; sample order is manifest
/// image order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<SceneSample>)> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Dataset(format!("cannot read {manifest_path:?}: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    let mut samples = Vec::with_capacity(manifest.images.len());
    for rec in &manifest.images {
        let (w, h, rgb) = read_ppm(&dir.join(&rec.file))?;
        if (w, h) != (rec.width, rec.height) {
            return Err(Error::Dataset(format!(
                "image {}: {}x{} on disk vs {}x{} in manifest",
                rec.file, w, h, rec.width, rec.height
            )));
        }
        let instances: Vec<InstanceTarget> = manifest
            .annotations
            .iter()
            .filter(|a| a.image_id == rec.id)
            .map(|a| {
                Ok(InstanceTarget {
                    class_id: a.category_id,
                    mask: rle_decode(&a.rle, h, w)?,
                })
            })
            .collect::<Result<_>>()?;
        samples.push(SceneSample {
            image: rgb_to_chw_f32(&rgb, h, w),
            h,
            w,
            instances,
            image_id: rec.id,
        });
    }
    Ok((manifest.spec, samples))
}

/// FNV-1a digest over every file in the directory (sorted by name) — used
/// to compare generated dataset directories byte for byte.
pub fn dataset_digest(dir: &Path) -> Result<u64> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<std::io::Result<Vec<_>>>()?;
    names.sort();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut step = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for name in names {
        step(name.to_string_lossy().as_bytes());
        step(&fs::read(dir.join(&name))?);
    }
    Ok(h)
}
