//! Visualization artifacts: IA-query location dots, predicted-mask
//! overlays, and auxiliary-query attention heatmaps. All outputs are
//! PPM/PGM.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image_io::{chw_f32_to_rgb, write_pgm, write_ppm};
use crate::model::{FastInst, ModelOutputs};
use crate::postprocess::Detection;
use crate::scenes::SceneSample;
use crate::tensor::ops::bilinear_resize_plane;
use crate::tensor::Elem;

const DOT_COLOR: [u8; 3] = [255, 32, 32];
const OVERLAY_COLORS: [[u8; 3]; 6] = [
    [255, 80, 80],
    [80, 255, 80],
    [80, 120, 255],
    [255, 220, 60],
    [220, 80, 255],
    [60, 230, 230],
];

/// Dot the selected IA-query locations onto the image (query-distribution
/// figure). Locations live on the source grid; each dot lands at the cell
/// center in image coordinates.
pub fn write_query_dots<E: Elem>(
    model: &FastInst<E>,
    sample: &SceneSample,
    outputs: &ModelOutputs<E>,
    path: &Path,
) -> Result<()> {
    let (h, w) = (sample.h, sample.w);
    let mut rgb = chw_f32_to_rgb(&sample.image, h, w);
    let stride_y = h / outputs.src_hw.0;
    let stride_x = w / outputs.src_hw.1;
    for &(cx, cy) in &outputs.selection.locations {
        let px = cx * stride_x + stride_x / 2;
        let py = cy * stride_y + stride_y / 2;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (y, x) = (py as i64 + dy, px as i64 + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    let p = (y as usize * w + x as usize) * 3;
                    rgb[p..p + 3].copy_from_slice(&DOT_COLOR);
                }
            }
        }
    }
    let _ = model;
    write_ppm(path, w, h, &rgb)
}

/// Blend detection masks over the image, one color per detection.
pub fn write_detection_overlay(
    sample: &SceneSample,
    detections: &[Detection],
    path: &Path,
) -> Result<()> {
    let (h, w) = (sample.h, sample.w);
    let mut rgb = chw_f32_to_rgb(&sample.image, h, w);
    for (i, det) in detections.iter().enumerate() {
        let color = OVERLAY_COLORS[i % OVERLAY_COLORS.len()];
        for (p, &bit) in det.mask.data.iter().enumerate() {
            if bit {
                for c in 0..3 {
                    let blended =
                        0.55 * rgb[p * 3 + c] as f64 + 0.45 * color[c] as f64;
                    rgb[p * 3 + c] = blended.round() as u8;
                }
            }
        }
    }
    write_ppm(path, w, h, &rgb)
}

/// Last-layer cross-attention heatmap of each auxiliary query, upsampled
/// from the E3 grid to image resolution and normalized per query.
pub fn write_aux_attention_maps<E: Elem>(
    model: &FastInst<E>,
    sample: &SceneSample,
    outputs: &ModelOutputs<E>,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<std::path::PathBuf>> {
    let weights = outputs
        .decoder
        .attn_weights
        .last()
        .ok_or_else(|| Error::invalid("aux attention maps need at least one decoder layer"))?;
    let (n, l) = match weights.shape() {
        [n, l] => (*n, *l),
        s => return Err(Error::shape(format!("attention weights {s:?}"))),
    };
    let na = model.cfg.query.na;
    let nb = model.cfg.query.nb;
    if n != na + nb || nb == 0 {
        return Err(Error::invalid(format!(
            "aux attention maps: {n} query rows, na {na} nb {nb}"
        )));
    }
    let (h3, w3) = outputs.e3_hw;
    debug_assert_eq!(l, h3 * w3);
    let wv = weights.to_vec();
    let mut paths = Vec::with_capacity(nb);
    for a in 0..nb {
        let row: Vec<f64> = wv[(na + a) * l..(na + a + 1) * l]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let up = bilinear_resize_plane(&row, h3, w3, sample.h, sample.w);
        let max = up.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
        let bytes: Vec<u8> = up
            .iter()
            .map(|&v| ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = out_dir.join(format!("{stem}_aux{a}.pgm"));
        write_pgm(&path, sample.w, sample.h, &bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::scenes::{generate_scene, DatasetSpec};

    fn setup() -> (FastInst<f32>, SceneSample) {
        let mut cfg = RunConfig::default();
        cfg.pixel.dim = 8;
        cfg.decoder.d = 1;
        cfg.decoder.heads = 2;
        cfg.decoder.ffn_dim = 16;
        cfg.query.na = 4;
        cfg.query.nb = 2;
        cfg.dataset.height = 64;
        cfg.dataset.width = 64;
        cfg.aug.crop_h = 64;
        cfg.aug.crop_w = 64;
        let model = FastInst::new(&cfg, 0).unwrap();
        let sample = generate_scene(
            &DatasetSpec {
                height: 64,
                width: 64,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        (model, sample)
    }

    #[test]
    fn query_dots_and_attention_maps_write() {
        let (model, sample) = setup();
        let image = model.image_tensor(&sample).unwrap();
        let outputs = model.forward(&image, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_query_dots(&model, &sample, &outputs, &dir.path().join("dots.ppm")).unwrap();
        let paths =
            write_aux_attention_maps(&model, &sample, &outputs, dir.path(), "img0").unwrap();
        assert_eq!(paths.len(), 2);
        for p in paths {
            assert!(p.exists());
        }
        let (w, h, rgb) = crate::image_io::read_ppm(&dir.path().join("dots.ppm")).unwrap();
        assert_eq!((w, h), (64, 64));
        // at least one red dot pixel present
        assert!(rgb.chunks(3).any(|c| c == DOT_COLOR));
    }
}
