//! Instance-activation-guided queries: the auxiliary per-pixel
//! classification head, the local-maximum-first selection rule, and the
//! positional embedding tables.

use rand_chacha::ChaCha8Rng;

use crate::config::{PosKind, QueryConfig};
use crate::error::{Error, Result};
use crate::nn::{init_normal, Conv2d, VarStore};
use crate::tensor::{ops, Elem, Tensor};

/// Per-pixel class distribution over `K+1` columns. Real classes
/// `1..=K` occupy columns `0..K`; the last column is "no object".
pub struct ActivationMap<E: Elem> {
    /// `(H16*W16, K+1)` rows on the probability simplex.
    pub probs: Tensor<E>,
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
}

impl<E: Elem> ActivationMap<E> {
    /// Per-pixel argmax over the real classes only (1-based class ids) and
    /// the corresponding foreground probability.
    pub fn foreground_argmax(&self) -> (Vec<usize>, Vec<f64>) {
        let k = self.num_classes;
        let cols = k + 1;
        let pv = self.probs.to_vec();
        let n = self.h * self.w;
        let mut classes = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for i in 0..n {
            let row = &pv[i * cols..i * cols + k]; // no-object column excluded
            let mut best = 0usize;
            for c in 1..k {
                if row[c].to_f64() > row[best].to_f64() {
                    best = c;
                }
            }
            classes.push(best + 1);
            scores.push(row[best].to_f64());
        }
        (classes, scores)
    }
}

/// Two-conv classification head (3x3 then 1x1) with a softmax over K+1.
pub struct AuxClassHead<E: Elem> {
    conv1: Conv2d<E>,
    conv2: Conv2d<E>,
    num_classes: usize,
}

impl<E: Elem> AuxClassHead<E> {
    pub fn new(
        vs: &mut VarStore<E>,
        rng: &mut ChaCha8Rng,
        dim: usize,
        num_classes: usize,
    ) -> Self {
        AuxClassHead {
            conv1: Conv2d::new(vs, rng, "aux_head.conv1", dim, dim, 3, 1, 1),
            conv2: Conv2d::new(vs, rng, "aux_head.conv2", dim, num_classes + 1, 1, 1, 0),
            num_classes,
        }
    }

    pub fn forward(&self, feat: &Tensor<E>) -> Result<ActivationMap<E>> {
        let (h, w) = match feat.shape() {
            [_, h, w] => (*h, *w),
            s => return Err(Error::shape(format!("aux head: {s:?}"))),
        };
        let hidden = ops::silu(&self.conv1.forward(feat)?);
        let logits = self.conv2.forward(&hidden)?;
        let rows = ops::chw_to_lc(&logits)?;
        Ok(ActivationMap {
            probs: ops::softmax_lastdim(&rows)?,
            h,
            w,
            num_classes: self.num_classes,
        })
    }

    /// Pre-softmax logits as `(P, K+1)` rows, for the activation loss.
    pub fn forward_logits(&self, feat: &Tensor<E>) -> Result<Tensor<E>> {
        let hidden = ops::silu(&self.conv1.forward(feat)?);
        ops::chw_to_lc(&self.conv2.forward(&hidden)?)
    }
}

/// Outcome of IA-guided selection: flat grid indices, `(x,y)` locations,
/// and the gathered source embeddings (routing indices detached, the
/// embeddings themselves differentiable).
pub struct QuerySelection<E: Elem> {
    pub indices: Vec<usize>,
    pub locations: Vec<(usize, usize)>,
    pub embeddings: Tensor<E>,
}

/// Local-maximum-first selection: candidates are pixels whose foreground
/// probability is >= every 8-neighbor's probability in the same class
/// plane; rank candidates by score (ties by ascending flat index), then
/// fill any shortfall with the best non-candidates.
pub fn select_ia_queries<E: Elem>(
    act: &ActivationMap<E>,
    feat: &Tensor<E>,
    na: usize,
) -> Result<QuerySelection<E>> {
    let (h, w) = (act.h, act.w);
    let n = h * w;
    if na > n {
        return Err(Error::invalid(format!(
            "select_ia_queries: na {na} exceeds {h}x{w} grid"
        )));
    }
    let indices = select_indices(act, na);
    let locations: Vec<(usize, usize)> = indices.iter().map(|&i| (i % w, i / w)).collect();
    let rows = ops::chw_to_lc(feat)?;
    let embeddings = ops::select_rows(&rows, &indices)?;
    Ok(QuerySelection {
        indices,
        locations,
        embeddings,
    })
}

/// Selection order without the embedding gather (also the oracle surface).
pub fn select_indices<E: Elem>(act: &ActivationMap<E>, na: usize) -> Vec<usize> {
    let (h, w) = (act.h, act.w);
    let cols = act.num_classes + 1;
    let pv = act.probs.to_vec();
    let (classes, scores) = act.foreground_argmax();

    let mut candidates: Vec<(usize, f64)> = Vec::new();
    let mut rest: Vec<(usize, f64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let plane = classes[i] - 1; // column of the argmax class
            let mut local_max = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let neighbor = pv[(ny as usize * w + nx as usize) * cols + plane].to_f64();
                    if scores[i] < neighbor {
                        local_max = false;
                    }
                }
            }
            if local_max {
                candidates.push((i, scores[i]));
            } else {
                rest.push((i, scores[i]));
            }
        }
    }
    let by_priority = |a: &(usize, f64), b: &(usize, f64)| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    };
    candidates.sort_by(by_priority);
    rest.sort_by(by_priority);
    candidates
        .into_iter()
        .chain(rest)
        .take(na)
        .map(|(i, _)| i)
        .collect()
}

/// Learnable positional sources: the SxS spatial table interpolated to the
/// pixel and query grids, plus one learned row per auxiliary query.
pub struct PositionalTables<E: Elem> {
    /// `(dim, S, S)` learnable spatial table, S = round(sqrt(na)).
    pub table: Tensor<E>,
    /// `(nb, dim)` learnable rows for auxiliary queries.
    pub aux_pos: Tensor<E>,
    pub s: usize,
    pub dim: usize,
}

impl<E: Elem> PositionalTables<E> {
    pub fn new(vs: &mut VarStore<E>, rng: &mut ChaCha8Rng, cfg: &QueryConfig, dim: usize) -> Self {
        let s = (cfg.na as f64).sqrt().round().max(1.0) as usize;
        PositionalTables {
            table: init_normal(vs, rng, "pos.table", &[dim, s, s], 0.02),
            aux_pos: init_normal(vs, rng, "pos.aux", &[cfg.nb.max(1), dim], 0.02),
            s,
            dim,
        }
    }
}

/// Sinusoidal embedding rows for an `h x w` grid (non-parametric variant):
/// half the channels encode y, half x, alternating sin/cos at geometric
/// frequencies, positions normalized to [0, 2pi].
pub fn sine_grid<E: Elem>(h: usize, w: usize, dim: usize) -> Tensor<E> {
    assert!(dim % 4 == 0, "sine embedding needs dim % 4 == 0");
    let quarter = dim / 4;
    let tau = std::f64::consts::TAU;
    let mut data = vec![E::ZERO; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            let ys = (y as f64 + 0.5) / h as f64 * tau;
            let xs = (x as f64 + 0.5) / w as f64 * tau;
            for i in 0..quarter {
                let freq = 10000f64.powf(2.0 * i as f64 / (dim / 2) as f64);
                row[2 * i] = E::from_f64((ys / freq).sin());
                row[2 * i + 1] = E::from_f64((ys / freq).cos());
                row[dim / 2 + 2 * i] = E::from_f64((xs / freq).sin());
                row[dim / 2 + 2 * i + 1] = E::from_f64((xs / freq).cos());
            }
        }
    }
    Tensor::from_vec(data, &[h * w, dim]).expect("sine grid shape")
}

/// Positional embeddings for the flattened E3 pixels and all N queries.
///
/// Learnable mode interpolates the table to the E3 extents (pixels) and to
/// the query-source extents, gathering rows at the selected locations.
/// Sine mode substitutes the non-parametric embedding for both; auxiliary
/// rows stay learnable in either mode (they carry no grid location).
pub fn build_positional_embeddings<E: Elem>(
    tables: &PositionalTables<E>,
    pos: PosKind,
    e3_hw: (usize, usize),
    src_hw: (usize, usize),
    locations: &[(usize, usize)],
    nb: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (h3, w3) = e3_hw;
    let (hs, ws) = src_hw;
    for &(x, y) in locations {
        if x >= ws || y >= hs {
            return Err(Error::invalid(format!(
                "positional gather: location ({x},{y}) outside {ws}x{hs} grid"
            )));
        }
    }
    let flat: Vec<usize> = locations.iter().map(|&(x, y)| y * ws + x).collect();
    let (pixel_pos, ia_pos) = match pos {
        PosKind::Learnable => {
            let p3 = ops::chw_to_lc(&ops::bilinear_resize(&tables.table, h3, w3)?)?;
            let p_src = ops::chw_to_lc(&ops::bilinear_resize(&tables.table, hs, ws)?)?;
            (p3, ops::select_rows(&p_src, &flat)?)
        }
        PosKind::Sine => {
            let p3 = sine_grid::<E>(h3, w3, tables.dim);
            let p_src = sine_grid::<E>(hs, ws, tables.dim);
            (p3, ops::select_rows(&p_src, &flat)?)
        }
    };
    let query_pos = if nb > 0 {
        let aux = ops::narrow_rows(&tables.aux_pos, 0, nb)?;
        ops::concat_rows(&ia_pos, &aux)?
    } else {
        ia_pos
    };
    Ok((pixel_pos, query_pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{QueryConfig, SourceLevel};
    use crate::rng::rng_for;
    use crate::tensor::gradcheck::finite_diff_gradcheck;
    use rand::Rng;

    fn map_from_probs(probs: Vec<f64>, h: usize, w: usize, k: usize) -> ActivationMap<f64> {
        ActivationMap {
            probs: Tensor::from_vec(probs, &[h * w, k + 1]).unwrap(),
            h,
            w,
            num_classes: k,
        }
    }

    /// Naive full-scan oracle: recompute candidacy for every pixel by
    /// brute force and order exactly as specified.
    pub(crate) fn select_indices_oracle(act: &ActivationMap<f64>, na: usize) -> Vec<usize> {
        let (h, w) = (act.h, act.w);
        let cols = act.num_classes + 1;
        let pv = act.probs.to_vec();
        // per-pixel argmax over real classes
        let mut cls = vec![0usize; h * w];
        let mut score = vec![0f64; h * w];
        for i in 0..h * w {
            let mut best = 0;
            for c in 1..act.num_classes {
                if pv[i * cols + c] > pv[i * cols + best] {
                    best = c;
                }
            }
            cls[i] = best;
            score[i] = pv[i * cols + best];
        }
        let neighborhood = |i: usize| -> Vec<usize> {
            let (y, x) = (i / w, i % w);
            let mut out = vec![];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                        out.push(ny as usize * w + nx as usize);
                    }
                }
            }
            out
        };
        let is_candidate = |i: usize| -> bool {
            neighborhood(i)
                .into_iter()
                .all(|n| score[i] >= pv[n * cols + cls[i]])
        };
        let mut cand: Vec<usize> = (0..h * w).filter(|&i| is_candidate(i)).collect();
        let mut rest: Vec<usize> = (0..h * w).filter(|&i| !is_candidate(i)).collect();
        let cmp = |&a: &usize, &b: &usize| {
            score[b]
                .partial_cmp(&score[a])
                .unwrap()
                .then(a.cmp(&b))
        };
        cand.sort_by(cmp);
        rest.sort_by(cmp);
        cand.into_iter().chain(rest).take(na).collect()
    }

    #[test]
    fn one_peak_per_class_selects_exactly_those() {
        // 4x4, K=2; two strict peaks
        let (h, w, k) = (4usize, 4usize, 2usize);
        let mut probs = vec![0.0; h * w * (k + 1)];
        for i in 0..h * w {
            probs[i * 3] = 0.1;
            probs[i * 3 + 1] = 0.05;
            probs[i * 3 + 2] = 0.85;
        }
        let peak_a = 5; // class 1
        let peak_b = 10; // class 2
        probs[peak_a * 3] = 0.9;
        probs[peak_a * 3 + 2] = 0.05;
        probs[peak_b * 3 + 1] = 0.8;
        probs[peak_b * 3 + 2] = 0.1;
        let act = map_from_probs(probs, h, w, k);
        let got = select_indices(&act, 2);
        assert_eq!(got, vec![peak_a, peak_b]);
    }

    #[test]
    fn adjacent_same_class_keeps_only_the_stronger() {
        // two 8-adjacent pixels, same argmax class, scores 0.9 and 0.8:
        // only the 0.9 one is a candidate (mirrors the naive oracle)
        let (h, w, k) = (3usize, 3usize, 1usize);
        let mut probs = vec![0.0; h * w * 2];
        for i in 0..h * w {
            probs[i * 2] = 0.2;
            probs[i * 2 + 1] = 0.8;
        }
        probs[4 * 2] = 0.9; // center
        probs[4 * 2 + 1] = 0.1;
        probs[5 * 2] = 0.8; // east neighbor
        probs[5 * 2 + 1] = 0.2;
        let act = map_from_probs(probs, h, w, k);
        let oracle = select_indices_oracle(&act, h * w);
        let got = select_indices(&act, h * w);
        assert_eq!(got, oracle);
        // candidate set property: 4 is a candidate, 5 is not; with na=1
        // pixel 4 wins
        assert_eq!(select_indices(&act, 1), vec![4]);
        let cand_5_pos = got.iter().position(|&i| i == 5).unwrap();
        let cand_4_pos = got.iter().position(|&i| i == 4).unwrap();
        assert!(cand_4_pos < cand_5_pos);
    }

    #[test]
    fn matches_full_scan_oracle_on_random_maps() {
        for seed in 0..60u64 {
            let mut rng = rng_for(seed, "selq", 0);
            let h = rng.gen_range(2..10);
            let w = rng.gen_range(2..10);
            let k = rng.gen_range(1..=4);
            let n = h * w;
            let mut probs = vec![0.0; n * (k + 1)];
            for i in 0..n {
                let mut row: Vec<f64> = (0..=k).map(|_| rng.gen_range(0.01..1.0)).collect();
                // occasional exact ties to exercise tie-breaking
                if rng.gen_bool(0.3) && i > 0 {
                    let src = rng.gen_range(0..i);
                    row = probs[src * (k + 1)..(src + 1) * (k + 1)].to_vec();
                }
                let s: f64 = row.iter().sum();
                for (j, v) in row.iter().enumerate() {
                    probs[i * (k + 1) + j] = v / s;
                }
            }
            let act = map_from_probs(probs, h, w, k);
            let na = rng.gen_range(1..=n);
            assert_eq!(
                select_indices(&act, na),
                select_indices_oracle(&act, na),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn na_equal_grid_returns_full_grid_in_priority_order() {
        let mut rng = rng_for(5, "selq-full", 0);
        let (h, w, k) = (4, 5, 3);
        let probs: Vec<f64> = (0..h * w * (k + 1))
            .map(|_| rng.gen_range(0.01..1.0))
            .collect();
        let act = map_from_probs(probs, h, w, k);
        let got = select_indices(&act, h * w);
        assert_eq!(got.len(), h * w);
        let mut sorted = got.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), h * w);
        assert_eq!(got, select_indices_oracle(&act, h * w));
    }

    #[test]
    fn selection_is_deterministic_and_distinct() {
        let mut rng = rng_for(9, "selq-det", 0);
        let (h, w, k) = (6, 6, 2);
        let probs: Vec<f64> = (0..h * w * (k + 1))
            .map(|_| rng.gen_range(0.01..1.0))
            .collect();
        let act = map_from_probs(probs.clone(), h, w, k);
        let a = select_indices(&act, 10);
        let b = select_indices(&act, 10);
        assert_eq!(a, b);
        let mut c = a.clone();
        c.sort_unstable();
        c.dedup();
        assert_eq!(c.len(), 10);
    }

    #[test]
    fn aux_head_zero_weights_uniform() {
        let mut vs = VarStore::<f64>::new();
        let mut rng = rng_for(0, "auxh", 0);
        let head = AuxClassHead::new(&mut vs, &mut rng, 8, 3);
        for (_, t) in vs.iter() {
            t.set_data(&vec![0.0; t.numel()]);
        }
        let feat = Tensor::from_vec(
            (0..8 * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect(),
            &[8, 4, 4],
        )
        .unwrap();
        let act = head.forward(&feat).unwrap();
        for v in act.probs.to_vec() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn aux_head_rows_sum_to_one_and_gradcheck() {
        let mut vs = VarStore::<f64>::new();
        let mut rng = rng_for(1, "auxh2", 0);
        let head = AuxClassHead::new(&mut vs, &mut rng, 8, 2);
        let feat = Tensor::from_vec(
            (0..8 * 4 * 4).map(|i| ((i * 29 % 83) as f64 - 41.0) / 41.0).collect(),
            &[8, 4, 4],
        )
        .unwrap();
        let act = head.forward(&feat).unwrap();
        let pv = act.probs.to_vec();
        for r in 0..16 {
            let s: f64 = pv[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // gradcheck of sum(-log p[:,0]) w.r.t. head weights
        let f = move || {
            let logits = head.forward_logits(&feat)?;
            let n = logits.shape()[0];
            ops::cross_entropy_rows(&logits, &vec![0usize; n], &vec![1.0; n])
        };
        let params = vs.group("aux_head");
        let report = finite_diff_gradcheck(&f, &params, 1e-4, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn positional_identity_resize_gathers_raw_entry() {
        let mut vs = VarStore::<f64>::new();
        let mut rng = rng_for(2, "pos", 0);
        let cfg = QueryConfig {
            na: 16, // S = 4
            nb: 2,
            pos: PosKind::Learnable,
            source_level: SourceLevel::E4,
        };
        let tables = PositionalTables::new(&mut vs, &mut rng, &cfg, 8);
        assert_eq!(tables.s, 4);
        // source grid equals the table extents: gather returns raw entries
        let locations = vec![(1usize, 2usize), (3, 0)];
        let (_pixel, qpos) =
            build_positional_embeddings(&tables, PosKind::Learnable, (8, 8), (4, 4), &locations, 2)
                .unwrap();
        let tv = tables.table.to_vec(); // (dim, 4, 4)
        let qv = qpos.to_vec();
        for (row, &(x, y)) in locations.iter().enumerate() {
            for d in 0..8 {
                let expect = tv[d * 16 + y * 4 + x];
                assert!((qv[row * 8 + d] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_table_gives_identical_pixel_rows() {
        let mut vs = VarStore::<f64>::new();
        let mut rng = rng_for(3, "pos2", 0);
        let cfg = QueryConfig {
            na: 9,
            nb: 1,
            pos: PosKind::Learnable,
            source_level: SourceLevel::E4,
        };
        let tables = PositionalTables::new(&mut vs, &mut rng, &cfg, 8);
        let mut data = vec![0.0; tables.table.numel()];
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i / 9) as f64 * 0.1; // constant per channel
        }
        tables.table.set_data(&data);
        let (pixel, _q) = build_positional_embeddings(
            &tables,
            PosKind::Learnable,
            (6, 5),
            (3, 3),
            &[(0, 0)],
            1,
        )
        .unwrap();
        let pv = pixel.to_vec();
        for r in 1..30 {
            for d in 0..8 {
                assert_eq!(pv[r * 8 + d], pv[d]);
            }
        }
    }

    #[test]
    fn gather_matches_bilinear_oracle_at_cell() {
        let mut vs = VarStore::<f64>::new();
        let mut rng = rng_for(4, "pos3", 0);
        let cfg = QueryConfig {
            na: 9, // S = 3
            nb: 1,
            pos: PosKind::Learnable,
            source_level: SourceLevel::E4,
        };
        let tables = PositionalTables::new(&mut vs, &mut rng, &cfg, 4);
        let (x, y) = (2usize, 1usize);
        let (_p, qpos) = build_positional_embeddings(
            &tables,
            PosKind::Learnable,
            (4, 4),
            (5, 5),
            &[(x, y)],
            1,
        )
        .unwrap();
        // closed-form bilinear sample of the 3x3 table at the (x,y) cell
        // center of a 5x5 grid, half-pixel convention
        let tv = tables.table.to_vec();
        let sample = |o: usize, input: usize, output: usize| -> (usize, usize, f64) {
            let src = ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5)
                .clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            ((lo), (lo + 1).min(input - 1), src - lo as f64)
        };
        let (x0, x1, fx) = sample(x, 3, 5);
        let (y0, y1, fy) = sample(y, 3, 5);
        let qv = qpos.to_vec();
        for d in 0..4 {
            let at = |yy: usize, xx: usize| tv[d * 9 + yy * 3 + xx];
            let expect = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x1) * (1.0 - fy) * fx
                + at(y1, x0) * fy * (1.0 - fx)
                + at(y1, x1) * fy * fx;
            assert!((qv[d] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sine_mode_is_nonparametric_for_grid_rows() {
        let mut vs = VarStore::<f64>::new();
        let mut rng = rng_for(5, "pos4", 0);
        let cfg = QueryConfig {
            na: 4,
            nb: 1,
            pos: PosKind::Sine,
            source_level: SourceLevel::E4,
        };
        let tables = PositionalTables::new(&mut vs, &mut rng, &cfg, 8);
        let (pix, qpos) =
            build_positional_embeddings(&tables, PosKind::Sine, (4, 4), (2, 2), &[(1, 1)], 1)
                .unwrap();
        assert!(!pix.requires_grad());
        let grid = sine_grid::<f64>(2, 2, 8).to_vec();
        let qv = qpos.to_vec();
        for d in 0..8 {
            assert!((qv[d] - grid[3 * 8 + d]).abs() < 1e-12);
        }
    }
}
