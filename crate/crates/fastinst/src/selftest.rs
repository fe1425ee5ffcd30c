//! Runtime-invocable oracle suites: independent naive implementations
//! checked against the production paths, plus the end-to-end
//! finite-difference gradient audit. The `gradcheck` and `selftest` CLI
//! subcommands and the acceptance tests all run through here.

use rand::Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::loss::{total_loss, FrozenAssignments};
use crate::matching::{brute_force_match, hungarian_match};
use crate::model::{FastInst, RoutingTrace};
use crate::rng::rng_for;
use crate::scenes::{generate_scene, rle_decode, rle_encode, DatasetSpec, Mask};
use crate::tensor::gradcheck::{finite_diff_gradcheck_sampled, GradCheckReport};
use crate::tensor::{ops, Tensor};

pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// The gradcheck configuration pinned by the acceptance contract:
/// 2-instance 64x64 scene, D=1, dim=16, f64.
pub fn gradcheck_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.pixel.dim = 16;
    cfg.decoder.d = 1;
    cfg.decoder.heads = 2;
    cfg.decoder.ffn_dim = 64;
    cfg.query.na = 8;
    cfg.query.nb = 2;
    cfg.dataset.height = 64;
    cfg.dataset.width = 64;
    cfg.dataset.instances_min = 2;
    cfg.dataset.instances_max = 2;
    cfg.dataset.seed = 5;
    cfg.aug.crop_h = 64;
    cfg.aug.crop_w = 64;
    cfg
}

/// Finite-difference audit of the full training objective per parameter
/// group. Routing (query selection, attention masks) and matchings are
/// captured once and replayed, so probes differentiate the smooth branch
/// the analytic gradient lives on.
pub fn model_gradcheck(
    samples_per_group: usize,
    eps: f64,
    tol: f64,
) -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = gradcheck_config();
    let model = FastInst::<f64>::new(&cfg, 11)?;
    let sample = generate_scene(&cfg.dataset, 0)?;
    let image = model.image_tensor(&sample)?;

    // capture the discrete routing at the base point
    let base_out = model.forward(&image, None)?;
    let base_loss = total_loss(&model, &base_out, &sample, None)?;
    let routing: RoutingTrace = base_out.routing.clone();
    let frozen: FrozenAssignments = base_loss.frozen.clone();
    drop(base_loss);
    drop(base_out);

    let f = {
        let model_ref = &model;
        let sample_ref = &sample;
        let image_ref = &image;
        let routing = routing.clone();
        let frozen = frozen.clone();
        move || -> Result<Tensor<f64>> {
            let out = model_ref.forward(image_ref, Some(&routing))?;
            let loss = total_loss(model_ref, &out, sample_ref, Some(&frozen))?;
            Ok(loss.total)
        }
    };

    let mut reports = Vec::new();
    for (group, params) in model.param_groups() {
        let mut rng = rng_for(17, "gradcheck-sample", fnv(&group));
        let report =
            finite_diff_gradcheck_sampled(&f, &params, samples_per_group, &mut rng, eps, tol)?;
        reports.push((group, report));
    }
    Ok(reports)
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// ── oracle suites ───────────────────────────────────────────────────

/// Hungarian vs exhaustive search on random matrices with sides <= 7.
pub fn check_hungarian(cases: usize) -> CheckOutcome {
    for seed in 0..cases as u64 {
        let mut rng = rng_for(seed, "selftest-hungarian", 0);
        let rows = rng.gen_range(1..=7);
        let cols = rng.gen_range(1..=7);
        let cost: Vec<f64> = (0..rows * cols)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    1000.0 * f64::from(rng.gen_bool(0.5))
                } else {
                    rng.gen_range(-10.0..10.0)
                }
            })
            .collect();
        let ours = match hungarian_match(&cost, rows, cols) {
            Ok(m) => m,
            Err(e) => {
                return CheckOutcome::new("hungarian-oracle", false, format!("seed {seed}: {e}"))
            }
        };
        let brute = brute_force_match(&cost, rows, cols);
        if ours.total_cost != brute.total_cost || ours.pairs != brute.pairs {
            return CheckOutcome::new(
                "hungarian-oracle",
                false,
                format!(
                    "seed {seed} ({rows}x{cols}): {} vs brute {}",
                    ours.total_cost, brute.total_cost
                ),
            );
        }
    }
    CheckOutcome::new(
        "hungarian-oracle",
        true,
        format!("{cases} random matrices match exhaustive search exactly"),
    )
}

/// Local-maximum-first selection vs the naive full-scan rule.
pub fn check_local_maximum_selection(cases: usize) -> CheckOutcome {
    use crate::query::{select_indices, ActivationMap};
    for seed in 0..cases as u64 {
        let mut rng = rng_for(seed, "selftest-localmax", 0);
        let h = rng.gen_range(2..=24);
        let w = rng.gen_range(2..=24);
        let k = rng.gen_range(1..=4);
        let n = h * w;
        let mut probs = vec![0.0f64; n * (k + 1)];
        for i in 0..n {
            let mut row: Vec<f64> = (0..=k).map(|_| rng.gen_range(0.01..1.0)).collect();
            if rng.gen_bool(0.25) && i > 0 {
                let src = rng.gen_range(0..i);
                row = probs[src * (k + 1)..(src + 1) * (k + 1)].to_vec();
            }
            let s: f64 = row.iter().sum();
            for (j, v) in row.iter().enumerate() {
                probs[i * (k + 1) + j] = v / s;
            }
        }
        let act = ActivationMap {
            probs: Tensor::from_vec(probs.clone(), &[n, k + 1]).expect("shape"),
            h,
            w,
            num_classes: k,
        };
        let na = rng.gen_range(1..=n);
        let got = select_indices(&act, na);
        let want = naive_local_max_selection(&probs, h, w, k, na);
        if got != want {
            return CheckOutcome::new(
                "local-maximum-oracle",
                false,
                format!("seed {seed} ({h}x{w}, K={k}, na={na}): selection differs"),
            );
        }
    }
    CheckOutcome::new(
        "local-maximum-oracle",
        true,
        format!("{cases} random activation maps match the full-scan rule"),
    )
}

/// Literal transcription of the selection rule: per-pixel foreground
/// argmax over real classes, 8-neighborhood local-maximum test in the
/// argmax class plane, candidates first by (score desc, index asc), then
/// the best non-candidates.
fn naive_local_max_selection(
    probs: &[f64],
    h: usize,
    w: usize,
    k: usize,
    na: usize,
) -> Vec<usize> {
    let cols = k + 1;
    let n = h * w;
    let mut cls = vec![0usize; n];
    let mut score = vec![0.0f64; n];
    for i in 0..n {
        let (mut best, mut best_p) = (0usize, f64::MIN);
        for c in 0..k {
            if probs[i * cols + c] > best_p {
                best = c;
                best_p = probs[i * cols + c];
            }
        }
        cls[i] = best;
        score[i] = best_p;
    }
    let mut cand = Vec::new();
    let mut rest = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = (y * w as i64 + x) as usize;
            let mut is_max = true;
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let ni = (ny * w as i64 + nx) as usize;
                    if score[i] < probs[ni * cols + cls[i]] {
                        is_max = false;
                    }
                }
            }
            if is_max {
                cand.push(i);
            } else {
                rest.push(i);
            }
        }
    }
    let by = |&a: &usize, &b: &usize| {
        score[b]
            .partial_cmp(&score[a])
            .unwrap()
            .then(a.cmp(&b))
    };
    cand.sort_by(by);
    rest.sort_by(by);
    cand.into_iter().chain(rest).take(na).collect()
}

/// RLE encode/decode round trip on random masks.
pub fn check_rle_roundtrip(cases: usize) -> CheckOutcome {
    for seed in 0..cases as u64 {
        let mut rng = rng_for(seed, "selftest-rle", 0);
        let h = rng.gen_range(1..32);
        let w = rng.gen_range(1..32);
        let density: f64 = rng.gen_range(0.0..1.0);
        let mask = Mask {
            h,
            w,
            data: (0..h * w).map(|_| rng.gen_bool(density)).collect(),
        };
        let counts = rle_encode(&mask);
        match rle_decode(&counts, h, w) {
            Ok(back) if back == mask => {}
            other => {
                return CheckOutcome::new(
                    "rle-roundtrip",
                    false,
                    format!("seed {seed}: roundtrip failed ({other:?})"),
                )
            }
        }
    }
    CheckOutcome::new(
        "rle-roundtrip",
        true,
        format!("{cases} random masks decode back exactly"),
    )
}

/// Masked-attention invariants on random inputs: rows sum to one, blocked
/// weight below 1e-6, all-blocked rows rejected.
pub fn check_masked_attention(cases: usize) -> CheckOutcome {
    use std::rc::Rc;
    for seed in 0..cases as u64 {
        let mut rng = rng_for(seed, "selftest-attn", 0);
        let nq = rng.gen_range(1..8);
        let nk = rng.gen_range(1..10);
        let d = 4 * rng.gen_range(1..4);
        let q = Tensor::<f64>::from_vec(
            (0..nq * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            &[nq, d],
        )
        .expect("shape");
        let k = Tensor::<f64>::from_vec(
            (0..nk * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            &[nk, d],
        )
        .expect("shape");
        let v = Tensor::<f64>::from_vec(
            (0..nk * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            &[nk, d],
        )
        .expect("shape");
        let mut allow: Vec<bool> = (0..nq * nk).map(|_| rng.gen_bool(0.6)).collect();
        for r in 0..nq {
            let row = &mut allow[r * nk..(r + 1) * nk];
            if !row.iter().any(|&b| b) {
                row[rng.gen_range(0..nk)] = true;
            }
        }
        let (_, weights) =
            match ops::attention_with_weights(&q, &k, &v, Some(&Rc::new(allow.clone()))) {
                Ok(x) => x,
                Err(e) => {
                    return CheckOutcome::new("masked-attention", false, format!("seed {seed}: {e}"))
                }
            };
        let wv = weights.to_vec();
        for r in 0..nq {
            let sum: f64 = wv[r * nk..(r + 1) * nk].iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return CheckOutcome::new(
                    "masked-attention",
                    false,
                    format!("seed {seed}: row {r} sums to {sum}"),
                );
            }
            for c in 0..nk {
                if !allow[r * nk + c] && wv[r * nk + c] > 1e-6 {
                    return CheckOutcome::new(
                        "masked-attention",
                        false,
                        format!("seed {seed}: blocked ({r},{c}) weight {}", wv[r * nk + c]),
                    );
                }
            }
        }
        // an all-blocked row must be rejected before the kernel
        let mut bad = allow.clone();
        for c in 0..nk {
            bad[c] = false;
        }
        if ops::attention(&q, &k, &v, Some(&Rc::new(bad))).is_ok() {
            return CheckOutcome::new(
                "masked-attention",
                false,
                format!("seed {seed}: all-blocked row not rejected"),
            );
        }
    }
    CheckOutcome::new(
        "masked-attention",
        true,
        format!("{cases} random layers satisfy the weight invariants"),
    )
}

/// Convolution against a naive nested-loop reference.
pub fn check_conv_oracle(cases: usize) -> CheckOutcome {
    for seed in 0..cases as u64 {
        let mut rng = rng_for(seed, "selftest-conv", 0);
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(3..8), rng.gen_range(3..8));
        let stride = rng.gen_range(1..=2);
        let xv: Vec<f64> = (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..cout * cin * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(xv.clone(), &[cin, h, w]).expect("shape");
        let wt = Tensor::from_vec(wv.clone(), &[cout, cin, 3, 3]).expect("shape");
        let y = match ops::conv2d(&x, &wt, None, stride, 1) {
            Ok(y) => y.to_vec(),
            Err(e) => return CheckOutcome::new("conv-oracle", false, format!("seed {seed}: {e}")),
        };
        let ho = (h + 2 - 3) / stride + 1;
        let wo = (w + 2 - 3) / stride + 1;
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as i64 - 1;
                                let ix = (ox * stride + kx) as i64 - 1;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += xv[ci * h * w + (iy as usize) * w + ix as usize]
                                    * wv[((co * cin + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    let got = y[co * ho * wo + oy * wo + ox];
                    if (got - acc).abs() > 1e-6 {
                        return CheckOutcome::new(
                            "conv-oracle",
                            false,
                            format!("seed {seed}: ({co},{oy},{ox}) {got} vs {acc}"),
                        );
                    }
                }
            }
        }
    }
    CheckOutcome::new(
        "conv-oracle",
        true,
        format!("{cases} random convolutions match the nested-loop reference"),
    )
}

/// AdamW single-step closed form and the LR schedule values.
pub fn check_optimizer() -> CheckOutcome {
    use crate::nn::{init_zeros, VarStore};
    use crate::optim::{lr_at, AdamW, ADAM_EPS};
    let mut vs = VarStore::<f64>::new();
    let p = init_zeros(&mut vs, "w", &[1]);
    p.set_data(&[0.7]);
    let g = 0.3;
    let loss = ops::mul(&p, &Tensor::from_vec(vec![g], &[1]).expect("shape")).expect("mul");
    loss.backward().expect("backward");
    let mut opt = AdamW::new(0.05);
    let lr = 1e-3;
    opt.step(&vs, lr, lr).expect("step");
    let expect = 0.7 - lr * 0.05 * 0.7 - lr * g / ((g * g).sqrt() + ADAM_EPS);
    let got = p.to_vec()[0];
    if (got - expect).abs() > 1e-12 {
        return CheckOutcome::new(
            "adamw-closed-form",
            false,
            format!("{got} vs closed form {expect}"),
        );
    }
    let cfg = crate::config::TrainConfig {
        total_iters: 100,
        ..Default::default()
    };
    let pairs = [(0usize, 1e-4), (92, 1e-5), (97, 1e-6)];
    for (iter, want) in pairs {
        let (main, backbone) = lr_at(iter, &cfg);
        if (main - want).abs() > 1e-15 || (backbone - want * 0.1).abs() > 1e-15 {
            return CheckOutcome::new(
                "adamw-closed-form",
                false,
                format!("lr_at({iter}) = {main}, want {want}"),
            );
        }
    }
    CheckOutcome::new(
        "adamw-closed-form",
        true,
        "single-step update and schedule match the closed form".into(),
    )
}

/// Dataset determinism: identical (seed, index) scenes bit for bit.
pub fn check_scene_determinism() -> CheckOutcome {
    let spec = DatasetSpec {
        num_images: 4,
        ..Default::default()
    };
    for i in 0..spec.num_images {
        let a = match generate_scene(&spec, i) {
            Ok(s) => s,
            Err(e) => return CheckOutcome::new("scene-determinism", false, e.to_string()),
        };
        let b = generate_scene(&spec, i).expect("second run");
        if a.image != b.image || a.instances.len() != b.instances.len() {
            return CheckOutcome::new(
                "scene-determinism",
                false,
                format!("scene {i} differs between runs"),
            );
        }
    }
    CheckOutcome::new(
        "scene-determinism",
        true,
        "regenerated scenes are bit-identical".into(),
    )
}

/// The quick oracle suites (everything except the model gradcheck).
pub fn run_oracle_suites(quick: bool) -> Vec<CheckOutcome> {
    let n = if quick { 50 } else { 200 };
    vec![
        check_hungarian(if quick { 100 } else { 500 }),
        check_local_maximum_selection(n),
        check_rle_roundtrip(n),
        check_masked_attention(n),
        check_conv_oracle(n),
        check_optimizer(),
        check_scene_determinism(),
    ]
}

/// Model-level gradient audit; `quick` lowers the per-group sample count.
pub fn run_gradcheck_suite(quick: bool) -> Result<Vec<CheckOutcome>> {
    let samples = if quick { 20 } else { 200 };
    let reports = model_gradcheck(samples, 1e-4, 1e-4)?;
    Ok(reports
        .into_iter()
        .map(|(group, r)| {
            CheckOutcome::new(
                &format!("gradcheck/{group}"),
                r.passed,
                format!(
                    "max rel err {:.3e} at {}[{}] over {} probes",
                    r.max_relative_error, r.worst_param, r.worst_coordinate, r.checked
                ),
            )
        })
        .collect())
}

/// Everything; returns Err only on infrastructure failure (the outcomes
/// carry pass/fail).
pub fn run_all(quick: bool) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = run_oracle_suites(quick);
    outcomes.extend(run_gradcheck_suite(quick)?);
    Ok(outcomes)
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}
