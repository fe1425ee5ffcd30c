//! Wall-clock latency of one inference (forward + postprocess) at batch
//! size 1, reported as mean/median/p95 and derived FPS.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::FastInst;
use crate::postprocess::postprocess;
use crate::rng::rng_for;
use crate::tensor::{with_no_grad, Elem, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub warmup: usize,
    pub iters: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub config_digest: String,
}

pub fn benchmark_latency<E: Elem>(
    model: &FastInst<E>,
    input_hw: (usize, usize),
    warmup: usize,
    iters: usize,
    seed: u64,
) -> Result<BenchReport> {
    assert!(iters >= 1, "benchmark needs at least one iteration");
    let (h, w) = input_hw;
    let mut rng = rng_for(seed, "bench", 0);
    let image = Tensor::<E>::from_vec(
        (0..3 * h * w)
            .map(|_| E::from_f64(rng.gen_range(0.0..1.0)))
            .collect(),
        &[3, h, w],
    )?;

    let run = |image: &Tensor<E>| -> Result<()> {
        with_no_grad(|| -> Result<()> {
            let outputs = model.forward(image, None)?;
            let _ = postprocess(outputs.final_prediction(), outputs.e3_hw, (h, w))?;
            Ok(())
        })
    };

    for _ in 0..warmup {
        run(&image)?;
    }
    let mut times_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        run(&image)?;
        times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = times_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean_ms = times_ms.iter().sum::<f64>() / iters as f64;
    let median_ms = sorted[(iters - 1) / 2];
    let p95_ms = sorted[((iters as f64 * 0.95).ceil() as usize - 1).min(iters - 1)];
    Ok(BenchReport {
        mean_ms,
        median_ms,
        p95_ms,
        fps: 1e3 / mean_ms,
        warmup,
        iters,
        input_h: h,
        input_w: w,
        config_digest: model.cfg.digest(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn single_iteration_collapses_statistics() {
        let mut cfg = RunConfig::default();
        cfg.pixel.dim = 8;
        cfg.decoder.d = 0;
        cfg.decoder.heads = 2;
        cfg.decoder.ffn_dim = 16;
        cfg.query.na = 4;
        cfg.query.nb = 1;
        let model = FastInst::<f32>::new(&cfg, 0).unwrap();
        let report = benchmark_latency(&model, (64, 64), 0, 1, 0).unwrap();
        assert_eq!(report.mean_ms, report.median_ms);
        assert_eq!(report.mean_ms, report.p95_ms);
        assert!(!report.config_digest.is_empty());
        assert_eq!((report.input_h, report.input_w), (64, 64));
    }
}
