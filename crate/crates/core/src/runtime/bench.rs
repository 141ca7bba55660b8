//! Batch-1 latency benchmark over a resolution sweep. Timing covers the
//! raw network forward only by default; a flag includes decode + NMS for
//! end-to-end numbers. Model construction, input generation and report
//! serialization are never inside the timed region.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::decode::{decode_detections, nms};
use crate::network::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub h: usize,
    pub w: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub min_ms: f64,
    /// 1000 / mean_ms.
    pub fps: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub model_label: String,
    pub device: String,
    pub threads: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub rows: Vec<BenchRow>,
    /// Unix seconds at report creation.
    pub timestamp: u64,
}

pub const DEFAULT_RESOLUTIONS: [(usize, usize); 4] =
    [(256, 384), (256, 512), (384, 640), (768, 1280)];

fn host_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{cpu} ({})", std::env::consts::OS)
}

fn percentile(sorted_ms: &[f64], q: f64) -> f64 {
    let n = sorted_ms.len();
    let idx = ((n as f64 * q).ceil() as usize).clamp(1, n) - 1;
    sorted_ms[idx]
}

/// Times one closure invocation on the monotonic clock; a zero-length or
/// backwards reading is retried once, then reported as a clock error.
fn time_once(f: &mut dyn FnMut()) -> Result<f64> {
    for _ in 0..2 {
        let t0 = Instant::now();
        f();
        let t1 = Instant::now();
        if let Some(d) = t1.checked_duration_since(t0) {
            return Ok(d.as_secs_f64() * 1000.0);
        }
    }
    Err(Error::Clock("monotonic clock went backwards twice".into()))
}

pub fn benchmark(
    model: &Model,
    resolutions: &[(usize, usize)],
    warmup: usize,
    iters: usize,
    threads: usize,
    include_post: bool,
) -> Result<BenchReport> {
    if iters < 10 {
        return Err(Error::InvalidConfig(format!("iters must be >= 10, got {iters}")));
    }
    if resolutions.is_empty() {
        return Err(Error::InvalidConfig("no resolutions given".into()));
    }
    let mut res: Vec<(usize, usize)> = resolutions.to_vec();
    for &(h, w) in &res {
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::InvalidConfig(format!(
                "resolution {h}x{w} must be positive and divisible by 32"
            )));
        }
    }
    res.sort_by_key(|&(h, w)| h * w);

    let mut rows = Vec::with_capacity(res.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE7C);
    for (h, w) in res {
        let input = Tensor::from_fn([1, 3, h, w], |_, _, _, _| rng.gen_range(0.0..1.0f32));
        let mut run = || {
            let raw = model.forward(&input).expect("benchmark forward");
            if include_post {
                let dets = decode_detections(&raw, &model.config, 0.25);
                let _ = nms(&dets, 0.5);
            }
            std::hint::black_box(&raw.drivable);
        };
        for _ in 0..warmup {
            run();
        }
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            times.push(time_once(&mut run)?);
        }
        let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
        let mut sorted = times.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(BenchRow {
            h,
            w,
            mean_ms,
            p50_ms: percentile(&sorted, 0.50),
            p90_ms: percentile(&sorted, 0.90),
            min_ms: sorted[0],
            fps: 1000.0 / mean_ms,
        });
    }

    Ok(BenchReport {
        model_label: model.config.backbone.label().to_string(),
        device: host_description(),
        threads,
        warmup_iters: warmup,
        timed_iters: iters,
        rows,
        timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    })
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_text_table(&self) -> String {
        let mut s = format!(
            "{} on {} (threads={}, warmup={}, iters={})\n{:>10} {:>10} {:>10} {:>10} {:>10} {:>8}\n",
            self.model_label,
            self.device,
            self.threads,
            self.warmup_iters,
            self.timed_iters,
            "res",
            "mean_ms",
            "p50_ms",
            "p90_ms",
            "min_ms",
            "fps"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>10} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>8.2}\n",
                format!("{}x{}", r.h, r.w),
                r.mean_ms,
                r.p50_ms,
                r.p90_ms,
                r.min_ms,
                r.fps
            ));
        }
        s
    }
}
