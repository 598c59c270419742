//! Work and memory scaling of the SEA pipeline against dense attention.
//!
//! MACs come from the thread-local counters, bytes from buffer shapes.
//! Wall-clock time is reported but carries no guarantees.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::SeaConfig;
use crate::error::{Result, SeaError};
use crate::oracle::dense_attention;
use crate::sea::{sea_forward, ForwardOptions, SeaWeights};
use crate::tensor::Tensor;
use crate::work::{self, Stage};

const F64: u64 = 8;
const INDEX: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Ascending sequence lengths.
    pub seq_lens: Vec<usize>,
    pub top_k: usize,
    pub compressed_len: usize,
    pub reps: usize,
    pub seed: u64,
    /// Template for everything but `T`, `K` and `k`.
    pub base: SeaConfig,
    /// Dense runs whose estimated footprint exceeds this are skipped.
    pub byte_cap: u64,
    /// Threads for the timing repetitions; counters always come from one thread.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seq_lens: vec![256, 512, 1024, 2048],
            top_k: 32,
            compressed_len: 64,
            reps: 5,
            seed: 0,
            base: SeaConfig::default(),
            byte_cap: 1 << 30,
            threads: 1,
        }
    }
}

/// One `(T, stage)` measurement. `macs == None` marks a skipped dense run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub seq_len: usize,
    pub stage: &'static str,
    pub macs: Option<u64>,
    /// Nonzeros of the full mask (SEA stages only).
    pub nnz: Option<u64>,
    pub wall_ms: f64,
    pub bytes: u64,
}

impl BenchRow {
    pub const HEADER: [&'static str; 6] = ["T", "stage", "MACs", "nnz", "wall_ms", "bytes"];

    pub fn fields(&self) -> [String; 6] {
        [
            self.seq_len.to_string(),
            self.stage.to_string(),
            self.macs.map_or("OOM".into(), |m| m.to_string()),
            self.nnz.map_or(String::new(), |n| n.to_string()),
            format!("{:.3}", self.wall_ms),
            self.bytes.to_string(),
        ]
    }
}

pub const SEA_TOTAL: &str = "sea_total";

/// Peak live bytes of dense attention: q, k, v, scores, probabilities, output.
pub fn dense_bytes(cfg: &SeaConfig) -> u64 {
    let (h, t, d) = (cfg.heads as u64, cfg.seq_len as u64, cfg.head_dim as u64);
    F64 * (4 * h * t * d + 2 * h * t * t)
}

/// Peak live bytes of the SEA path for a mask with `nnz` entries.
pub fn sea_bytes(cfg: &SeaConfig, nnz: u64) -> u64 {
    let (h, t, d) = (cfg.heads as u64, cfg.seq_len as u64, cfg.head_dim as u64);
    let (kk, m, hid) = (cfg.compressed_len as u64, cfg.features as u64, cfg.hidden as u64);
    let inputs = 4 * h * t * d;
    let features = 2 * h * t * m;
    let estimator = h * t * (2 * d + hid) + 2 * h * t * kk * cfg.channel_expansion as u64 + h * t * kk;
    let sparse = nnz * (INDEX + 2 * F64) + (t + 1) * INDEX;
    F64 * (inputs + features + estimator) + sparse
}

fn inputs(cfg: &SeaConfig, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = [cfg.heads, cfg.seq_len, cfg.head_dim];
    (
        Tensor::randn(s, 1.0, &mut rng),
        Tensor::randn(s, 1.0, &mut rng),
        Tensor::randn(s, 1.0, &mut rng),
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn timed<F: Fn() -> Result<()> + Sync>(reps: usize, pool: Option<&rayon::ThreadPool>, f: F) -> Result<f64> {
    let one = || -> Result<f64> {
        let start = Instant::now();
        f()?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    let times: Vec<f64> = match pool {
        Some(p) => p.install(|| (0..reps).into_par_iter().map(|_| one()).collect::<Result<_>>())?,
        None => (0..reps).map(|_| one()).collect::<Result<_>>()?,
    };
    Ok(median(times))
}

/// Runs SEA and the dense reference at every sequence length.
pub fn run_bench(b: &BenchConfig) -> Result<Vec<BenchRow>> {
    if b.seq_lens.is_empty() || b.seq_lens.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SeaError::Config("seq_lens must be non-empty and strictly ascending".into()));
    }
    if b.reps == 0 {
        return Err(SeaError::Config("reps must be at least 1".into()));
    }
    let pool = if b.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(b.threads)
                .build()
                .map_err(|e| SeaError::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut rows = Vec::new();
    for &t in &b.seq_lens {
        let cfg = SeaConfig {
            seq_len: t,
            compressed_len: b.compressed_len,
            top_k: b.top_k,
            ..b.base
        };
        cfg.validate()?;
        let w = SeaWeights::init(&cfg, b.seed);
        let (q, k, v) = inputs(&cfg, b.seed.wrapping_add(t as u64));

        work::reset();
        let out = sea_forward(&q, &k, &v, &w, &cfg, ForwardOptions { diagnostics: true, ..Default::default() })?;
        let counts = work::snapshot();
        let nnz = out.diagnostics.as_ref().map_or(0, |d| d.mask.nnz()) as u64;
        let wall = timed(b.reps, pool.as_ref(), || {
            sea_forward(&q, &k, &v, &w, &cfg, ForwardOptions::default()).map(|_| ())
        })?;
        let bytes = sea_bytes(&cfg, nnz);
        for stage in [Stage::Estimator, Stage::Mask, Stage::Sparse, Stage::Mix] {
            rows.push(BenchRow {
                seq_len: t,
                stage: stage.name(),
                macs: Some(counts.macs(stage)),
                nnz: Some(nnz),
                wall_ms: f64::NAN,
                bytes,
            });
        }
        rows.push(BenchRow {
            seq_len: t,
            stage: SEA_TOTAL,
            macs: Some(counts.sea_macs()),
            nnz: Some(nnz),
            wall_ms: wall,
            bytes,
        });

        let dbytes = dense_bytes(&cfg);
        if dbytes > b.byte_cap {
            rows.push(BenchRow {
                seq_len: t,
                stage: Stage::Dense.name(),
                macs: None,
                nnz: None,
                wall_ms: f64::NAN,
                bytes: dbytes,
            });
            continue;
        }
        work::reset();
        work::with_stage(Stage::Dense, || dense_attention(&q, &k, &v, cfg.causal))?;
        let dense_macs = work::snapshot().macs(Stage::Dense);
        let wall = timed(b.reps, pool.as_ref(), || dense_attention(&q, &k, &v, cfg.causal).map(|_| ()))?;
        rows.push(BenchRow {
            seq_len: t,
            stage: Stage::Dense.name(),
            macs: Some(dense_macs),
            nnz: None,
            wall_ms: wall,
            bytes: dbytes,
        });
    }
    Ok(rows)
}

/// MAC ratios between consecutive sequence lengths for `stage`.
/// Pairs with a skipped run are left out.
pub fn mac_ratios(rows: &[BenchRow], stage: &str) -> Vec<(usize, f64)> {
    let picked: Vec<&BenchRow> = rows.iter().filter(|r| r.stage == stage).collect();
    picked
        .windows(2)
        .filter_map(|w| match (w[0].macs, w[1].macs) {
            (Some(a), Some(b)) if a > 0 => Some((w[1].seq_len, b as f64 / a as f64)),
            _ => None,
        })
        .collect()
}
