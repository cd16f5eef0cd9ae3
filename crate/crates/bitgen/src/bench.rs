//! Decode throughput benchmark: fixed-length generation swept over block
//! sizes, reporting call counts and wall-clock rates. The point of the
//! architecture is that backbone calls scale as ceil(T/m) while denoiser
//! calls scale as K * ceil(T/m); the bench both asserts those counts and
//! times them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::codec::CodecConfig;
use crate::error::Result;
use crate::head::{DiffHead, HeadConfig};
use crate::sample::{generate, make_schedule, GenerateOptions, ScheduleKind};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub block_size: usize,
    pub tokens: usize,
    pub backbone_calls: usize,
    pub head_calls: usize,
    pub prefill_secs: f64,
    pub decode_secs: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub tokens: usize,
    pub steps: usize,
    pub block_sizes: Vec<usize>,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tokens: 64,
            steps: 15,
            block_sizes: vec![1, 2, 4, 8],
            hidden_size: 64,
            num_layers: 2,
            seed: 1,
        }
    }
}

fn bench_model<T: Scalar>(
    m: usize,
    cfg: &BenchConfig,
) -> Result<(Backbone<T>, DiffHead<T>, CodecConfig)> {
    let codec = CodecConfig::derive(259, m, 256, 257)?;
    let bcfg = BackboneConfig {
        hidden_size: cfg.hidden_size,
        num_layers: cfg.num_layers,
        num_heads: 4,
        mlp_ratio: 4,
        block_size: m,
        max_seq_len: 2 * cfg.tokens + 4 * m,
        rope_base: 10_000.0,
    };
    let hcfg = HeadConfig {
        head_hidden: cfg.hidden_size / 2,
        head_layers: 2,
        block_size: m,
        code_length: codec.code_length as usize,
        cond_size: cfg.hidden_size,
        time_embed_dim: 32,
        mlp_ratio: 4,
        num_heads: 2,
        cross_mixing: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let backbone = Backbone::init(bcfg, codec.code_length as usize, &mut rng)?;
    let head = DiffHead::init(hcfg, &mut rng)?;
    Ok((backbone, head, codec))
}

/// One row per block size: generate `tokens` tokens past EOS with guidance
/// on, so every row does identical work per token modulo m.
pub fn run_bench<T: Scalar>(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &m in &cfg.block_sizes {
        let (backbone, head, codec) = bench_model::<T>(m, cfg)?;
        let schedule = make_schedule(cfg.steps, ScheduleKind::Uniform, 9.0)?;
        let opts = GenerateOptions {
            max_new_tokens: cfg.tokens,
            seed: cfg.seed,
            ignore_eos: true,
        };
        let prompt: Vec<u32> = (0..4u32).collect();
        let report = generate(&backbone, &head, &codec, &prompt, &schedule, &opts)?;
        rows.push(BenchRow {
            block_size: m,
            tokens: report.tokens.len(),
            backbone_calls: report.backbone_calls,
            head_calls: report.head_calls,
            prefill_secs: report.prefill_secs,
            decode_secs: report.decode_secs,
            tokens_per_sec: report.tokens.len() as f64 / report.decode_secs.max(1e-9),
        });
    }
    Ok(rows)
}

pub fn format_table(rows: &[BenchRow], steps: usize) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>2}  {:>6}  {:>14}  {:>10}  {:>12}  {:>11}  {:>10}\n",
        "m", "tokens", "backbone calls", "head calls", "prefill (s)", "decode (s)", "tok/s"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:>2}  {:>6}  {:>14}  {:>10}  {:>12.4}  {:>11.4}  {:>10.1}\n",
            r.block_size,
            r.tokens,
            r.backbone_calls,
            r.head_calls,
            r.prefill_secs,
            r.decode_secs,
            r.tokens_per_sec
        ));
    }
    out.push_str(&format!("(K = {steps} denoising steps per block)\n"));
    out
}
