//! Block-parallel generation: prompt prefill, per-block Gaussian
//! initialization, K-step denoising toward the predicted clean block,
//! classifier-free guidance, sign projection, EOS handling, and KV-cache
//! advancement.
//!
//! Guidance convention: `a0 = a0_uncond + w * (a0_cond - a0_uncond)`, so
//! w=1 is neutral. The neutral case skips the unconditional branch
//! entirely, which makes the w=1 identity bitwise rather than approximate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::codec::{self, CodecConfig};
use crate::error::{Error, Result};
use crate::head::{DiffHead, NoisyBlock};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Uniform,
    Cosine,
}

/// Descending timestep grid t_K=1 > ... > t_0=0 plus the guidance scale.
#[derive(Debug, Clone)]
pub struct SamplerSchedule {
    pub steps: usize,
    /// grid[k] = t_k, indexed 0..=K; grid[K] = 1, grid[0] = 0.
    pub grid: Vec<f64>,
    pub guidance_scale: f64,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind, guidance_scale: f64) -> Result<SamplerSchedule> {
    if steps == 0 {
        return Err(Error::Domain("make_schedule: K must be >= 1".into()));
    }
    let grid: Vec<f64> = (0..=steps)
        .map(|k| {
            let u = k as f64 / steps as f64;
            match kind {
                ScheduleKind::Uniform => u,
                ScheduleKind::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * u).cos()),
            }
        })
        .collect();
    debug_assert_eq!(grid[0], 0.0);
    debug_assert_eq!(grid[steps], 1.0);
    Ok(SamplerSchedule {
        steps,
        grid,
        guidance_scale,
    })
}

/// One update of the current state toward the guided clean prediction:
/// `(t_{k-1}/t_k) * A_{t_k} + (1 - t_{k-1}/t_k) * a0_hat`.
pub fn denoise_step<T: Scalar>(
    head: &DiffHead<T>,
    state: &Tensor<T>,
    t_k: f64,
    t_km1: f64,
    cond: &Tensor<T>,
    guidance_scale: f64,
) -> Result<Tensor<T>> {
    if t_k <= 0.0 {
        return Err(Error::Domain("denoise_step: t_k must be positive".into()));
    }
    if t_km1 >= t_k {
        return Err(Error::Domain(format!(
            "denoise_step: requires t_k > t_km1, got {t_k} <= {t_km1}"
        )));
    }
    let noisy = NoisyBlock {
        values: state.detach(),
        t: t_k,
    };
    let a0 = if guidance_scale == 1.0 {
        head.denoise(&noisy, cond)?
    } else {
        let cond_pred = head.denoise(&noisy, cond)?;
        let uncond_pred = head.denoise(&noisy, &head.null_condition()?)?;
        uncond_pred.add(&cond_pred.sub(&uncond_pred)?.scale(guidance_scale))?
    };
    let ratio = t_km1 / t_k;
    state.scale(ratio).add(&a0.scale(1.0 - ratio))
}

/// Run the full K-step loop for one block from Gaussian init, then project
/// onto the hypercube. Also reports how many positions decoded to
/// out-of-vocabulary patterns.
pub fn generate_block<T: Scalar>(
    head: &DiffHead<T>,
    codec: &CodecConfig,
    cond: &Tensor<T>,
    schedule: &SamplerSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<BlockDraw<T>> {
    let m = head.cfg.block_size;
    let b = head.cfg.code_length;
    let mut state: Tensor<T> = Tensor::randn(vec![m, b], rng);
    let mut head_calls = 0usize;
    for k in (1..=schedule.steps).rev() {
        state = denoise_step(
            head,
            &state,
            schedule.grid[k],
            schedule.grid[k - 1],
            cond,
            schedule.guidance_scale,
        )?;
        head_calls += 1;
    }
    let codes = codec::sign_project(&state);
    let (ids, fallbacks) = codec::decode_block(&codes, codec)?;
    Ok(BlockDraw {
        codes,
        ids,
        fallback_count: fallbacks,
        head_calls,
    })
}

pub struct BlockDraw<T: Scalar> {
    pub codes: Tensor<T>,
    pub ids: Vec<u32>,
    pub fallback_count: usize,
    pub head_calls: usize,
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Keep generating past EOS; used by fixed-length benchmarks.
    pub ignore_eos: bool,
}

#[derive(Debug, Clone)]
pub struct GenerateReport {
    pub tokens: Vec<u32>,
    pub backbone_calls: usize,
    pub head_calls: usize,
    pub fallback_count: usize,
    pub prefill_secs: f64,
    pub decode_secs: f64,
}

/// Algorithm: prefill the prompt through the block-causal backbone, then
/// alternate blockwise denoising with single-block cache updates. The
/// emitted text truncates at the first EOS, but the whole realized block is
/// committed to the cache before the loop breaks.
pub fn generate<T: Scalar>(
    backbone: &Backbone<T>,
    head: &DiffHead<T>,
    codec: &CodecConfig,
    prompt_ids: &[u32],
    schedule: &SamplerSchedule,
    opts: &GenerateOptions,
) -> Result<GenerateReport> {
    let m = codec.block_size;
    let prompt = codec::encode_prompt(prompt_ids, codec)?;
    if prompt.len() > backbone.cfg.max_seq_len {
        return Err(Error::Domain(format!(
            "prompt occupies {} positions, max_seq_len is {}",
            prompt.len(),
            backbone.cfg.max_seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let prefill_start = std::time::Instant::now();
    let codes: Tensor<T> = prompt.codes_tensor(codec);
    let (contexts, mut cache) = backbone.forward_full(&codes, None)?;
    let mut cond = contexts
        .slice_rows(prompt.len() - m, m)?
        .detach();
    let prefill_secs = prefill_start.elapsed().as_secs_f64();

    let mut tokens: Vec<u32> = Vec::new();
    let mut backbone_calls = 0usize;
    let mut head_calls = 0usize;
    let mut fallback_count = 0usize;
    let max_blocks = opts.max_new_tokens.div_ceil(m);
    let decode_start = std::time::Instant::now();
    for _ in 0..max_blocks {
        let draw = generate_block(head, codec, &cond, schedule, &mut rng)?;
        head_calls += draw.head_calls;
        fallback_count += draw.fallback_count;
        let eos_pos = if opts.ignore_eos {
            None
        } else {
            draw.ids.iter().position(|&id| id == codec.eos_id)
        };
        let take = eos_pos
            .unwrap_or(m)
            .min(opts.max_new_tokens - tokens.len());
        tokens.extend_from_slice(&draw.ids[..take]);
        // The realized block enters the cache whole, post-EOS positions
        // included, before any break; its contexts condition the next block.
        let ctx = backbone.forward_block(&draw.codes, &mut cache)?;
        backbone_calls += 1;
        if eos_pos.is_some() || tokens.len() >= opts.max_new_tokens {
            break;
        }
        cond = ctx.detach();
    }
    let decode_secs = decode_start.elapsed().as_secs_f64();
    Ok(GenerateReport {
        tokens,
        backbone_calls,
        head_calls,
        fallback_count,
        prefill_secs,
        decode_secs,
    })
}
