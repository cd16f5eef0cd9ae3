//! Independent oracles and the property-verification suite.
//!
//! Everything here deliberately avoids the graph engine where possible: the
//! causal reference model is plain `Vec<f64>` loop arithmetic sharing only
//! the weights, the mask oracle re-derives visibility from first principles,
//! and gradients are cross-checked against central finite differences. The
//! CLI `verify` subcommand runs the whole suite and prints one line per
//! property.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, KvCache};
use crate::codec::{self, CodecConfig};
use crate::error::Result;
use crate::head::{diffusion_loss, forward_noise, DiffHead, HeadConfig, NoisyBlock};
use crate::sample::{denoise_step, make_schedule, ScheduleKind};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Mask oracle
// ---------------------------------------------------------------------------

/// Ground-truth visibility by direct construction: positions are dealt into
/// consecutive runs of length m, and j is visible from i when j's run does
/// not start after i's run.
pub fn mask_visibility_oracle(len: usize, m: usize) -> Vec<Vec<bool>> {
    let mut run_of = Vec::with_capacity(len);
    let mut run = 0usize;
    let mut filled = 0usize;
    for _ in 0..len {
        if filled == m {
            run += 1;
            filled = 0;
        }
        run_of.push(run);
        filled += 1;
    }
    (0..len)
        .map(|i| (0..len).map(|j| run_of[j] <= run_of[i]).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Plain-loop causal reference model (block size 1 semantics)
// ---------------------------------------------------------------------------

fn ref_ln(row: &[f64], eps: f64) -> Vec<f64> {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
    let inv = 1.0 / (var + eps).sqrt();
    row.iter().map(|x| (x - mean) * inv).collect()
}

fn ref_silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `rows x inner` times `inner x cols`, row-major.
fn ref_matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for k in 0..inner {
            let av = a[i * inner + k];
            for j in 0..cols {
                out[i * cols + j] += av * b[k * cols + j];
            }
        }
    }
    out
}

fn ref_rope_row(row: &mut [f64], pos: usize, base: f64) {
    let c = row.len();
    for j in 0..c / 2 {
        let inv_freq = base.powf(-2.0 * j as f64 / c as f64);
        let theta = pos as f64 * inv_freq;
        let (sn, cs) = theta.sin_cos();
        let x0 = row[2 * j];
        let x1 = row[2 * j + 1];
        row[2 * j] = x0 * cs - x1 * sn;
        row[2 * j + 1] = x0 * sn + x1 * cs;
    }
}

/// Ordinary next-token causal transformer written with explicit loops,
/// sharing the backbone's weights. At block size 1 the block-causal model
/// must reproduce this to fp64 tolerance.
pub fn causal_reference_contexts(backbone: &Backbone<f64>, codes: &Tensor<f64>) -> Result<Vec<f64>> {
    let cfg = &backbone.cfg;
    let n = codes.rows();
    let b = codes.cols();
    let d = cfg.hidden_size;
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let eps = 1e-6;
    let p = &backbone.params;

    // Lift MLP.
    let w1 = p.lift_w1.to_f64_vec();
    let b1 = p.lift_b1.to_f64_vec();
    let w2 = p.lift_w2.to_f64_vec();
    let b2 = p.lift_b2.to_f64_vec();
    let mut h = ref_matmul(&codes.to_f64_vec(), &w1, n, b, d);
    for i in 0..n {
        for j in 0..d {
            h[i * d + j] = ref_silu(h[i * d + j] + b1[j]);
        }
    }
    let mut x = ref_matmul(&h, &w2, n, d, d);
    for i in 0..n {
        for j in 0..d {
            x[i * d + j] += b2[j];
        }
    }

    for layer in &p.layers {
        let wq = layer.wq.to_f64_vec();
        let wk = layer.wk.to_f64_vec();
        let wv = layer.wv.to_f64_vec();
        let wo = layer.wo.to_f64_vec();
        let mut normed = vec![0.0; n * d];
        for i in 0..n {
            normed[i * d..(i + 1) * d].copy_from_slice(&ref_ln(&x[i * d..(i + 1) * d], eps));
        }
        let q = ref_matmul(&normed, &wq, n, d, d);
        let k = ref_matmul(&normed, &wk, n, d, d);
        let v = ref_matmul(&normed, &wv, n, d, d);
        let mut attn = vec![0.0; n * d];
        for head in 0..heads {
            let col0 = head * hd;
            // Rotated per-head q/k at absolute positions.
            let mut qh = vec![0.0; n * hd];
            let mut kh = vec![0.0; n * hd];
            for i in 0..n {
                qh[i * hd..(i + 1) * hd]
                    .copy_from_slice(&q[i * d + col0..i * d + col0 + hd]);
                kh[i * hd..(i + 1) * hd]
                    .copy_from_slice(&k[i * d + col0..i * d + col0 + hd]);
                ref_rope_row(&mut qh[i * hd..(i + 1) * hd], i, cfg.rope_base);
                ref_rope_row(&mut kh[i * hd..(i + 1) * hd], i, cfg.rope_base);
            }
            let scale = 1.0 / (hd as f64).sqrt();
            for i in 0..n {
                // Scores over the causal window j <= i only.
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += qh[i * hd + c] * kh[j * hd + c];
                    }
                    scores.push(dot * scale);
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    sum += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let w = s / sum;
                    for c in 0..hd {
                        attn[i * d + col0 + c] += w * v[j * d + col0 + c];
                    }
                }
            }
        }
        let proj = ref_matmul(&attn, &wo, n, d, d);
        for i in 0..n * d {
            x[i] += proj[i];
        }
        // SwiGLU MLP.
        let f = cfg.mlp_ratio * d;
        let wg = layer.w_gate.to_f64_vec();
        let wu = layer.w_up.to_f64_vec();
        let wd = layer.w_down.to_f64_vec();
        let mut normed = vec![0.0; n * d];
        for i in 0..n {
            normed[i * d..(i + 1) * d].copy_from_slice(&ref_ln(&x[i * d..(i + 1) * d], eps));
        }
        let gate = ref_matmul(&normed, &wg, n, d, f);
        let up = ref_matmul(&normed, &wu, n, d, f);
        let mut act = vec![0.0; n * f];
        for i in 0..n * f {
            act[i] = ref_silu(gate[i]) * up[i];
        }
        let down = ref_matmul(&act, &wd, n, f, d);
        for i in 0..n * d {
            x[i] += down[i];
        }
    }
    if p.layers.is_empty() {
        return Ok(x);
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        out[i * d..(i + 1) * d].copy_from_slice(&ref_ln(&x[i * d..(i + 1) * d], eps));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central finite difference of `loss_fn` with respect to one element of a
/// leaf parameter, restoring the original value afterwards.
pub fn finite_diff<F>(param: &Tensor<f64>, idx: usize, mut loss_fn: F) -> Result<f64>
where
    F: FnMut() -> Result<f64>,
{
    let original = param.to_vec();
    let x = original[idx];
    let h = 1e-5 * x.abs().max(1.0);
    let mut bumped = original.clone();
    bumped[idx] = x + h;
    param.set_data(bumped.clone())?;
    let up = loss_fn()?;
    bumped[idx] = x - h;
    param.set_data(bumped)?;
    let down = loss_fn()?;
    param.set_data(original)?;
    Ok((up - down) / (2.0 * h))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

fn grad_check_model(seed: u64) -> Result<(Backbone<f64>, DiffHead<f64>)> {
    // The pinned gradient-suite geometry: m=2, B=3, d=8, one layer each.
    let bcfg = BackboneConfig {
        hidden_size: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        block_size: 2,
        max_seq_len: 64,
        rope_base: 10_000.0,
    };
    let hcfg = HeadConfig {
        head_hidden: 8,
        head_layers: 1,
        block_size: 2,
        code_length: 3,
        cond_size: 8,
        time_embed_dim: 8,
        mlp_ratio: 2,
        num_heads: 2,
        cross_mixing: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = Backbone::init(bcfg, 3, &mut rng)?;
    let head = DiffHead::init(hcfg, &mut rng)?;
    // Zero-initialized parameters would make most gradients vanish
    // identically and the check vacuous; give every parameter generic values.
    for (_, p) in backbone.named_params().iter().chain(head.named_params().iter()) {
        let n = p.numel();
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 0.4 - 0.2).collect();
        p.set_data(data)?;
    }
    Ok((backbone, head))
}

/// End-to-end gradient check: codes -> backbone -> shifted condition ->
/// noising -> head -> loss, including a null-condition branch so the
/// guidance path and every head parameter carry gradient. Checks every
/// element of every parameter unless `max_per_param` limits it.
pub fn full_pipeline_grad_check(seed: u64, max_per_param: Option<usize>) -> Result<GradCheckReport> {
    let (backbone, head) = grad_check_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b9);
    let codes: Tensor<f64> = Tensor::randn(vec![4, 3], &mut rng);
    let clean: Tensor<f64> = {
        let raw: Tensor<f64> = Tensor::randn(vec![2, 3], &mut rng);
        codec::sign_project(&raw)
    };
    let noise: Tensor<f64> = Tensor::randn(vec![2, 3], &mut rng);
    let t = 0.37;

    let loss_graph = |bb: &Backbone<f64>, hd: &DiffHead<f64>| -> Result<Tensor<f64>> {
        let (ctx, _) = bb.forward_full(&codes, None)?;
        let cond = ctx.slice_rows(0, 2)?;
        let noisy = forward_noise(&clean, t, &noise)?;
        let pred = hd.denoise(&noisy, &cond)?;
        let cond_loss = diffusion_loss(&pred, &clean, &[true, true])?;
        let noisy2 = forward_noise(&clean, t, &noise)?;
        let pred2 = hd.denoise(&noisy2, &hd.null_condition()?)?;
        let uncond_loss = diffusion_loss(&pred2, &clean, &[true, true])?;
        cond_loss.add(&uncond_loss)
    };

    let params: Vec<(String, Tensor<f64>)> = backbone
        .named_params()
        .into_iter()
        .chain(head.named_params())
        .collect();
    for (_, p) in &params {
        p.zero_grad();
    }
    let loss = loss_graph(&backbone, &head)?;
    loss.backward()?;
    let grads: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(name, p)| {
            (
                name.clone(),
                p.grad().unwrap_or_else(|| vec![0.0; p.numel()]),
            )
        })
        .collect();

    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    let mut checked = 0usize;
    for ((name, p), (_, g)) in params.iter().zip(grads.iter()) {
        let n = p.numel();
        let take = max_per_param.unwrap_or(n).min(n);
        // Deterministic stride so subsampling still touches the whole range.
        let stride = n.div_ceil(take);
        for idx in (0..n).step_by(stride) {
            let fd = finite_diff(p, idx, || Ok(loss_graph(&backbone, &head)?.item()))?;
            let err = rel_err(g[idx], fd);
            checked += 1;
            if err > worst {
                worst = err;
                worst_param = format!("{name}[{idx}]");
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        worst_param,
        checked,
    })
}

// ---------------------------------------------------------------------------
// Jacobian probe
// ---------------------------------------------------------------------------

/// Finite-difference sensitivity of the prediction at position 0 to the
/// noisy input at position 1. Nonzero when cross mixing is on; exactly zero
/// for the factorized ablation.
pub fn cross_jacobian_probe(cross_mixing: bool, seed: u64) -> Result<f64> {
    let (_, mut head) = grad_check_model(seed)?;
    head.cfg.cross_mixing = cross_mixing;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let cond: Tensor<f64> = Tensor::randn(vec![2, 8], &mut rng);
    let base: Tensor<f64> = Tensor::randn(vec![2, 3], &mut rng);
    let b = 3usize;
    let mut max_abs = 0.0f64;
    let eval = |values: Tensor<f64>| -> Result<Vec<f64>> {
        let pred = head.denoise(&NoisyBlock { values, t: 0.5 }, &cond)?;
        Ok(pred.to_f64_vec())
    };
    for in_idx in 0..b {
        let h = 1e-6;
        let mut up = base.to_f64_vec();
        up[b + in_idx] += h;
        let mut down = base.to_f64_vec();
        down[b + in_idx] -= h;
        let pu = eval(Tensor::from_f64_vec(vec![2, b], up)?)?;
        let pd = eval(Tensor::from_f64_vec(vec![2, b], down)?)?;
        for out_idx in 0..b {
            let d = (pu[out_idx] - pd[out_idx]) / (2.0 * h);
            max_abs = max_abs.max(d.abs());
        }
    }
    Ok(max_abs)
}

// ---------------------------------------------------------------------------
// Suite driver
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct VerifyOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> VerifyOutcome {
    VerifyOutcome {
        name,
        passed,
        detail,
    }
}

fn check_codec_roundtrip() -> VerifyOutcome {
    let cfg = CodecConfig::derive(4096, 4, 0, 1).unwrap();
    for id in 0..4096u32 {
        let code = match codec::encode_token(id, &cfg) {
            Ok(c) => c,
            Err(e) => return outcome("codec-roundtrip", false, format!("encode {id}: {e}")),
        };
        if code.0.iter().any(|&b| b != 1 && b != -1) {
            return outcome("codec-roundtrip", false, format!("id {id} off hypercube"));
        }
        match codec::decode_code(&code, &cfg) {
            Ok(back) if back == id => {}
            other => return outcome("codec-roundtrip", false, format!("id {id} -> {other:?}")),
        }
    }
    outcome("codec-roundtrip", true, "4096 ids, 12-bit codes".into())
}

fn check_mask_oracle() -> VerifyOutcome {
    use crate::tensor::MASK_NEG;
    for m in 1..=4usize {
        for len in 1..=12usize {
            let mask: Tensor<f64> = match crate::backbone::build_mask(len, m) {
                Ok(t) => t,
                Err(e) => return outcome("mask-oracle", false, format!("L={len} m={m}: {e}")),
            };
            let data = mask.to_f64_vec();
            let oracle = mask_visibility_oracle(len, m);
            for i in 0..len {
                for j in 0..len {
                    let visible = data[i * len + j] == 0.0;
                    let hidden = data[i * len + j] == MASK_NEG;
                    if !(visible || hidden) || visible != oracle[i][j] {
                        return outcome(
                            "mask-oracle",
                            false,
                            format!("L={len} m={m} entry ({i},{j}) disagrees"),
                        );
                    }
                }
            }
        }
    }
    outcome("mask-oracle", true, "all L<=12, m in 1..=4".into())
}

fn check_causal_reduction() -> VerifyOutcome {
    let cfg = BackboneConfig {
        hidden_size: 16,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        block_size: 1,
        max_seq_len: 64,
        rope_base: 10_000.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let backbone = Backbone::<f64>::init(cfg, 4, &mut rng).unwrap();
    let codes: Tensor<f64> = Tensor::randn(vec![7, 4], &mut rng);
    let (ctx, _) = match backbone.forward_full(&codes, None) {
        Ok(v) => v,
        Err(e) => return outcome("causal-reduction", false, e.to_string()),
    };
    let reference = match causal_reference_contexts(&backbone, &codes) {
        Ok(v) => v,
        Err(e) => return outcome("causal-reduction", false, e.to_string()),
    };
    let max_err = ctx
        .to_f64_vec()
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    outcome(
        "causal-reduction",
        max_err < 1e-10,
        format!("max abs err {max_err:.3e} (tol 1e-10)"),
    )
}

fn check_kv_equivalence() -> VerifyOutcome {
    fn run<T: crate::tensor::Scalar>(tol: f64) -> std::result::Result<String, String> {
        let cfg = BackboneConfig {
            hidden_size: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            block_size: 2,
            max_seq_len: 64,
            rope_base: 10_000.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let backbone = Backbone::<T>::init(cfg, 4, &mut rng).map_err(|e| e.to_string())?;
        let codes: Tensor<T> = Tensor::randn(vec![8, 4], &mut rng);
        let (full, _) = backbone.forward_full(&codes, None).map_err(|e| e.to_string())?;
        let mut cache = KvCache::empty(&backbone.cfg);
        let mut inc = Vec::new();
        for n in 0..4 {
            let block = codes.slice_rows(n * 2, 2).map_err(|e| e.to_string())?;
            inc.extend(
                backbone
                    .forward_block(&block, &mut cache)
                    .map_err(|e| e.to_string())?
                    .to_f64_vec(),
            );
        }
        let max_err = full
            .to_f64_vec()
            .iter()
            .zip(inc.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if max_err < tol {
            Ok(format!("max abs err {max_err:.3e} (tol {tol:.0e})"))
        } else {
            Err(format!("max abs err {max_err:.3e} exceeds {tol:.0e}"))
        }
    }
    match (run::<f64>(1e-10), run::<f32>(1e-5)) {
        (Ok(a), Ok(b)) => outcome("kv-equivalence", true, format!("f64 {a}; f32 {b}")),
        (r64, r32) => outcome("kv-equivalence", false, format!("f64 {r64:?}; f32 {r32:?}")),
    }
}

fn check_noising_and_sampler_identities() -> VerifyOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let clean: Tensor<f64> = codec::sign_project(&Tensor::randn(vec![2, 3], &mut rng));
    let noise: Tensor<f64> = Tensor::randn(vec![2, 3], &mut rng);
    let at0 = forward_noise(&clean, 0.0, &noise).unwrap();
    if at0.values.to_f64_vec() != clean.to_f64_vec() {
        return outcome("sampler-identities", false, "t=0 is not the clean block".into());
    }
    let at1 = forward_noise(&clean, 1.0, &noise).unwrap();
    if at1.values.to_f64_vec() != noise.to_f64_vec() {
        return outcome("sampler-identities", false, "t=1 is not pure noise".into());
    }
    for kind in [ScheduleKind::Uniform, ScheduleKind::Cosine] {
        for k in [1usize, 15, 31] {
            let s = make_schedule(k, kind, 9.0).unwrap();
            if s.grid[0] != 0.0 || s.grid[k] != 1.0 {
                return outcome("sampler-identities", false, format!("endpoints off for K={k}"));
            }
            for i in 0..k {
                if s.grid[i] >= s.grid[i + 1] {
                    return outcome(
                        "sampler-identities",
                        false,
                        format!("grid not increasing at {i} for K={k}"),
                    );
                }
            }
        }
    }
    // Final-step identity and neutral guidance, on a live head.
    let (_, head) = grad_check_model(43).unwrap();
    let state: Tensor<f64> = Tensor::randn(vec![2, 3], &mut rng);
    let cond: Tensor<f64> = Tensor::randn(vec![2, 8], &mut rng);
    let last = denoise_step(&head, &state, 1.0, 0.0, &cond, 1.0).unwrap();
    let direct = head
        .denoise(&NoisyBlock { values: state.detach(), t: 1.0 }, &cond)
        .unwrap();
    if last.to_f64_vec() != direct.to_f64_vec() {
        return outcome(
            "sampler-identities",
            false,
            "final step is not the raw prediction".into(),
        );
    }
    let guided = denoise_step(&head, &state, 0.6, 0.2, &cond, 1.0).unwrap();
    let ratio = 0.2 / 0.6;
    let a0 = head
        .denoise(&NoisyBlock { values: state.detach(), t: 0.6 }, &cond)
        .unwrap();
    let manual = state.scale(ratio).add(&a0.scale(1.0 - ratio)).unwrap();
    if guided.to_f64_vec() != manual.to_f64_vec() {
        return outcome("sampler-identities", false, "w=1 is not bitwise neutral".into());
    }
    outcome("sampler-identities", true, "endpoints, monotonicity, w=1, final step".into())
}

fn check_gradients(quick: bool) -> VerifyOutcome {
    let cap = if quick { Some(4) } else { Some(24) };
    match full_pipeline_grad_check(7, cap) {
        Ok(report) => outcome(
            "gradient-check",
            report.max_rel_err < 1e-4,
            format!(
                "max rel err {:.3e} at {} over {} elements (tol 1e-4)",
                report.max_rel_err, report.worst_param, report.checked
            ),
        ),
        Err(e) => outcome("gradient-check", false, e.to_string()),
    }
}

fn check_jacobian_probe() -> VerifyOutcome {
    let mixed = match cross_jacobian_probe(true, 11) {
        Ok(v) => v,
        Err(e) => return outcome("joint-realization", false, e.to_string()),
    };
    let factored = match cross_jacobian_probe(false, 11) {
        Ok(v) => v,
        Err(e) => return outcome("joint-realization", false, e.to_string()),
    };
    outcome(
        "joint-realization",
        mixed > 1e-8 && factored == 0.0,
        format!("cross sensitivity {mixed:.3e} mixed, {factored:.3e} ablated"),
    )
}

/// Run every property check. `quick` trims the gradient subsample so the
/// suite finishes in seconds.
pub fn run_verification(quick: bool) -> Vec<VerifyOutcome> {
    vec![
        check_codec_roundtrip(),
        check_mask_oracle(),
        check_causal_reduction(),
        check_kv_equivalence(),
        check_noising_and_sampler_identities(),
        check_gradients(quick),
        check_jacobian_probe(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_matches_direct_formula() {
        for m in 1..=4 {
            for len in 1..=12 {
                let oracle = mask_visibility_oracle(len, m);
                for i in 0..len {
                    for j in 0..len {
                        assert_eq!(oracle[i][j], j / m <= i / m, "L={len} m={m} ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn fault_injection_trips_the_mask_check() {
        // A deliberately wrong mask (plain token-causal at m=2) disagrees
        // with the oracle on intra-block entries like (0,1), so the check
        // actually has teeth.
        let oracle = mask_visibility_oracle(4, 2);
        let causal_visible = |i: usize, j: usize| j <= i;
        let mut disagreements = 0;
        for i in 0..4 {
            for j in 0..4 {
                if oracle[i][j] != causal_visible(i, j) {
                    disagreements += 1;
                }
            }
        }
        assert!(disagreements > 0);
        assert!(oracle[0][1] && !causal_visible(0, 1));
    }

    #[test]
    fn reference_model_tracks_the_real_one_at_m1() {
        let out = check_causal_reduction();
        assert!(out.passed, "{}", out.detail);
    }

    #[test]
    fn quick_suite_is_all_green() {
        for out in run_verification(true) {
            assert!(out.passed, "{}: {}", out.name, out.detail);
        }
    }
}
