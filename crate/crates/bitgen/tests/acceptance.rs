//! Acceptance gate: one test per release criterion, each printing a
//! [PASS]/[FAIL] line (visible under `cargo test --test acceptance --
//! --nocapture`). Thresholds that came from pilot runs are read from
//! configs/expected_results.toml rather than hard-coded.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bitgen::backbone::{build_mask, Backbone, BackboneConfig, KvCache};
use bitgen::codec::{self, CodecConfig};
use bitgen::config::RunConfig;
use bitgen::grammar::Grammar;
use bitgen::head::{forward_noise, DiffHead, HeadConfig, NoisyBlock};
use bitgen::optim::AdamWConfig;
use bitgen::sample::{
    denoise_step, generate, generate_block, make_schedule, GenerateOptions, ScheduleKind,
};
use bitgen::tensor::{Scalar, Tensor, MASK_NEG};
use bitgen::train::{load_checkpoint, save_checkpoint, Trainer};
use bitgen::verify;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn expected_results() -> toml::Value {
    let text = std::fs::read_to_string(config_path("expected_results.toml")).unwrap();
    toml::from_str(&text).unwrap()
}

fn report(criterion: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {criterion}: {detail}");
    assert!(passed, "{criterion}: {detail}");
}

#[test]
fn criterion_01_codec_roundtrip() {
    let start = Instant::now();
    let cfg = CodecConfig::derive(4096, 4, 0, 1).unwrap();
    assert_eq!(cfg.code_length, 12);
    let mut mismatches = 0usize;
    for id in 0..4096u32 {
        let code = codec::encode_token(id, &cfg).unwrap();
        if codec::decode_code(&code, &cfg).unwrap() != id {
            mismatches += 1;
        }
    }
    // Unassigned patterns land on the fallback: exercised where 2^B > V.
    let sparse = CodecConfig {
        vocab_size: 4000,
        code_length: 12,
        block_size: 1,
        bos_id: 0,
        eos_id: 1,
        fallback_id: 1,
        bit_order: codec::BitOrder::BigEndian,
    };
    let mut fallback_hits = 0usize;
    for pattern in 0u32..4096 {
        let bits = codec::BitCode(
            (0..12)
                .map(|j| if (pattern >> (11 - j)) & 1 == 1 { 1i8 } else { -1i8 })
                .collect(),
        );
        let id = codec::decode_code(&bits, &sparse).unwrap();
        if pattern >= 4000 {
            assert_eq!(id, sparse.fallback_id);
            fallback_hits += 1;
        } else {
            assert_eq!(id, pattern);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "codec roundtrip",
        mismatches == 0 && fallback_hits == 96 && secs < 1.0,
        &format!("V=4096 exhaustive, {fallback_hits} fallback patterns at V=4000, {secs:.2}s"),
    );
}

#[test]
fn criterion_02_mask_oracle() {
    let mut entries = 0usize;
    for m in 1..=4usize {
        for len in 1..=12usize {
            let mask: Tensor<f64> = build_mask(len, m).unwrap();
            let data = mask.to_f64_vec();
            let oracle = verify::mask_visibility_oracle(len, m);
            for i in 0..len {
                for j in 0..len {
                    let expect = if oracle[i][j] { 0.0 } else { MASK_NEG };
                    assert_eq!(data[i * len + j], expect, "L={len} m={m} ({i},{j})");
                    entries += 1;
                }
            }
        }
    }
    // m=1 equals the reference causal mask bitwise.
    for len in 1..=12usize {
        let mask: Tensor<f64> = build_mask(len, 1).unwrap();
        let data = mask.to_f64_vec();
        for i in 0..len {
            for j in 0..len {
                let expect = if j <= i { 0.0 } else { MASK_NEG };
                assert_eq!(data[i * len + j], expect);
            }
        }
    }
    report("mask oracle", true, &format!("{entries} entries over L<=12, m in 1..=4"));
}

#[test]
fn criterion_03_m1_reduction() {
    let cfg = BackboneConfig {
        hidden_size: 16,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        block_size: 1,
        max_seq_len: 64,
        rope_base: 10_000.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let backbone = Backbone::<f64>::init(cfg, 4, &mut rng).unwrap();
    let codes: Tensor<f64> = Tensor::randn(vec![8, 4], &mut rng);
    let (ctx, _) = backbone.forward_full(&codes, None).unwrap();
    let reference = verify::causal_reference_contexts(&backbone, &codes).unwrap();
    let max_err = ctx
        .to_f64_vec()
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    report(
        "m=1 reduction",
        max_err < 1e-10,
        &format!("fp64 L=8 max abs err {max_err:.3e} (tol 1e-10)"),
    );
}

fn kv_equivalence_err<T: Scalar>() -> f64 {
    let cfg = BackboneConfig {
        hidden_size: 16,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        block_size: 2,
        max_seq_len: 64,
        rope_base: 10_000.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let backbone = Backbone::<T>::init(cfg, 4, &mut rng).unwrap();
    let codes: Tensor<T> = Tensor::randn(vec![8, 4], &mut rng);
    let (full, _) = backbone.forward_full(&codes, None).unwrap();
    let mut cache = KvCache::empty(&backbone.cfg);
    let mut inc = Vec::new();
    for n in 0..4 {
        let block = codes.slice_rows(n * 2, 2).unwrap();
        inc.extend(backbone.forward_block(&block, &mut cache).unwrap().to_f64_vec());
    }
    full.to_f64_vec()
        .iter()
        .zip(inc.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
}

#[test]
fn criterion_04_kv_cache_equivalence() {
    let err64 = kv_equivalence_err::<f64>();
    let err32 = kv_equivalence_err::<f32>();
    report(
        "kv-cache equivalence",
        err64 < 1e-10 && err32 < 1e-5,
        &format!("4 blocks: fp64 err {err64:.3e} (tol 1e-10), fp32 err {err32:.3e} (tol 1e-5)"),
    );
}

#[test]
fn criterion_05_gradient_suite() {
    let start = Instant::now();
    let rep = verify::full_pipeline_grad_check(505, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        "gradient suite",
        rep.max_rel_err < 1e-4 && secs < 120.0,
        &format!(
            "all {} elements, max rel err {:.3e} at {} (tol 1e-4), {secs:.1}s",
            rep.checked, rep.max_rel_err, rep.worst_param
        ),
    );
}

#[test]
fn criterion_06_joint_realization() {
    let mixed = verify::cross_jacobian_probe(true, 606).unwrap();
    let factored = verify::cross_jacobian_probe(false, 606).unwrap();
    report(
        "joint realization",
        mixed > 1e-8 && factored == 0.0,
        &format!("cross-position Jacobian {mixed:.3e} with mixing, {factored:.1e} ablated"),
    );
}

#[test]
fn criterion_07_noising_and_sampler_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let clean: Tensor<f64> = codec::sign_project(&Tensor::randn(vec![2, 3], &mut rng));
    let noise: Tensor<f64> = Tensor::randn(vec![2, 3], &mut rng);
    let endpoint0 = forward_noise(&clean, 0.0, &noise).unwrap().values.to_f64_vec()
        == clean.to_f64_vec();
    let endpoint1 = forward_noise(&clean, 1.0, &noise).unwrap().values.to_f64_vec()
        == noise.to_f64_vec();

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
    let mut head = DiffHead::<f64>::init(hcfg, &mut rng).unwrap();
    head.params.out_w = Tensor::randn_param(vec![8, 3], 0.3, &mut rng);
    let state: Tensor<f64> = Tensor::randn(vec![2, 3], &mut rng);
    let cond: Tensor<f64> = Tensor::randn(vec![2, 8], &mut rng);

    // K=1: the single step goes from t=1 straight to the guided prediction.
    let w = 3.0;
    let k1 = denoise_step(&head, &state, 1.0, 0.0, &cond, w).unwrap();
    let noisy = NoisyBlock { values: state.detach(), t: 1.0 };
    let cond_pred = head.denoise(&noisy, &cond).unwrap();
    let uncond_pred = head
        .denoise(&NoisyBlock { values: state.detach(), t: 1.0 }, &head.null_condition().unwrap())
        .unwrap();
    let guided = uncond_pred
        .add(&cond_pred.sub(&uncond_pred).unwrap().scale(w))
        .unwrap();
    let k1_exact = k1.to_f64_vec() == guided.to_f64_vec();

    // w=1 equals the unguided update bitwise.
    let neutral = denoise_step(&head, &state, 0.5, 0.25, &cond, 1.0).unwrap();
    let a0 = head
        .denoise(&NoisyBlock { values: state.detach(), t: 0.5 }, &cond)
        .unwrap();
    let manual = state.scale(0.5).add(&a0.scale(0.5)).unwrap();
    let neutral_exact = neutral.to_f64_vec() == manual.to_f64_vec();

    // Realized blocks always land on the hypercube.
    let cdc = CodecConfig::derive(8, 2, 0, 1).unwrap();
    let schedule = make_schedule(5, ScheduleKind::Uniform, 2.0).unwrap();
    let mut on_cube = true;
    for seed in 0..10u64 {
        let mut grng = ChaCha8Rng::seed_from_u64(seed);
        let draw = generate_block(&head, &cdc, &cond, &schedule, &mut grng).unwrap();
        if draw.codes.to_f64_vec().iter().any(|&x| x != 1.0 && x != -1.0) {
            on_cube = false;
        }
    }
    report(
        "noising/sampler identities",
        endpoint0 && endpoint1 && k1_exact && neutral_exact && on_cube,
        &format!(
            "endpoints {endpoint0}/{endpoint1}, K=1 guided {k1_exact}, w=1 bitwise {neutral_exact}, hypercube {on_cube}"
        ),
    );
}

#[test]
fn criterion_08_trainability_smoke() {
    let expected = expected_results();
    let smoke = &expected["smoke"];
    let budget = smoke["budget_secs"].as_float().unwrap();
    let factor = smoke["max_loss_factor"].as_float().unwrap();
    let total_steps = smoke["total_steps"].as_integer().unwrap() as u64;

    let run = RunConfig::load(&config_path("smoke.toml")).unwrap();
    assert_eq!(run.train.total_steps, total_steps);
    assert_eq!(run.train.lr, smoke["lr"].as_float().unwrap());
    let tok = run.build_tokenizer().unwrap();
    assert_eq!(tok.vocab_size(), 4);
    let (cdc, _, _) = run.build_model_configs().unwrap();
    assert_eq!(cdc.code_length, 2);
    assert_eq!(cdc.block_size, 2);

    // 2-symbol repeating corpus with explicit terminators.
    let samples: Vec<Vec<u32>> = (0..64)
        .map(|_| {
            let mut ids = tok.encode(&"ab".repeat(8)).unwrap();
            ids.push(tok.eos_id());
            ids
        })
        .collect();
    let start = Instant::now();
    let mut trainer = Trainer::<f32>::new(run, &samples).unwrap();
    let mut min_loss = f64::INFINITY;
    for _ in 0..total_steps {
        let stats = trainer.train_step().unwrap();
        min_loss = min_loss.min(stats.loss);
    }
    let secs = start.elapsed().as_secs_f64();
    let bound = factor * cdc.code_length as f64;
    report(
        "trainability smoke",
        min_loss < bound && secs < budget,
        &format!("min loss {min_loss:.4} (bound {bound}), {secs:.1}s (budget {budget})"),
    );
}

#[test]
fn criterion_08b_anbn_validity() {
    let expected = expected_results();
    let e = &expected["anbn"];
    let run = RunConfig::load(&config_path("anbn.toml")).unwrap();
    assert_eq!(run.train.total_steps, e["train_steps"].as_integer().unwrap() as u64);
    assert_eq!(run.sampler.guidance_scale, e["guidance_scale"].as_float().unwrap());
    assert_eq!(run.sampler.steps, e["sampler_steps"].as_integer().unwrap() as usize);

    let grammar = Grammar::AnBn;
    let samples = grammar.training_corpus(
        e["corpus_size"].as_integer().unwrap() as usize,
        e["max_n"].as_integer().unwrap() as usize,
        run.train.seed.wrapping_add(0x5eed),
    );
    let mut trainer = Trainer::<f32>::new(run, &samples).unwrap();
    for _ in 0..trainer.run.train.total_steps {
        trainer.train_step().unwrap();
    }
    let schedule = make_schedule(
        trainer.run.sampler.steps,
        trainer.run.sampler.kind,
        trainer.run.sampler.guidance_scale,
    )
    .unwrap();
    let tok = grammar.tokenizer();
    let n_eval = e["eval_samples"].as_integer().unwrap() as usize;
    let mut valid = 0usize;
    let mut fallbacks = 0usize;
    let mut positions = 0usize;
    for i in 0..n_eval {
        let opts = GenerateOptions {
            max_new_tokens: e["max_new_tokens"].as_integer().unwrap() as usize,
            seed: i as u64,
            ignore_eos: false,
        };
        let out = generate(
            &trainer.backbone,
            &trainer.head,
            &trainer.codec,
            &[],
            &schedule,
            &opts,
        )
        .unwrap();
        fallbacks += out.fallback_count;
        positions += out.backbone_calls * trainer.codec.block_size;
        if grammar.check(&tok.decode(&out.tokens)) {
            valid += 1;
        }
    }
    let validity = valid as f64 / n_eval as f64;
    let in_vocab = 1.0 - fallbacks as f64 / positions.max(1) as f64;
    let min_validity = e["min_validity"].as_float().unwrap();
    let min_in_vocab = e["min_in_vocab_frac"].as_float().unwrap();
    report(
        "a^n b^n validity",
        validity >= min_validity && in_vocab >= min_in_vocab,
        &format!(
            "validity {validity:.2} (min {min_validity}), in-vocab {in_vocab:.3} (min {min_in_vocab})"
        ),
    );
}

#[test]
fn criterion_09_parallelism_law() {
    let steps = 15usize;
    let t = 64usize;
    let mut all_exact = true;
    let mut details = Vec::new();
    for m in [1usize, 2, 4, 8] {
        let cdc = CodecConfig::derive(16, m, 0, 1).unwrap();
        let bcfg = BackboneConfig {
            hidden_size: 16,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
            block_size: m,
            max_seq_len: 256,
            rope_base: 10_000.0,
        };
        let hcfg = HeadConfig {
            head_hidden: 16,
            head_layers: 1,
            block_size: m,
            code_length: cdc.code_length as usize,
            cond_size: 16,
            time_embed_dim: 8,
            mlp_ratio: 2,
            num_heads: 2,
            cross_mixing: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        let backbone = Backbone::<f32>::init(bcfg, cdc.code_length as usize, &mut rng).unwrap();
        let head = DiffHead::init(hcfg, &mut rng).unwrap();
        let schedule = make_schedule(steps, ScheduleKind::Uniform, 9.0).unwrap();
        let opts = GenerateOptions {
            max_new_tokens: t,
            seed: 1,
            ignore_eos: true,
        };
        let out = generate(&backbone, &head, &cdc, &[0, 1], &schedule, &opts).unwrap();
        let blocks = t.div_ceil(m);
        if out.backbone_calls != blocks || out.head_calls != steps * blocks {
            all_exact = false;
        }
        details.push(format!(
            "m={m}: {}={} backbone, {}={} head",
            out.backbone_calls,
            blocks,
            out.head_calls,
            steps * blocks
        ));
    }
    report("parallelism law", all_exact, &details.join("; "));
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let run = RunConfig::load(&config_path("smoke.toml")).map(|mut r| {
        r.train.total_steps = 6;
        r
    })
    .unwrap();
    let tok = run.build_tokenizer().unwrap();
    let samples: Vec<Vec<u32>> = (0..8)
        .map(|_| {
            let mut ids = tok.encode(&"ab".repeat(4)).unwrap();
            ids.push(tok.eos_id());
            ids
        })
        .collect();

    // Bitwise loss-stream reproducibility.
    let mut a = Trainer::<f32>::new(run.clone(), &samples).unwrap();
    let mut b = Trainer::<f32>::new(run.clone(), &samples).unwrap();
    let mut streams_equal = true;
    for _ in 0..6 {
        if a.train_step().unwrap().loss.to_bits() != b.train_step().unwrap().loss.to_bits() {
            streams_equal = false;
        }
    }

    // Resume matches the uninterrupted trajectory bitwise.
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::<f32>::new(run.clone(), &samples).unwrap();
    let mut interrupted = Trainer::<f32>::new(run, &samples).unwrap();
    for _ in 0..6 {
        straight.train_step().unwrap();
    }
    for _ in 0..3 {
        interrupted.train_step().unwrap();
    }
    let ckpt = dir.path().join("mid.ckpt");
    save_checkpoint(&interrupted, &ckpt).unwrap();
    let mut resumed = load_checkpoint::<f32>(&ckpt, &samples).unwrap();
    for _ in 0..3 {
        resumed.train_step().unwrap();
    }
    let mut resume_equal = true;
    for ((na, ta), (nb, tb)) in straight
        .named_params()
        .iter()
        .zip(resumed.named_params().iter())
    {
        assert_eq!(na, nb);
        if ta.to_vec() != tb.to_vec() {
            resume_equal = false;
        }
    }
    report(
        "determinism & persistence",
        streams_equal && resume_equal,
        &format!("loss streams bitwise {streams_equal}, resume bitwise {resume_equal}"),
    );
}

#[test]
fn criterion_11_hyperparameter_fidelity() {
    let defaults = RunConfig::default();
    let snapshot = RunConfig::load(&config_path("reference_defaults.toml")).unwrap();
    let snapshot_matches = snapshot == defaults;
    let values_match = defaults.codec.block_size == 4
        && defaults.sampler.steps == 15
        && defaults.sampler.guidance_scale == 9.0
        && defaults.train.lr == 1e-4
        && defaults.train.beta1 == 0.9
        && defaults.train.beta2 == 0.95;
    let opt = AdamWConfig::default();
    let opt_matches = opt.lr == 1e-4 && opt.beta1 == 0.9 && opt.beta2 == 0.95;
    report(
        "hyperparameter fidelity",
        snapshot_matches && values_match && opt_matches,
        &format!(
            "m={}, K={}, guidance={}, AdamW ({:.0e}, {}, {}), snapshot file matches defaults: {snapshot_matches}",
            defaults.codec.block_size,
            defaults.sampler.steps,
            defaults.sampler.guidance_scale,
            defaults.train.lr,
            defaults.train.beta1,
            defaults.train.beta2
        ),
    );
}
