//! Training loop: sequence packing, per-block noising, shifted conditioning,
//! condition dropout, and AdamW updates with linear warmup.
//!
//! Each optimizer step builds a fresh graph: the packed batch runs through
//! the backbone once per sequence, every non-leading block gets an
//! independent timestep and noise draw, and the head regresses the clean
//! block from the previous block's contexts. A single ChaCha stream drives
//! initialization and every training draw, so a (seed, word position) pair
//! pins the whole run.

mod checkpoint;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use metrics::{MetricsRecord, MetricsWriter};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::codec::{encode_sequence, BitCode, CodecConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::head::{diffusion_loss, forward_noise, DiffHead};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Scalar, Tensor};

/// A fixed-length run of encoded positions holding one or more whole
/// documents plus trailing filler. Documents are block-aligned (each starts
/// with its own BOS block), so every block belongs to exactly one document
/// or is pure filler.
#[derive(Debug, Clone)]
pub struct PackedSequence {
    pub codes: Vec<BitCode>,
    pub valid: Vec<bool>,
    /// Per-position document index; `None` marks filler.
    pub doc_ids: Vec<Option<usize>>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn num_blocks(&self, m: usize) -> usize {
        self.codes.len() / m
    }

    pub fn codes_tensor<T: Scalar>(&self, cfg: &CodecConfig) -> Tensor<T> {
        let b = cfg.code_length as usize;
        let mut data = Vec::with_capacity(self.codes.len() * b);
        for code in &self.codes {
            data.extend(code.0.iter().map(|&x| T::from_f64(x as f64)));
        }
        Tensor::from_vec(vec![self.codes.len(), b], data).unwrap()
    }

    pub fn block_tensor<T: Scalar>(&self, n: usize, cfg: &CodecConfig) -> Tensor<T> {
        let m = cfg.block_size;
        let b = cfg.code_length as usize;
        let mut data = Vec::with_capacity(m * b);
        for code in &self.codes[n * m..(n + 1) * m] {
            data.extend(code.0.iter().map(|&x| T::from_f64(x as f64)));
        }
        Tensor::from_vec(vec![m, b], data).unwrap()
    }
}

#[derive(Debug)]
pub struct PackReport {
    pub sequences: Vec<PackedSequence>,
    /// Samples longer than the pack length, dropped with a count.
    pub skipped: usize,
}

/// Greedy first-fit packing: samples are encoded (BOS block, EOS padding),
/// appended whole while they fit, and the remainder of each run is filled
/// with invalid EOS positions carrying no document id.
pub fn pack_corpus(
    samples: &[Vec<u32>],
    codec: &CodecConfig,
    pack_length: usize,
) -> Result<PackReport> {
    let m = codec.block_size;
    if pack_length == 0 || pack_length % m != 0 {
        return Err(Error::Config(format!(
            "pack_length {pack_length} must be a positive multiple of block size {m}"
        )));
    }
    let filler = crate::codec::encode_token(codec.eos_id, codec)?;
    let mut sequences = Vec::new();
    let mut skipped = 0usize;
    let mut current = PackedSequence {
        codes: Vec::new(),
        valid: Vec::new(),
        doc_ids: Vec::new(),
    };
    let mut next_doc = 0usize;
    let flush = |seq: &mut PackedSequence, out: &mut Vec<PackedSequence>| {
        if seq.codes.is_empty() {
            return;
        }
        while seq.codes.len() < pack_length {
            seq.codes.push(filler.clone());
            seq.valid.push(false);
            seq.doc_ids.push(None);
        }
        out.push(std::mem::replace(
            seq,
            PackedSequence {
                codes: Vec::new(),
                valid: Vec::new(),
                doc_ids: Vec::new(),
            },
        ));
    };
    for ids in samples {
        let enc = encode_sequence(ids, codec)?;
        if enc.len() > pack_length {
            skipped += 1;
            continue;
        }
        if current.codes.len() + enc.len() > pack_length {
            flush(&mut current, &mut sequences);
        }
        let doc = next_doc;
        next_doc += 1;
        current.codes.extend(enc.codes);
        current.valid.extend(enc.valid.iter().copied());
        current
            .doc_ids
            .extend(std::iter::repeat(Some(doc)).take(enc.valid.len()));
    }
    flush(&mut current, &mut sequences);
    if sequences.is_empty() {
        return Err(Error::Config(
            "pack_corpus: no sample fits in the pack length".into(),
        ));
    }
    Ok(PackReport { sequences, skipped })
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Blocks that contributed to the loss this step.
    pub blocks: usize,
}

pub struct Trainer<T: Scalar> {
    pub run: RunConfig,
    pub codec: CodecConfig,
    pub backbone: Backbone<T>,
    pub head: DiffHead<T>,
    pub opt: AdamW<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub data: Vec<PackedSequence>,
    pub cursor: usize,
    pub skipped_samples: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh trainer: model init and all later draws come from one ChaCha
    /// stream seeded by `train.seed`.
    pub fn new(run: RunConfig, samples: &[Vec<u32>]) -> Result<Self> {
        run.validate()?;
        let (codec, bcfg, hcfg) = run.build_model_configs()?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        let backbone = Backbone::init(bcfg, codec.code_length as usize, &mut rng)?;
        let head = DiffHead::init(hcfg, &mut rng)?;
        let report = pack_corpus(samples, &codec, run.train.pack_length)?;
        let opt = AdamW::new(AdamWConfig {
            lr: run.train.lr,
            beta1: run.train.beta1,
            beta2: run.train.beta2,
            weight_decay: run.train.weight_decay,
            eps: 1e-8,
        });
        Ok(Self {
            run,
            codec,
            backbone,
            head,
            opt,
            rng,
            step: 0,
            data: report.sequences,
            cursor: 0,
            skipped_samples: report.skipped,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.backbone.named_params();
        out.extend(self.head.named_params());
        out
    }

    /// Linear warmup over `warmup_frac` of the budget, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = (self.run.train.warmup_frac * self.run.train.total_steps as f64).ceil() as u64;
        if warmup == 0 || step + 1 >= warmup {
            self.run.train.lr
        } else {
            self.run.train.lr * (step + 1) as f64 / warmup as f64
        }
    }

    /// Loss for the next batch without touching parameters or the RNG used
    /// for training draws; used for evaluation.
    pub fn eval_loss(&mut self, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cursor = self.cursor;
        let (loss, _) = self.batch_loss(&mut rng, 0.0)?;
        self.cursor = cursor;
        Ok(loss.item())
    }

    /// Loss over one batch starting at the cursor. Draw order per target
    /// block is fixed: timestep, noise, condition-dropout coin.
    fn batch_loss(&mut self, rng: &mut ChaCha8Rng, dropout_p: f64) -> Result<(Tensor<T>, usize)> {
        let m = self.codec.block_size;
        let b = self.codec.code_length as usize;
        let mut total: Option<Tensor<T>> = None;
        let mut counted = 0usize;
        for _ in 0..self.run.train.batch_size {
            let seq = self.data[self.cursor].clone();
            self.cursor = (self.cursor + 1) % self.data.len();
            let codes: Tensor<T> = seq.codes_tensor(&self.codec);
            let doc_ids = self.run.train.isolate_documents.then_some(seq.doc_ids.as_slice());
            let (contexts, _cache) = self.backbone.forward_full(&codes, doc_ids)?;
            for n in 1..seq.num_blocks(m) {
                // Targets are blocks preceded by a block of the same
                // document; BOS blocks and filler are never targets.
                let doc = seq.doc_ids[n * m];
                if doc.is_none() || doc != seq.doc_ids[(n - 1) * m] {
                    continue;
                }
                let valid = &seq.valid[n * m..(n + 1) * m];
                if !valid.iter().any(|&v| v) {
                    continue;
                }
                let clean = seq.block_tensor(n, &self.codec);
                let t: f64 = rng.gen();
                let noise: Tensor<T> = Tensor::randn(vec![m, b], rng);
                let noisy = forward_noise(&clean, t, &noise)?;
                let drop: f64 = rng.gen();
                let cond = if drop < dropout_p {
                    self.head.null_condition()?
                } else {
                    contexts.slice_rows((n - 1) * m, m)?
                };
                let pred = self.head.denoise(&noisy, &cond)?;
                let block_loss = diffusion_loss(&pred, &clean, valid)?;
                total = Some(match total {
                    Some(acc) => acc.add(&block_loss)?,
                    None => block_loss,
                });
                counted += 1;
            }
        }
        match total {
            Some(acc) if counted > 0 => Ok((acc.scale(1.0 / counted as f64), counted)),
            _ => Err(Error::Domain(
                "batch produced no target blocks; corpus is all BOS/filler".into(),
            )),
        }
    }

    pub fn train_step(&mut self) -> Result<StepStats> {
        let dropout_p = self.run.train.cond_dropout_p;
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let result = self.batch_loss(&mut rng, dropout_p);
        self.rng = rng;
        let (loss, blocks) = result?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("batch loss {loss_val}"),
            });
        }
        loss.backward()?;
        let lr = self.lr_at(self.step);
        let params = self.named_params();
        self.opt.step(&params, lr)?;
        self.opt.zero_grads(&params);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: loss_val,
            lr,
            blocks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec() -> CodecConfig {
        // V=4: ids 0/1 content, 2 bos, 3 eos.
        CodecConfig::derive(4, 2, 2, 3).unwrap()
    }

    fn toy_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.tokenizer.mode = "grammar-anbn".into();
        run.codec.block_size = 2;
        run.backbone.hidden_size = 16;
        run.backbone.num_layers = 1;
        run.backbone.num_heads = 2;
        run.backbone.mlp_ratio = 2;
        run.head.head_hidden = 16;
        run.head.head_layers = 1;
        run.head.time_embed_dim = 8;
        run.head.mlp_ratio = 2;
        run.head.num_heads = 2;
        run.train.batch_size = 2;
        run.train.pack_length = 16;
        run.train.total_steps = 10;
        run
    }

    #[test]
    fn packing_keeps_documents_whole() {
        let c = codec();
        // Each sample occupies bos block (2) + padded content; [0,1] -> 4,
        // [0] -> 4, [0,0,1,1] -> 6.
        let samples = vec![vec![0, 1], vec![0], vec![0, 0, 1, 1]];
        let report = pack_corpus(&samples, &c, 8).unwrap();
        assert_eq!(report.skipped, 0);
        assert_eq!(report.sequences.len(), 2);
        for seq in &report.sequences {
            assert_eq!(seq.len(), 8);
            // Block homogeneity: both positions of a block share a doc id.
            for n in 0..seq.num_blocks(2) {
                assert_eq!(seq.doc_ids[n * 2], seq.doc_ids[n * 2 + 1]);
            }
        }
        // Docs 0 and 1 share the first run; doc 2 starts the second, whose
        // last two positions are filler.
        assert_eq!(report.sequences[0].doc_ids[0], Some(0));
        assert_eq!(report.sequences[0].doc_ids[4], Some(1));
        assert_eq!(report.sequences[1].doc_ids[0], Some(2));
        assert_eq!(report.sequences[1].doc_ids[6], None);
        assert!(!report.sequences[1].valid[6]);
    }

    #[test]
    fn oversized_samples_are_skipped_not_split() {
        let c = codec();
        let samples = vec![vec![0; 20], vec![0, 1]];
        let report = pack_corpus(&samples, &c, 8).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.sequences.len(), 1);
    }

    #[test]
    fn misaligned_pack_length_is_rejected() {
        let c = codec();
        assert!(pack_corpus(&[vec![0]], &c, 7).is_err());
    }

    #[test]
    fn first_step_loss_is_exactly_code_length() {
        // Zero-init output head predicts 0 for every bit, so the first batch
        // loss is exactly B (here 2) regardless of data or draws.
        let run = toy_run();
        let samples = vec![vec![0, 1, 0, 1], vec![0, 0, 1, 1]];
        let mut tr = Trainer::<f64>::new(run, &samples).unwrap();
        let stats = tr.train_step().unwrap();
        assert_eq!(stats.loss, 2.0);
        assert_eq!(stats.step, 1);
    }

    #[test]
    fn training_is_deterministic_across_fresh_trainers() {
        let samples = vec![vec![0, 1, 0, 1], vec![0, 0, 1, 1], vec![1, 0]];
        let mut a = Trainer::<f64>::new(toy_run(), &samples).unwrap();
        let mut b = Trainer::<f64>::new(toy_run(), &samples).unwrap();
        for _ in 0..3 {
            let sa = a.train_step().unwrap();
            let sb = b.train_step().unwrap();
            assert_eq!(sa.loss, sb.loss);
        }
        let pa = a.named_params();
        let pb = b.named_params();
        for ((na, ta), (nb, tb)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "param {na}");
        }
    }

    #[test]
    fn loss_decreases_on_a_tiny_corpus() {
        let mut run = toy_run();
        run.train.lr = 1e-2;
        run.train.total_steps = 40;
        let samples = vec![vec![0, 1, 0, 1]; 4];
        let mut tr = Trainer::<f64>::new(run, &samples).unwrap();
        let first = tr.train_step().unwrap().loss;
        let mut last = first;
        for _ in 0..39 {
            last = tr.train_step().unwrap().loss;
        }
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn warmup_ramps_linearly() {
        let mut run = toy_run();
        run.train.total_steps = 100;
        run.train.warmup_frac = 0.1; // 10 warmup steps
        let samples = vec![vec![0, 1]];
        let tr = Trainer::<f64>::new(run, &samples).unwrap();
        assert!((tr.lr_at(0) - 1e-5).abs() < 1e-12);
        assert!((tr.lr_at(4) - 5e-5).abs() < 1e-12);
        assert_eq!(tr.lr_at(9), 1e-4);
        assert_eq!(tr.lr_at(50), 1e-4);
    }
}
