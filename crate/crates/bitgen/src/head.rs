//! Conditional denoiser over m x B analog-bit blocks.
//!
//! The head predicts the clean block directly (x0 prediction) from a noisy
//! block, a timestep, and the previous block's backbone contexts. Each
//! residual unit is modulation-conditioned self-attention over the m
//! positions followed by a modulation-conditioned position-wise MLP, so
//! positions inside a block genuinely interact; a config flag disables the
//! attention sublayer to recover the factorized ablation. The output
//! projection starts at zero, so an untrained head predicts the zero block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HeadConfig {
    pub head_hidden: usize,
    pub head_layers: usize,
    pub block_size: usize,
    pub code_length: usize,
    /// Must equal the backbone hidden size.
    pub cond_size: usize,
    pub time_embed_dim: usize,
    pub mlp_ratio: usize,
    pub num_heads: usize,
    /// When false, the attention sublayer is skipped and the head factorizes
    /// across positions (ablation only).
    pub cross_mixing: bool,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("head_hidden", self.head_hidden),
            ("head_layers", self.head_layers),
            ("block_size", self.block_size),
            ("code_length", self.code_length),
            ("cond_size", self.cond_size),
            ("time_embed_dim", self.time_embed_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("num_heads", self.num_heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("head {name} must be positive")));
            }
        }
        if self.head_hidden % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "head_hidden {} not divisible by num_heads {}",
                self.head_hidden, self.num_heads
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even".into()));
        }
        Ok(())
    }
}

/// A noisy analog-bits block together with its timestep.
pub struct NoisyBlock<T: Scalar> {
    pub values: Tensor<T>,
    pub t: f64,
}

/// Straight-line interpolation between a clean binary block and Gaussian
/// noise: t=0 is the clean block, t=1 is pure noise.
pub fn forward_noise<T: Scalar>(
    clean: &Tensor<T>,
    t: f64,
    noise: &Tensor<T>,
) -> Result<NoisyBlock<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("forward_noise: t={t} outside [0, 1]")));
    }
    if clean.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "forward_noise: clean {:?} vs noise {:?}",
            clean.shape(),
            noise.shape()
        )));
    }
    let values = clean.scale(1.0 - t).add(&noise.scale(t))?;
    Ok(NoisyBlock { values, t })
}

/// Scale/shift pair applied to a layer-normed hidden state; computed from
/// the per-position condition plus the broadcast timestep embedding.
pub struct ModulationParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub struct HeadLayerParams<T: Scalar> {
    pub attn_mod: ModulationParams<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_mod: ModulationParams<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
}

pub struct HeadParams<T: Scalar> {
    pub in_w: Tensor<T>,
    pub in_b: Tensor<T>,
    pub time_w1: Tensor<T>,
    pub time_b1: Tensor<T>,
    pub time_w2: Tensor<T>,
    pub time_b2: Tensor<T>,
    pub layers: Vec<HeadLayerParams<T>>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
    /// Learned null condition row for guidance-free branches.
    pub null_cond: Tensor<T>,
}

pub struct DiffHead<T: Scalar> {
    pub cfg: HeadConfig,
    pub params: HeadParams<T>,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;
/// Sinusoid input scale: t in [0,1] stretched so neighboring timesteps get
/// distinct phases across the frequency bank.
const TIME_SCALE: f64 = 1000.0;

impl<T: Scalar> DiffHead<T> {
    pub fn init<R: Rng>(cfg: HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let dh = cfg.head_hidden;
        let d = cfg.cond_size;
        let b = cfg.code_length;
        let f = cfg.mlp_ratio * dh;
        let te = cfg.time_embed_dim;
        let layers = (0..cfg.head_layers)
            .map(|_| HeadLayerParams {
                attn_mod: ModulationParams {
                    w: Tensor::zeros_param(vec![d, 2 * dh]),
                    b: Tensor::zeros_param(vec![2 * dh]),
                },
                wq: Tensor::randn_param(vec![dh, dh], INIT_STD, rng),
                wk: Tensor::randn_param(vec![dh, dh], INIT_STD, rng),
                wv: Tensor::randn_param(vec![dh, dh], INIT_STD, rng),
                wo: Tensor::randn_param(vec![dh, dh], INIT_STD, rng),
                mlp_mod: ModulationParams {
                    w: Tensor::zeros_param(vec![d, 2 * dh]),
                    b: Tensor::zeros_param(vec![2 * dh]),
                },
                mlp_w1: Tensor::randn_param(vec![dh, f], INIT_STD, rng),
                mlp_b1: Tensor::zeros_param(vec![f]),
                mlp_w2: Tensor::randn_param(vec![f, dh], INIT_STD, rng),
                mlp_b2: Tensor::zeros_param(vec![dh]),
            })
            .collect();
        Ok(Self {
            cfg,
            params: HeadParams {
                in_w: Tensor::randn_param(vec![b, dh], INIT_STD, rng),
                in_b: Tensor::zeros_param(vec![dh]),
                time_w1: Tensor::randn_param(vec![te, d], INIT_STD, rng),
                time_b1: Tensor::zeros_param(vec![d]),
                time_w2: Tensor::randn_param(vec![d, d], INIT_STD, rng),
                time_b2: Tensor::zeros_param(vec![d]),
                layers,
                out_w: Tensor::zeros_param(vec![dh, b]),
                out_b: Tensor::zeros_param(vec![b]),
                null_cond: Tensor::randn_param(vec![d], INIT_STD, rng),
            },
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("head.in_w".to_string(), self.params.in_w.clone()),
            ("head.in_b".to_string(), self.params.in_b.clone()),
            ("head.time_w1".to_string(), self.params.time_w1.clone()),
            ("head.time_b1".to_string(), self.params.time_b1.clone()),
            ("head.time_w2".to_string(), self.params.time_w2.clone()),
            ("head.time_b2".to_string(), self.params.time_b2.clone()),
        ];
        for (i, l) in self.params.layers.iter().enumerate() {
            out.push((format!("head.layers.{i}.attn_mod_w"), l.attn_mod.w.clone()));
            out.push((format!("head.layers.{i}.attn_mod_b"), l.attn_mod.b.clone()));
            out.push((format!("head.layers.{i}.wq"), l.wq.clone()));
            out.push((format!("head.layers.{i}.wk"), l.wk.clone()));
            out.push((format!("head.layers.{i}.wv"), l.wv.clone()));
            out.push((format!("head.layers.{i}.wo"), l.wo.clone()));
            out.push((format!("head.layers.{i}.mlp_mod_w"), l.mlp_mod.w.clone()));
            out.push((format!("head.layers.{i}.mlp_mod_b"), l.mlp_mod.b.clone()));
            out.push((format!("head.layers.{i}.mlp_w1"), l.mlp_w1.clone()));
            out.push((format!("head.layers.{i}.mlp_b1"), l.mlp_b1.clone()));
            out.push((format!("head.layers.{i}.mlp_w2"), l.mlp_w2.clone()));
            out.push((format!("head.layers.{i}.mlp_b2"), l.mlp_b2.clone()));
        }
        out.push(("head.out_w".to_string(), self.params.out_w.clone()));
        out.push(("head.out_b".to_string(), self.params.out_b.clone()));
        out.push(("head.null_cond".to_string(), self.params.null_cond.clone()));
        out
    }

    pub fn cast<U: Scalar>(&self) -> DiffHead<U> {
        fn p<T: Scalar, U: Scalar>(t: &Tensor<T>) -> Tensor<U> {
            let c: Tensor<U> = t.cast();
            Tensor::param(c.shape().to_vec(), c.to_vec()).unwrap()
        }
        DiffHead {
            cfg: self.cfg.clone(),
            params: HeadParams {
                in_w: p(&self.params.in_w),
                in_b: p(&self.params.in_b),
                time_w1: p(&self.params.time_w1),
                time_b1: p(&self.params.time_b1),
                time_w2: p(&self.params.time_w2),
                time_b2: p(&self.params.time_b2),
                layers: self
                    .params
                    .layers
                    .iter()
                    .map(|l| HeadLayerParams {
                        attn_mod: ModulationParams {
                            w: p(&l.attn_mod.w),
                            b: p(&l.attn_mod.b),
                        },
                        wq: p(&l.wq),
                        wk: p(&l.wk),
                        wv: p(&l.wv),
                        wo: p(&l.wo),
                        mlp_mod: ModulationParams {
                            w: p(&l.mlp_mod.w),
                            b: p(&l.mlp_mod.b),
                        },
                        mlp_w1: p(&l.mlp_w1),
                        mlp_b1: p(&l.mlp_b1),
                        mlp_w2: p(&l.mlp_w2),
                        mlp_b2: p(&l.mlp_b2),
                    })
                    .collect(),
                out_w: p(&self.params.out_w),
                out_b: p(&self.params.out_b),
                null_cond: p(&self.params.null_cond),
            },
        }
    }

    /// Fixed sinusoidal features of the timestep followed by a learned MLP,
    /// producing a row to broadcast over the m positions.
    pub fn time_embed(&self, t: f64) -> Result<Tensor<T>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time_embed: t={t} outside [0, 1]")));
        }
        let half = self.cfg.time_embed_dim / 2;
        let mut feats = Vec::with_capacity(self.cfg.time_embed_dim);
        for j in 0..half {
            let freq = 10_000f64.powf(-(j as f64) / half as f64);
            let phase = t * TIME_SCALE * freq;
            feats.push(phase.sin());
            feats.push(phase.cos());
        }
        let sinusoid = Tensor::<T>::from_f64_vec(vec![1, self.cfg.time_embed_dim], feats)?;
        let h = sinusoid
            .matmul(&self.params.time_w1)?
            .add_row_broadcast(&self.params.time_b1)?
            .silu();
        h.matmul(&self.params.time_w2)?
            .add_row_broadcast(&self.params.time_b2)
    }

    /// `(1 + gamma) * LN(h) + beta`, with gamma and beta computed per
    /// position from condition row i plus the shared timestep embedding.
    /// Zero-initialized modulation weights make this an exact LN at step 0.
    pub fn adaln_modulate(
        &self,
        h: &Tensor<T>,
        cond: &Tensor<T>,
        t_emb: &Tensor<T>,
        modp: &ModulationParams<T>,
    ) -> Result<Tensor<T>> {
        let m = self.cfg.block_size;
        if cond.rows() != m {
            return Err(Error::Shape(format!(
                "adaln_modulate: condition has {} rows, block size is {m}",
                cond.rows()
            )));
        }
        let dh = self.cfg.head_hidden;
        let t_row = t_emb.reshape(vec![self.cfg.cond_size])?;
        let s = cond.add_row_broadcast(&t_row)?.silu();
        let modv = s.matmul(&modp.w)?.add_row_broadcast(&modp.b)?;
        let gamma = modv.slice_cols(0, dh)?;
        let beta = modv.slice_cols(dh, dh)?;
        let normed = h.layer_norm(LN_EPS)?;
        normed.add(&gamma.mul(&normed)?)?.add(&beta)
    }

    fn self_attention(&self, layer: &HeadLayerParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let heads = self.cfg.num_heads;
        let hd = self.cfg.head_hidden / heads;
        let q = x.matmul(&layer.wq)?;
        let k = x.matmul(&layer.wk)?;
        let v = x.matmul(&layer.wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice_cols(h * hd, hd)?;
            let kh = k.slice_cols(h * hd, hd)?;
            let vh = v.slice_cols(h * hd, hd)?;
            let scale = 1.0 / (hd as f64).sqrt();
            let attn = qh.matmul(&kh.transpose()?)?.scale(scale).softmax_rows()?;
            outs.push(attn.matmul(&vh)?);
        }
        Tensor::concat_cols(&outs)?.matmul(&layer.wo)
    }

    /// x0 prediction for one block given its noisy state, the timestep, and
    /// the conditioning contexts.
    pub fn denoise(&self, noisy: &NoisyBlock<T>, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.cfg.block_size;
        let b = self.cfg.code_length;
        if noisy.values.shape() != [m, b] {
            return Err(Error::Shape(format!(
                "denoise: noisy block shape {:?}, expected [{m}, {b}]",
                noisy.values.shape()
            )));
        }
        if cond.shape() != [m, self.cfg.cond_size] {
            return Err(Error::Shape(format!(
                "denoise: condition shape {:?}, expected [{m}, {}]",
                cond.shape(),
                self.cfg.cond_size
            )));
        }
        let t_emb = self.time_embed(noisy.t)?;
        let mut x = noisy
            .values
            .matmul(&self.params.in_w)?
            .add_row_broadcast(&self.params.in_b)?;
        for layer in &self.params.layers {
            if self.cfg.cross_mixing {
                let moded = self.adaln_modulate(&x, cond, &t_emb, &layer.attn_mod)?;
                x = x.add(&self.self_attention(layer, &moded)?)?;
            }
            let moded = self.adaln_modulate(&x, cond, &t_emb, &layer.mlp_mod)?;
            let h = moded
                .matmul(&layer.mlp_w1)?
                .add_row_broadcast(&layer.mlp_b1)?
                .silu();
            let h = h.matmul(&layer.mlp_w2)?.add_row_broadcast(&layer.mlp_b2)?;
            x = x.add(&h)?;
        }
        let x = x.layer_norm(LN_EPS)?;
        x.matmul(&self.params.out_w)?
            .add_row_broadcast(&self.params.out_b)
    }

    /// The learned null condition tiled over the block, for condition
    /// dropout in training and the unconditional guidance branch.
    pub fn null_condition(&self) -> Result<Tensor<T>> {
        self.params.null_cond.repeat_rows(self.cfg.block_size)
    }
}

/// Squared error summed over bits, averaged over valid positions; invalid
/// positions contribute nothing. A fully padded block has zero loss.
pub fn diffusion_loss<T: Scalar>(
    pred: &Tensor<T>,
    clean: &Tensor<T>,
    valid: &[bool],
) -> Result<Tensor<T>> {
    if pred.shape() != clean.shape() {
        return Err(Error::Shape(format!(
            "diffusion_loss: pred {:?} vs clean {:?}",
            pred.shape(),
            clean.shape()
        )));
    }
    if valid.len() != pred.rows() {
        return Err(Error::Shape(format!(
            "diffusion_loss: {} validity flags for {} positions",
            valid.len(),
            pred.rows()
        )));
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let factors: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let diff = pred.sub(clean)?;
    let sq = diff.mul(&diff)?;
    Ok(sq.scale_rows(&factors)?.sum_all().scale(1.0 / n_valid as f64))
}
