//! Block-causal transformer backbone.
//!
//! Binary codes are lifted to the hidden size by a position-wise MLP, then
//! run through pre-norm attention/MLP layers under a block-causal mask:
//! full attention inside a block, causal attention across blocks. At block
//! size 1 the mask is the ordinary causal mask. Rotary position encoding
//! uses absolute token positions, which preserves that reduction exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{masked_attention, Scalar, Tensor, MASK_NEG};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub block_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_heads == 0 {
            return Err(Error::Config("hidden_size and num_heads must be positive".into()));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.hidden_size / self.num_heads % 2 != 0 {
            return Err(Error::Config("head dimension must be even for rotary encoding".into()));
        }
        if self.block_size < 1 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// 1-based block id of a 1-based position.
pub fn block_index(i: usize, m: usize) -> Result<usize> {
    if i < 1 {
        return Err(Error::Domain(format!("block_index: position {i} < 1")));
    }
    if m < 1 {
        return Err(Error::Domain(format!("block_index: block size {m} < 1")));
    }
    Ok((i - 1) / m + 1)
}

/// Dense additive mask: entry (i, j) is 0 when block(j) <= block(i), else
/// the -inf sentinel.
pub fn build_mask<T: Scalar>(len: usize, m: usize) -> Result<Tensor<T>> {
    build_mask_with_docs(len, m, None)
}

/// Block-causal mask intersected with document segmentation: positions in
/// different documents never attend to each other. `doc_ids[i] == None`
/// marks filler positions, which attend to nothing and are attended by
/// nothing outside themselves.
pub fn build_mask_with_docs<T: Scalar>(
    len: usize,
    m: usize,
    doc_ids: Option<&[Option<usize>]>,
) -> Result<Tensor<T>> {
    if len < 1 {
        return Err(Error::Domain("build_mask: length must be >= 1".into()));
    }
    if let Some(d) = doc_ids {
        if d.len() != len {
            return Err(Error::Shape(format!(
                "build_mask: {} doc ids for length {len}",
                d.len()
            )));
        }
    }
    let zero = T::zero();
    let neg = T::from_f64(MASK_NEG);
    let mut data = vec![neg; len * len];
    for i in 0..len {
        let bi = block_index(i + 1, m)?;
        for j in 0..len {
            let bj = block_index(j + 1, m)?;
            let same_doc = match doc_ids {
                None => true,
                Some(d) => match (d[i], d[j]) {
                    (Some(a), Some(b)) => a == b,
                    // Filler attends only to itself so its row is not fully
                    // masked; its output is never used.
                    _ => i == j,
                },
            };
            if bj <= bi && same_doc {
                data[i * len + j] = zero;
            }
        }
    }
    Tensor::from_vec(vec![len, len], data)
}

/// Per-layer key/value store for incremental decoding. Keys are cached
/// post-rotation, so appended blocks see consistent absolute positions.
pub struct KvCache<T: Scalar> {
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
    pub len: usize,
    block_size: usize,
    hidden: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn empty(cfg: &BackboneConfig) -> Self {
        Self {
            keys: vec![Vec::new(); cfg.num_layers],
            values: vec![Vec::new(); cfg.num_layers],
            len: 0,
            block_size: cfg.block_size,
            hidden: cfg.hidden_size,
        }
    }

    fn check(&self) -> Result<()> {
        if self.len % self.block_size != 0 {
            return Err(Error::Domain(format!(
                "KV cache length {} is not a multiple of block size {}",
                self.len, self.block_size
            )));
        }
        for (k, v) in self.keys.iter().zip(self.values.iter()) {
            if k.len() != self.len * self.hidden || v.len() != self.len * self.hidden {
                return Err(Error::Domain("KV cache buffers inconsistent with length".into()));
            }
        }
        Ok(())
    }
}

pub struct LayerParams<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

pub struct BackboneParams<T: Scalar> {
    pub lift_w1: Tensor<T>,
    pub lift_b1: Tensor<T>,
    pub lift_w2: Tensor<T>,
    pub lift_b2: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
}

pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    pub params: BackboneParams<T>,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

impl<T: Scalar> Backbone<T> {
    pub fn init<R: Rng>(cfg: BackboneConfig, code_length: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_size;
        let f = cfg.mlp_ratio * d;
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                wq: Tensor::randn_param(vec![d, d], INIT_STD, rng),
                wk: Tensor::randn_param(vec![d, d], INIT_STD, rng),
                wv: Tensor::randn_param(vec![d, d], INIT_STD, rng),
                wo: Tensor::randn_param(vec![d, d], INIT_STD, rng),
                w_gate: Tensor::randn_param(vec![d, f], INIT_STD, rng),
                w_up: Tensor::randn_param(vec![d, f], INIT_STD, rng),
                w_down: Tensor::randn_param(vec![f, d], INIT_STD, rng),
            })
            .collect();
        Ok(Self {
            cfg,
            params: BackboneParams {
                lift_w1: Tensor::randn_param(vec![code_length, d], INIT_STD, rng),
                lift_b1: Tensor::zeros_param(vec![d]),
                lift_w2: Tensor::randn_param(vec![d, d], INIT_STD, rng),
                lift_b2: Tensor::zeros_param(vec![d]),
                layers,
            },
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("backbone.lift_w1".to_string(), self.params.lift_w1.clone()),
            ("backbone.lift_b1".to_string(), self.params.lift_b1.clone()),
            ("backbone.lift_w2".to_string(), self.params.lift_w2.clone()),
            ("backbone.lift_b2".to_string(), self.params.lift_b2.clone()),
        ];
        for (i, l) in self.params.layers.iter().enumerate() {
            out.push((format!("backbone.layers.{i}.wq"), l.wq.clone()));
            out.push((format!("backbone.layers.{i}.wk"), l.wk.clone()));
            out.push((format!("backbone.layers.{i}.wv"), l.wv.clone()));
            out.push((format!("backbone.layers.{i}.wo"), l.wo.clone()));
            out.push((format!("backbone.layers.{i}.w_gate"), l.w_gate.clone()));
            out.push((format!("backbone.layers.{i}.w_up"), l.w_up.clone()));
            out.push((format!("backbone.layers.{i}.w_down"), l.w_down.clone()));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        fn p<T: Scalar, U: Scalar>(t: &Tensor<T>) -> Tensor<U> {
            let c: Tensor<U> = t.cast();
            Tensor::param(c.shape().to_vec(), c.to_vec()).unwrap()
        }
        Backbone {
            cfg: self.cfg.clone(),
            params: BackboneParams {
                lift_w1: p(&self.params.lift_w1),
                lift_b1: p(&self.params.lift_b1),
                lift_w2: p(&self.params.lift_w2),
                lift_b2: p(&self.params.lift_b2),
                layers: self
                    .params
                    .layers
                    .iter()
                    .map(|l| LayerParams {
                        wq: p(&l.wq),
                        wk: p(&l.wk),
                        wv: p(&l.wv),
                        wo: p(&l.wo),
                        w_gate: p(&l.w_gate),
                        w_up: p(&l.w_up),
                        w_down: p(&l.w_down),
                    })
                    .collect(),
            },
        }
    }

    /// Position-wise two-layer MLP from code space to hidden space; this
    /// replaces the token embedding lookup.
    pub fn lift(&self, codes: &Tensor<T>) -> Result<Tensor<T>> {
        let h = codes
            .matmul(&self.params.lift_w1)?
            .add_row_broadcast(&self.params.lift_b1)?
            .silu();
        h.matmul(&self.params.lift_w2)?
            .add_row_broadcast(&self.params.lift_b2)
    }

    fn attention(
        &self,
        layer: &LayerParams<T>,
        x: &Tensor<T>,
        kv_context: Option<(&Tensor<T>, &Tensor<T>)>,
        pos_offset: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let heads = self.cfg.num_heads;
        let hd = self.cfg.head_dim();
        let q_all = x.matmul(&layer.wq)?;
        let k_new = x.matmul(&layer.wk)?;
        let v_new = x.matmul(&layer.wv)?;
        // Rotate per head at absolute positions, then keep the rotated keys
        // for the cache.
        let mut k_rot_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            k_rot_heads.push(k_new.slice_cols(h * hd, hd)?.rope(pos_offset, self.cfg.rope_base)?);
        }
        let k_rot_new = Tensor::concat_cols(&k_rot_heads)?;
        let (k_full, v_full) = match kv_context {
            Some((k_prev, v_prev)) => (
                Tensor::concat_rows(&[k_prev.clone(), k_rot_new.clone()])?,
                Tensor::concat_rows(&[v_prev.clone(), v_new.clone()])?,
            ),
            None => (k_rot_new.clone(), v_new.clone()),
        };
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q_all.slice_cols(h * hd, hd)?.rope(pos_offset, self.cfg.rope_base)?;
            let kh = k_full.slice_cols(h * hd, hd)?;
            let vh = v_full.slice_cols(h * hd, hd)?;
            let out = match mask {
                Some(m) => masked_attention(&qh, &kh, &vh, m)?,
                None => {
                    // Incremental path: the new block is the latest block, so
                    // every cached position and every intra-block position is
                    // visible. Plain softmax attention over all keys.
                    let scale = 1.0 / (hd as f64).sqrt();
                    let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
                    scores.softmax_rows()?.matmul(&vh)?
                }
            };
            head_outs.push(out);
        }
        let merged = Tensor::concat_cols(&head_outs)?;
        let out = merged.matmul(&layer.wo)?;
        Ok((out, k_rot_new, v_new))
    }

    fn layer_forward(
        &self,
        layer: &LayerParams<T>,
        x: &Tensor<T>,
        kv_context: Option<(&Tensor<T>, &Tensor<T>)>,
        pos_offset: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let normed = x.layer_norm(LN_EPS)?;
        let (attn_out, k_new, v_new) =
            self.attention(layer, &normed, kv_context, pos_offset, mask)?;
        let x = x.add(&attn_out)?;
        let normed = x.layer_norm(LN_EPS)?;
        let gate = normed.matmul(&layer.w_gate)?.silu();
        let up = normed.matmul(&layer.w_up)?;
        let mlp_out = gate.mul(&up)?.matmul(&layer.w_down)?;
        Ok((x.add(&mlp_out)?, k_new, v_new))
    }

    /// Full-sequence forward under the block-causal mask. Returns per-token
    /// contexts and a cache holding every position. The sequence length must
    /// already be block-aligned; padding is the codec's job.
    pub fn forward_full(
        &self,
        codes: &Tensor<T>,
        doc_ids: Option<&[Option<usize>]>,
    ) -> Result<(Tensor<T>, KvCache<T>)> {
        let len = codes.rows();
        if len % self.cfg.block_size != 0 {
            return Err(Error::Shape(format!(
                "forward_full: length {len} not divisible by block size {}",
                self.cfg.block_size
            )));
        }
        let mask = build_mask_with_docs::<T>(len, self.cfg.block_size, doc_ids)?;
        let mut x = self.lift(codes)?;
        let mut cache = KvCache::empty(&self.cfg);
        for (i, layer) in self.params.layers.iter().enumerate() {
            let (next, k_new, v_new) = self.layer_forward(layer, &x, None, 0, Some(&mask))?;
            cache.keys[i] = k_new.to_vec();
            cache.values[i] = v_new.to_vec();
            x = next;
        }
        cache.len = len;
        // Zero layers is an ablation where contexts are the lifted codes
        // themselves; the final norm only applies to a real stack.
        let contexts = if self.cfg.num_layers == 0 {
            x
        } else {
            x.layer_norm(LN_EPS)?
        };
        Ok((contexts, cache))
    }

    /// Incremental forward over one new block against an existing cache.
    /// Produces the same context rows as `forward_full` on the concatenated
    /// sequence, and extends the cache by one block.
    pub fn forward_block(&self, new_codes: &Tensor<T>, cache: &mut KvCache<T>) -> Result<Tensor<T>> {
        cache.check()?;
        let m = self.cfg.block_size;
        if new_codes.rows() != m {
            return Err(Error::Shape(format!(
                "forward_block: expected {m} rows, got {}",
                new_codes.rows()
            )));
        }
        let offset = cache.len;
        if offset + m > self.cfg.max_seq_len {
            return Err(Error::Domain(format!(
                "forward_block: sequence length {} exceeds max_seq_len {}",
                offset + m,
                self.cfg.max_seq_len
            )));
        }
        let mut x = self.lift(new_codes)?.detach();
        let d = self.cfg.hidden_size;
        for (i, layer) in self.params.layers.iter().enumerate() {
            let kv_context = if offset > 0 {
                Some((
                    Tensor::from_vec(vec![offset, d], cache.keys[i].clone())?,
                    Tensor::from_vec(vec![offset, d], cache.values[i].clone())?,
                ))
            } else {
                None
            };
            let (next, k_new, v_new) =
                self.layer_forward(layer, &x, kv_context.as_ref().map(|(k, v)| (k, v)), offset, None)?;
            cache.keys[i].extend(k_new.to_vec());
            cache.values[i].extend(v_new.to_vec());
            x = next.detach();
        }
        cache.len = offset + m;
        if self.cfg.num_layers == 0 {
            Ok(x)
        } else {
            x.layer_norm(LN_EPS)
        }
    }
}
