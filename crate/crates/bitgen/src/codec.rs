//! Bidirectional mapping between token ids and fixed-length {-1,+1} bit
//! codes, plus block partitioning and BOS/EOS padding.
//!
//! Bit order is big-endian (most significant bit first); the checkpoint
//! header records this convention. Integers decoded outside the assigned
//! vocabulary range map to `fallback_id` so generation stays total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CodecConfig {
    pub vocab_size: u32,
    /// B bits per token; `ceil(log2 V)` unless explicitly widened.
    pub code_length: u32,
    /// Tokens realized jointly per block.
    pub block_size: usize,
    pub bos_id: u32,
    pub eos_id: u32,
    pub fallback_id: u32,
    /// Recorded so decoded checkpoints are self-describing.
    pub bit_order: BitOrder,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum BitOrder {
    BigEndian,
}

/// Smallest B with 2^B >= v.
pub fn derive_code_length(vocab_size: u32) -> u32 {
    let mut b = 0u32;
    while (1u64 << b) < vocab_size as u64 {
        b += 1;
    }
    b.max(1)
}

impl CodecConfig {
    pub fn derive(vocab_size: u32, block_size: usize, bos_id: u32, eos_id: u32) -> Result<Self> {
        let cfg = Self {
            vocab_size,
            code_length: derive_code_length(vocab_size),
            block_size,
            bos_id,
            eos_id,
            fallback_id: eos_id,
            bit_order: BitOrder::BigEndian,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size < 1 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        if self.code_length < 1 || self.code_length > 32 {
            return Err(Error::Config(format!(
                "code_length {} out of supported range [1, 32]",
                self.code_length
            )));
        }
        if (1u64 << self.code_length) < self.vocab_size as u64 {
            return Err(Error::Config(format!(
                "2^{} < vocab_size {}",
                self.code_length, self.vocab_size
            )));
        }
        if self.code_length > derive_code_length(self.vocab_size) + 8 {
            return Err(Error::Config(format!(
                "code_length {} far exceeds ceil(log2 {})",
                self.code_length, self.vocab_size
            )));
        }
        for (name, id) in [
            ("bos_id", self.bos_id),
            ("eos_id", self.eos_id),
            ("fallback_id", self.fallback_id),
        ] {
            if id >= self.vocab_size {
                return Err(Error::Config(format!("{name} {id} >= vocab_size")));
            }
        }
        Ok(())
    }
}

/// A token identity as a point on the {-1,+1}^B hypercube.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitCode(pub Vec<i8>);

impl BitCode {
    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }
}

/// Most significant bit first; 0 maps to -1, 1 maps to +1.
pub fn encode_token(id: u32, cfg: &CodecConfig) -> Result<BitCode> {
    if id >= cfg.vocab_size {
        return Err(Error::OutOfVocab {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let b = cfg.code_length;
    let bits = (0..b)
        .map(|j| {
            if (id >> (b - 1 - j)) & 1 == 1 {
                1i8
            } else {
                -1i8
            }
        })
        .collect();
    Ok(BitCode(bits))
}

/// Reconstructs the integer; out-of-range patterns land on `fallback_id`.
/// Entries must be exactly +-1 (hard sign precedes decode).
pub fn decode_code(bits: &BitCode, cfg: &CodecConfig) -> Result<u32> {
    if bits.0.len() != cfg.code_length as usize {
        return Err(Error::InvalidCode(format!(
            "expected {} bits, got {}",
            cfg.code_length,
            bits.0.len()
        )));
    }
    let mut id: u32 = 0;
    for &b in &bits.0 {
        let bit = match b {
            1 => 1u32,
            -1 => 0u32,
            other => {
                return Err(Error::InvalidCode(format!(
                    "entry {other} is not in {{-1,+1}}"
                )))
            }
        };
        id = (id << 1) | bit;
    }
    if id >= cfg.vocab_size {
        Ok(cfg.fallback_id)
    } else {
        Ok(id)
    }
}

/// A block-partitioned encoded sequence: one BOS block up front, EOS padding
/// to a multiple of the block size at the end. Padded positions hold the EOS
/// code and are marked invalid; the terminating EOS of the sample itself,
/// when present in the input, stays valid.
#[derive(Debug, Clone)]
pub struct BlockSequence {
    pub codes: Vec<BitCode>,
    pub valid: Vec<bool>,
    pub num_blocks: usize,
    pub original_len: usize,
}

impl BlockSequence {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Block `n` (0-based) as an `m x B` tensor.
    pub fn block_tensor<T: Scalar>(&self, n: usize, cfg: &CodecConfig) -> Tensor<T> {
        let m = cfg.block_size;
        let b = cfg.code_length as usize;
        let mut data = Vec::with_capacity(m * b);
        for code in &self.codes[n * m..(n + 1) * m] {
            data.extend(code.0.iter().map(|&x| T::from_f64(x as f64)));
        }
        Tensor::from_vec(vec![m, b], data).unwrap()
    }

    pub fn block_valid(&self, n: usize, m: usize) -> Vec<bool> {
        self.valid[n * m..(n + 1) * m].to_vec()
    }

    /// Whole sequence as an `(N*m) x B` tensor.
    pub fn codes_tensor<T: Scalar>(&self, cfg: &CodecConfig) -> Tensor<T> {
        let b = cfg.code_length as usize;
        let mut data = Vec::with_capacity(self.codes.len() * b);
        for code in &self.codes {
            data.extend(code.0.iter().map(|&x| T::from_f64(x as f64)));
        }
        Tensor::from_vec(vec![self.codes.len(), b], data).unwrap()
    }
}

/// Prepend a full BOS block, append EOS ids until the length divides the
/// block size, then encode every position. An empty input still yields the
/// BOS block plus one all-EOS block whose first position is a valid
/// terminator.
pub fn encode_sequence(ids: &[u32], cfg: &CodecConfig) -> Result<BlockSequence> {
    let m = cfg.block_size;
    let mut padded: Vec<u32> = Vec::with_capacity(ids.len() + 2 * m);
    let mut valid: Vec<bool> = Vec::with_capacity(ids.len() + 2 * m);
    for _ in 0..m {
        padded.push(cfg.bos_id);
        valid.push(true);
    }
    for &id in ids {
        padded.push(id);
        valid.push(true);
    }
    if ids.is_empty() {
        // Degenerate sample: a single valid EOS terminator.
        padded.push(cfg.eos_id);
        valid.push(true);
    }
    while padded.len() % m != 0 {
        padded.push(cfg.eos_id);
        valid.push(false);
    }
    let codes = padded
        .iter()
        .map(|&id| encode_token(id, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockSequence {
        num_blocks: codes.len() / m,
        original_len: ids.len(),
        codes,
        valid,
    })
}

/// Prompt encoding for generation: an empty prompt is just the BOS block
/// (no terminator, since text is about to be produced); anything else is the
/// standard sequence encoding.
pub fn encode_prompt(ids: &[u32], cfg: &CodecConfig) -> Result<BlockSequence> {
    if !ids.is_empty() {
        return encode_sequence(ids, cfg);
    }
    let codes = (0..cfg.block_size)
        .map(|_| encode_token(cfg.bos_id, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockSequence {
        num_blocks: 1,
        original_len: 0,
        valid: vec![true; codes.len()],
        codes,
    })
}

/// Elementwise hard sign onto the hypercube; sign(0) is +1 so decoding is
/// deterministic.
pub fn sign_project<T: Scalar>(block: &Tensor<T>) -> Tensor<T> {
    let data = block
        .to_vec()
        .into_iter()
        .map(|x| {
            if x < T::zero() {
                -T::one()
            } else {
                T::one()
            }
        })
        .collect();
    Tensor::from_vec(block.shape().to_vec(), data).unwrap()
}

/// Decode each row of a hard-signed `m x B` tensor, counting how many rows
/// fell on unassigned patterns (a sampler health metric).
pub fn decode_block<T: Scalar>(block: &Tensor<T>, cfg: &CodecConfig) -> Result<(Vec<u32>, usize)> {
    let b = cfg.code_length as usize;
    let m = block.rows();
    if block.cols() != b {
        return Err(Error::Shape(format!(
            "decode_block: {} cols vs code_length {b}",
            block.cols()
        )));
    }
    let data = block.to_f64_vec();
    let mut ids = Vec::with_capacity(m);
    let mut fallbacks = 0usize;
    for i in 0..m {
        let bits: Vec<i8> = data[i * b..(i + 1) * b]
            .iter()
            .map(|&x| if x == 1.0 { 1 } else if x == -1.0 { -1 } else { 0 })
            .collect();
        let code = BitCode(bits);
        let raw = {
            // Track fallback before substitution.
            let mut v: u64 = 0;
            for &bit in &code.0 {
                v = (v << 1) | (bit == 1) as u64;
            }
            v
        };
        if raw >= cfg.vocab_size as u64 {
            fallbacks += 1;
        }
        ids.push(decode_code(&code, cfg)?);
    }
    Ok((ids, fallbacks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(v: u32, m: usize) -> CodecConfig {
        CodecConfig::derive(v, m, 0, 1).unwrap()
    }

    #[test]
    fn encode_zero_is_all_minus_one() {
        let c = CodecConfig {
            vocab_size: 8,
            code_length: 3,
            block_size: 1,
            bos_id: 0,
            eos_id: 1,
            fallback_id: 1,
            bit_order: BitOrder::BigEndian,
        };
        assert_eq!(encode_token(0, &c).unwrap().0, vec![-1, -1, -1]);
        assert_eq!(encode_token(5, &c).unwrap().0, vec![1, -1, 1]);
    }

    #[test]
    fn derived_code_length_matches_ceil_log2() {
        assert_eq!(derive_code_length(2), 1);
        assert_eq!(derive_code_length(64), 6);
        assert_eq!(derive_code_length(65), 7);
        // 2^17 < 151936 <= 2^18
        assert_eq!(derive_code_length(151_936), 18);
        assert_eq!(derive_code_length(259), 9);
    }

    #[test]
    fn decode_inverts_encode() {
        let c = cfg(64, 2);
        for id in 0..64 {
            let code = encode_token(id, &c).unwrap();
            assert_eq!(decode_code(&code, &c).unwrap(), id);
        }
    }

    #[test]
    fn decode_101_is_five() {
        let c = CodecConfig {
            vocab_size: 8,
            code_length: 3,
            block_size: 1,
            bos_id: 0,
            eos_id: 1,
            fallback_id: 1,
            bit_order: BitOrder::BigEndian,
        };
        assert_eq!(decode_code(&BitCode(vec![1, -1, 1]), &c).unwrap(), 5);
    }

    #[test]
    fn out_of_range_patterns_all_hit_fallback() {
        // V=6 on 3 bits: exactly 2^3 - 6 = 2 codes decode to the fallback.
        let c = CodecConfig {
            vocab_size: 6,
            code_length: 3,
            block_size: 1,
            bos_id: 0,
            eos_id: 1,
            fallback_id: 1,
            bit_order: BitOrder::BigEndian,
        };
        let mut fallback_hits = 0;
        for pattern in 0u32..8 {
            let bits = BitCode(
                (0..3)
                    .map(|j| if (pattern >> (2 - j)) & 1 == 1 { 1 } else { -1 })
                    .collect(),
            );
            let id = decode_code(&bits, &c).unwrap();
            if pattern >= 6 {
                assert_eq!(id, c.fallback_id);
                fallback_hits += 1;
            } else {
                assert_eq!(id, pattern);
            }
        }
        assert_eq!(fallback_hits, 2);
    }

    #[test]
    fn non_binary_entry_is_rejected() {
        let c = cfg(4, 1);
        assert!(decode_code(&BitCode(vec![0, 1]), &c).is_err());
    }

    #[test]
    fn out_of_vocab_encode_is_rejected() {
        let c = cfg(4, 1);
        assert!(matches!(
            encode_token(4, &c),
            Err(Error::OutOfVocab { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn single_token_sequence_pads_with_invalid_eos() {
        // ids=[7], m=4: BOS block then [7, eos, eos, eos] with the appended
        // padding marked invalid.
        let c = cfg(8, 4);
        let seq = encode_sequence(&[7], &c).unwrap();
        assert_eq!(seq.num_blocks, 2);
        assert_eq!(seq.valid, vec![true, true, true, true, true, false, false, false]);
        assert_eq!(decode_code(&seq.codes[4], &c).unwrap(), 7);
        assert_eq!(decode_code(&seq.codes[5], &c).unwrap(), c.eos_id);
    }

    #[test]
    fn divisible_length_needs_no_padding() {
        let c = cfg(16, 4);
        let ids: Vec<u32> = (2..10).collect();
        let seq = encode_sequence(&ids, &c).unwrap();
        assert_eq!(seq.num_blocks, 3);
        assert!(seq.valid.iter().all(|&v| v));
    }

    #[test]
    fn block_size_one_never_pads() {
        let c = cfg(8, 1);
        let seq = encode_sequence(&[3, 4, 5], &c).unwrap();
        assert_eq!(seq.num_blocks, 4); // 1 BOS + 3 content
        assert!(seq.valid.iter().all(|&v| v));
    }

    #[test]
    fn empty_input_yields_bos_plus_eos_terminator() {
        let c = cfg(8, 4);
        let seq = encode_sequence(&[], &c).unwrap();
        assert_eq!(seq.num_blocks, 2);
        assert!(seq.valid[4]);
        assert!(!seq.valid[5]);
        assert_eq!(decode_code(&seq.codes[4], &c).unwrap(), c.eos_id);
    }

    #[test]
    fn empty_prompt_is_a_bare_bos_block() {
        let c = cfg(8, 4);
        let seq = encode_prompt(&[], &c).unwrap();
        assert_eq!(seq.num_blocks, 1);
        assert!(seq.valid.iter().all(|&v| v));
        for code in &seq.codes {
            assert_eq!(decode_code(code, &c).unwrap(), c.bos_id);
        }
        // Non-empty prompts go through the ordinary encoding.
        let seq = encode_prompt(&[5], &c).unwrap();
        assert_eq!(seq.num_blocks, 2);
    }

    #[test]
    fn sign_project_maps_to_hypercube_and_is_idempotent() {
        let t = Tensor::<f64>::from_vec(vec![2, 2], vec![0.3, -0.7, -0.1, 2.0]).unwrap();
        let s = sign_project(&t);
        assert_eq!(s.to_f64_vec(), vec![1.0, -1.0, -1.0, 1.0]);
        let s2 = sign_project(&s);
        assert_eq!(s.to_f64_vec(), s2.to_f64_vec());
        // sign(0) := +1
        let z = Tensor::<f64>::from_vec(vec![1, 1], vec![0.0]).unwrap();
        assert_eq!(sign_project(&z).to_f64_vec(), vec![1.0]);
    }

    #[test]
    fn decode_block_counts_fallbacks() {
        let c = CodecConfig {
            vocab_size: 6,
            code_length: 3,
            block_size: 2,
            bos_id: 0,
            eos_id: 1,
            fallback_id: 1,
            bit_order: BitOrder::BigEndian,
        };
        // Row 0 encodes 7 (out of range), row 1 encodes 2.
        let t = Tensor::<f64>::from_vec(vec![2, 3], vec![1.0, 1.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
        let (ids, fallbacks) = decode_block(&t, &c).unwrap();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(fallbacks, 1);
    }
}
