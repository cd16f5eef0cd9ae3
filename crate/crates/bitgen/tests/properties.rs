//! Randomized invariants for the codec, sign projection, schedules, and
//! masks.

use proptest::prelude::*;

use bitgen::backbone::{block_index, build_mask};
use bitgen::codec::{self, CodecConfig};
use bitgen::sample::{make_schedule, ScheduleKind};
use bitgen::tensor::{Tensor, MASK_NEG};

fn small_codec(vocab: u32) -> CodecConfig {
    CodecConfig::derive(vocab, 2, 0, 1).unwrap()
}

proptest! {
    #[test]
    fn codec_roundtrip_any_vocab(vocab in 3u32..2000, id_frac in 0.0f64..1.0) {
        let cfg = small_codec(vocab);
        let id = (id_frac * (vocab - 1) as f64).round() as u32;
        let code = codec::encode_token(id, &cfg).unwrap();
        prop_assert_eq!(code.0.len(), cfg.code_length as usize);
        prop_assert!(code.0.iter().all(|&b| b == 1 || b == -1));
        prop_assert_eq!(codec::decode_code(&code, &cfg).unwrap(), id);
    }

    #[test]
    fn out_of_range_ids_are_rejected(vocab in 3u32..2000, over in 0u32..100) {
        let cfg = small_codec(vocab);
        prop_assert!(codec::encode_token(vocab + over, &cfg).is_err());
    }

    #[test]
    fn sign_projection_is_idempotent_on_the_hypercube(
        vals in proptest::collection::vec(-3.0f64..3.0, 12)
    ) {
        let t = Tensor::<f64>::from_f64_vec(vec![3, 4], vals).unwrap();
        let once = codec::sign_project(&t);
        let twice = codec::sign_project(&once);
        let data = once.to_f64_vec();
        prop_assert!(data.iter().all(|&x| x == 1.0 || x == -1.0));
        prop_assert_eq!(data, twice.to_f64_vec());
    }

    #[test]
    fn schedules_are_strictly_increasing_with_pinned_endpoints(
        steps in 1usize..50,
        uniform in any::<bool>()
    ) {
        let kind = if uniform { ScheduleKind::Uniform } else { ScheduleKind::Cosine };
        let s = make_schedule(steps, kind, 2.0).unwrap();
        prop_assert_eq!(s.grid.len(), steps + 1);
        prop_assert_eq!(s.grid[0], 0.0);
        prop_assert_eq!(s.grid[steps], 1.0);
        for k in 1..=steps {
            prop_assert!(s.grid[k] > s.grid[k - 1]);
        }
    }

    #[test]
    fn mask_matches_block_index_comparison(len in 1usize..24, m in 1usize..6) {
        let mask: Tensor<f64> = build_mask(len, m).unwrap();
        let data = mask.to_f64_vec();
        for i in 0..len {
            for j in 0..len {
                let visible = block_index(j + 1, m).unwrap() <= block_index(i + 1, m).unwrap();
                let expect = if visible { 0.0 } else { MASK_NEG };
                prop_assert_eq!(data[i * len + j], expect);
            }
        }
    }

    #[test]
    fn prompt_encoding_is_block_aligned(
        ids in proptest::collection::vec(2u32..14, 0..12),
        m in 1usize..5
    ) {
        let cfg = CodecConfig::derive(14, m, 0, 1).unwrap();
        let seq = codec::encode_prompt(&ids, &cfg).unwrap();
        prop_assert_eq!(seq.codes.len() % m, 0);
        prop_assert_eq!(seq.codes.len(), seq.num_blocks * m);
        // The BOS block leads, and every prompt token appears in order.
        prop_assert_eq!(codec::decode_code(&seq.codes[0], &cfg).unwrap(), cfg.bos_id);
        for (i, &id) in ids.iter().enumerate() {
            prop_assert_eq!(codec::decode_code(&seq.codes[m + i], &cfg).unwrap(), id);
        }
    }
}
