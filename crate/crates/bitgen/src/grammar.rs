//! Synthetic grammars for end-to-end checks: a^n b^n and 3-digit addition.
//! Both come with an exact membership test so generated samples can be
//! scored for validity.

use rand::Rng;

use crate::tokenizer::{addition_tokenizer, anbn_tokenizer, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grammar {
    /// Strings a^n b^n with n >= 1.
    AnBn,
    /// Strings "a+b=c" with a, b in [0, 999] and c their sum.
    Addition,
}

impl Grammar {
    pub fn tokenizer(&self) -> Tokenizer {
        match self {
            Grammar::AnBn => anbn_tokenizer(),
            Grammar::Addition => addition_tokenizer(),
        }
    }

    /// Exact membership test.
    pub fn check(&self, s: &str) -> bool {
        match self {
            Grammar::AnBn => {
                let n_a = s.chars().take_while(|&c| c == 'a').count();
                if n_a == 0 || s.len() != 2 * n_a {
                    return false;
                }
                s[n_a..].chars().all(|c| c == 'b')
            }
            Grammar::Addition => {
                let Some((lhs, rhs)) = s.split_once('=') else {
                    return false;
                };
                let Some((a, b)) = lhs.split_once('+') else {
                    return false;
                };
                let (Ok(a), Ok(b), Ok(c)) = (a.parse::<u64>(), b.parse::<u64>(), rhs.parse::<u64>())
                else {
                    return false;
                };
                a <= 999 && b <= 999 && a + b == c
            }
        }
    }

    /// Draw one string uniformly over the sampler's parameter range.
    pub fn sample<R: Rng>(&self, rng: &mut R, max_n: usize) -> String {
        match self {
            Grammar::AnBn => {
                let n = rng.gen_range(1..=max_n.max(1));
                let mut s = String::with_capacity(2 * n);
                for _ in 0..n {
                    s.push('a');
                }
                for _ in 0..n {
                    s.push('b');
                }
                s
            }
            Grammar::Addition => {
                let a: u64 = rng.gen_range(0..=999);
                let b: u64 = rng.gen_range(0..=999);
                format!("{a}+{b}={}", a + b)
            }
        }
    }

    pub fn sample_corpus<R: Rng>(&self, count: usize, max_n: usize, rng: &mut R) -> Vec<String> {
        (0..count).map(|_| self.sample(rng, max_n)).collect()
    }

    /// Tokenized training corpus with a terminal EOS per sample, drawn from
    /// a stream keyed only by `seed` so any run can rebuild it exactly.
    pub fn training_corpus(&self, count: usize, max_n: usize, seed: u64) -> Vec<Vec<u32>> {
        use rand::SeedableRng;
        let tok = self.tokenizer();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        self.sample_corpus(count, max_n, &mut rng)
            .iter()
            .map(|s| {
                let mut ids = tok.encode(s).unwrap();
                ids.push(tok.eos_id());
                ids
            })
            .collect()
    }
}
