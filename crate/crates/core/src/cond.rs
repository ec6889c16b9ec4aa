//! Conditioning token streams and their alignment to the codec frame rate.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};

pub use crate::synth::generate_conditioning;

const COND_MAGIC: &[u8; 4] = b"STRS";
const COND_VERSION: u8 = 1;

/// A token stream at a fixed rate over a vocabulary of `vocab` symbols.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConditioningSequence {
    tokens: Vec<u32>,
    rate: u32,
    vocab: u32,
}

impl ConditioningSequence {
    pub fn new(tokens: Vec<u32>, rate: u32, vocab: u32) -> Result<Self> {
        if rate == 0 {
            return Err(Error::InvalidArgument("conditioning rate must be positive".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::CorruptGrid(format!(
                "conditioning token {bad} outside vocabulary of {vocab}"
            )));
        }
        Ok(Self { tokens, rate, vocab })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens `start..start + len`, keeping rate and vocabulary.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.tokens.len() {
            return Err(Error::Alignment(format!(
                "window {start}..{} outside {} conditioning tokens",
                start + len,
                self.tokens.len()
            )));
        }
        Ok(Self { tokens: self.tokens[start..start + len].to_vec(), rate: self.rate, vocab: self.vocab })
    }

    /// Repeats every token `target_rate / rate` times.
    pub fn align(&self, target_rate: u32) -> Result<Self> {
        if target_rate == 0 || target_rate % self.rate != 0 {
            return Err(Error::Alignment(format!(
                "cannot align {} Hz conditioning to {target_rate} Hz (needs an integer ratio)",
                self.rate
            )));
        }
        let ratio = (target_rate / self.rate) as usize;
        let tokens = self
            .tokens
            .iter()
            .flat_map(|&t| std::iter::repeat(t).take(ratio))
            .collect();
        Ok(Self { tokens, rate: target_rate, vocab: self.vocab })
    }

    /// `STRS` record: magic, version, u32 rate, u32 vocab, u32 length, u16 tokens.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.vocab > u16::MAX as u32 + 1 {
            return Err(Error::Format(format!("vocabulary {} exceeds 16-bit tokens", self.vocab)));
        }
        let mut w = Writer::new(COND_MAGIC, COND_VERSION);
        w.u32(self.rate);
        w.u32(self.vocab);
        w.u32(self.tokens.len() as u32);
        for &t in &self.tokens {
            w.u16(t as u16);
        }
        Ok(w.finish())
    }

    pub fn read_record(data: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader::open(data, COND_MAGIC, COND_VERSION, "conditioning")?;
        let rate = r.u32()?;
        let vocab = r.u32()?;
        let len = r.u32()? as usize;
        let tokens = (0..len).map(|_| r.u16().map(u32::from)).collect::<Result<Vec<_>>>()?;
        Ok((Self::new(tokens, rate, vocab)?, r.position()))
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let (seq, used) = Self::read_record(data)?;
        if used != data.len() {
            return Err(Error::Format(format!("conditioning: {} trailing bytes", data.len() - used)));
        }
        Ok(seq)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Samples `len` states of a first-order Markov chain starting at `initial`.
///
/// `transition[i][j]` is the probability of moving from `i` to `j`.
pub fn markov_chain<R: Rng + ?Sized>(
    transition: &[Vec<f64>],
    initial: u32,
    len: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let n = transition.len();
    if initial as usize >= n {
        return Err(Error::InvalidArgument(format!("initial state {initial} outside {n} states")));
    }
    let mut out = Vec::with_capacity(len);
    let mut state = initial as usize;
    for i in 0..len {
        if i > 0 {
            state = sample_categorical(&transition[state], rng);
        }
        out.push(state as u32);
    }
    Ok(out)
}

/// Inverse-CDF draw; falls back to the last nonzero entry on rounding.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn align_25_to_50_duplicates() {
        let c = ConditioningSequence::new(vec![3, 1, 4], 25, 8).unwrap();
        let a = c.align(50).unwrap();
        assert_eq!(a.tokens(), &[3, 3, 1, 1, 4, 4]);
        assert_eq!(a.rate(), 50);
    }

    #[test]
    fn align_identity_and_failure() {
        let c = ConditioningSequence::new(vec![0, 1], 50, 2).unwrap();
        assert_eq!(c.align(50).unwrap(), c);
        let c30 = ConditioningSequence::new(vec![0, 1], 30, 2).unwrap();
        assert!(matches!(c30.align(50), Err(Error::Alignment(_))));
    }

    #[test]
    fn identity_transitions_stay_put() {
        let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chain = markov_chain(&eye, 2, 100, &mut rng).unwrap();
        assert!(chain.iter().all(|&s| s == 2));
        let single = markov_chain(&[vec![1.0]], 0, 10, &mut rng).unwrap();
        assert_eq!(single, vec![0; 10]);
    }

    #[test]
    fn empirical_transitions_match_matrix() {
        let m = vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.0, 0.5], vec![0.25, 0.25, 0.5]];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let chain = markov_chain(&m, 0, 1_000_000, &mut rng).unwrap();
        let mut counts = [[0u64; 3]; 3];
        for w in chain.windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1;
        }
        for i in 0..3 {
            let row: u64 = counts[i].iter().sum();
            for j in 0..3 {
                let f = counts[i][j] as f64 / row as f64;
                assert!((f - m[i][j]).abs() <= 0.01, "({i},{j}): {f} vs {}", m[i][j]);
            }
        }
    }

    #[test]
    fn strs_header() {
        let c = ConditioningSequence::new(vec![7, 0], 25, 1024).unwrap();
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..5], b"STRS\x01");
        assert_eq!(&b[5..9], &25u32.to_le_bytes());
        assert_eq!(&b[9..13], &1024u32.to_le_bytes());
        assert_eq!(&b[13..17], &2u32.to_le_bytes());
        assert_eq!(&b[17..], &[7, 0, 0, 0]);
        assert!(ConditioningSequence::from_bytes(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn align_length_and_dedup(tokens in proptest::collection::vec(0u32..16, 0..50), rate in 1u32..30, ratio in 1u32..5) {
            let c = ConditioningSequence::new(tokens, rate, 16).unwrap();
            let a = c.align(rate * ratio).unwrap();
            prop_assert_eq!(a.len(), c.len() * ratio as usize);
            let dedup: Vec<u32> = a.tokens().iter().step_by(ratio as usize).copied().collect();
            prop_assert_eq!(dedup.as_slice(), c.tokens());
            for chunk in a.tokens().chunks(ratio as usize) {
                prop_assert!(chunk.iter().all(|&t| t == chunk[0]));
            }
        }
    }
}
