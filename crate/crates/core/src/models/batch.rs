use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use rand::seq::SliceRandom;

/// Token id in the shared vocabulary.
pub type Token = u16;

/// A `batch × len` block of token ids, row-major. Attention over it is causal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, len: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || len == 0 || ids.len() != batch * len {
            return Err(Error::shape(
                "token_batch",
                format!("{} ids for {batch}×{len}", ids.len()),
            ));
        }
        Ok(TokenBatch { batch, len, ids })
    }

    /// Stacks equal-length windows into one batch.
    pub fn from_windows(windows: &[&[Token]]) -> Result<Self> {
        let len = windows.first().map(|w| w.len()).unwrap_or(0);
        if windows.iter().any(|w| w.len() != len) {
            return Err(Error::shape("token_batch", "windows of unequal length"));
        }
        let ids = windows.iter().flat_map(|w| w.iter().map(|&t| t as usize)).collect();
        Self::new(windows.len(), len, ids)
    }

    pub fn single(tokens: &[usize]) -> Result<Self> {
        Self::new(1, tokens.len(), tokens.to_vec())
    }

    pub fn validate(&self, vocab: usize, max_len: usize) -> Result<()> {
        if self.len > max_len {
            return Err(Error::shape(
                "token_batch",
                format!("sequence length {} exceeds max {max_len}", self.len),
            ));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok(())
    }

    /// Input positions `0..len-1` paired with targets `1..len`.
    pub fn targets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch * (self.len - 1));
        for b in 0..self.batch {
            out.extend_from_slice(&self.ids[b * self.len + 1..(b + 1) * self.len]);
        }
        out
    }
}

/// Non-overlapping windows of exactly `len` tokens; a shorter tail is dropped.
pub fn training_windows(corpus: &[Token], len: usize) -> Vec<&[Token]> {
    corpus.chunks_exact(len).collect()
}

/// Non-overlapping windows of at most `len` tokens, keeping any tail of at
/// least two tokens, so every predictable position is scored exactly once
/// per window.
pub fn eval_windows(corpus: &[Token], len: usize) -> Vec<&[Token]> {
    corpus.chunks(len).filter(|w| w.len() >= 2).collect()
}

/// Window order for one epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n_windows: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_windows).collect();
    let mut rng = rng_from_seed(derive_seed(seed, "epoch", epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Minibatches for one epoch: shuffled windows grouped `batch_size` at a time.
pub fn epoch_batches<'a>(windows: &[&'a [Token]], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<&'a [Token]>> {
    let order = epoch_order(windows.len(), seed, epoch);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.iter().map(|&i| windows[i]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_shift_by_one() {
        let b = TokenBatch::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(b.targets(), vec![2, 3, 5, 6]);
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let b = TokenBatch::new(1, 2, vec![0, 9]).unwrap();
        assert!(matches!(b.validate(8, 4), Err(Error::TokenOutOfRange { id: 9, .. })));
        assert!(b.validate(8, 1).is_err());
    }

    #[test]
    fn windows() {
        let c: Vec<Token> = (0..11).collect();
        assert_eq!(training_windows(&c, 4).len(), 2);
        let ev = eval_windows(&c, 4);
        assert_eq!(ev.len(), 3);
        assert_eq!(ev[2], &[8, 9, 10]);
        let c: Vec<Token> = (0..9).collect();
        assert_eq!(eval_windows(&c, 4).len(), 2);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 3, 0);
        assert_eq!(a, epoch_order(10, 3, 0));
        assert_ne!(a, epoch_order(10, 3, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }
}
