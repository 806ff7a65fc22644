use super::batch::{eval_windows, Token, TokenBatch};
use super::transformer::{forward_values, LanguageModel};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
use serde::{Deserialize, Serialize};

/// Windows scored per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

/// Next-token cross-entropy: mean over positions `1..T` of
/// `-log P(x_t | x_<t)`, with `logits: [B, T, V]`.
pub fn loss_ce(g: &mut Graph, logits: Var, batch: &TokenBatch) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != batch.batch || shape[1] != batch.len {
        return Err(Error::shape(
            "loss_ce",
            format!("logits {shape:?} for batch {}×{}", batch.batch, batch.len),
        ));
    }
    if batch.len < 2 {
        return Err(Error::shape("loss_ce", "need at least two positions"));
    }
    let v = shape[2];
    let pred = g.slice(logits, 1, 0, batch.len - 1)?;
    let pred = g.reshape(pred, &[batch.batch * (batch.len - 1), v])?;
    g.cross_entropy(pred, &batch.targets())
}

/// Corpus-level language-model quality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmEval {
    /// Mean token negative log-likelihood (log-perplexity).
    pub log_ppl: f64,
    /// `exp(log_ppl)`
    pub ppl: f64,
    /// Teacher-forced greedy next-token accuracy, in percent.
    pub token_acc: f64,
    /// Number of scored positions.
    pub positions: usize,
}

/// Scores every predictable position of `corpus` once, teacher-forced.
pub fn evaluate_lm<M: LanguageModel + ?Sized>(model: &M, corpus: &[Token], seq_len: usize) -> Result<LmEval> {
    let windows = eval_windows(corpus, seq_len.min(model.config().max_seq_len));
    if windows.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let v = model.config().vocab_size;
    let mut nll = 0.0;
    let mut hits = 0usize;
    let mut count = 0usize;
    // group windows by length so each batch is rectangular
    let mut start = 0;
    while start < windows.len() {
        let len = windows[start].len();
        let mut end = start;
        while end < windows.len() && end - start < EVAL_BATCH && windows[end].len() == len {
            end += 1;
        }
        let batch = TokenBatch::from_windows(&windows[start..end])?;
        let logits = forward_values(model, &batch)?.logits;
        let data = logits.data();
        for b in 0..batch.batch {
            for t in 0..len - 1 {
                let row = &data[(b * len + t) * v..(b * len + t + 1) * v];
                let target = batch.ids[b * len + t + 1];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                nll += lse - row[target];
                if argmax(row) == target {
                    hits += 1;
                }
                count += 1;
            }
        }
        start = end;
    }
    let log_ppl = nll / count as f64;
    Ok(LmEval {
        log_ppl,
        ppl: log_ppl.exp(),
        token_acc: 100.0 * hits as f64 / count as f64,
        positions: count,
    })
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Token perplexity `Γ = exp(mean NLL)` and its logarithm.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, corpus: &[Token], seq_len: usize) -> Result<(f64, f64)> {
    let e = evaluate_lm(model, corpus, seq_len)?;
    Ok((e.ppl, e.log_ppl))
}

/// Percentage of positions whose argmax logit is the reference token.
pub fn token_accuracy<M: LanguageModel + ?Sized>(model: &M, corpus: &[Token], seq_len: usize) -> Result<f64> {
    Ok(evaluate_lm(model, corpus, seq_len)?.token_acc)
}
