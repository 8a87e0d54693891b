//! ROUGE, BLEU and perplexity.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::corpus::InstructionExample;
use crate::error::{Error, Result};
use crate::model::{generate_greedy, BaseModel, TokenizedExample, Tokenizer, EOS};
use crate::scalar::Scalar;
use crate::trainer::local_loss;

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap and the n-gram totals of candidate and reference.
fn overlap<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let hits = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    let total = |s: &[T]| (s.len() + 1).saturating_sub(n);
    (hits, total(cand), total(reference))
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-N F1 with clipped counts; 0 when either side has no n-grams.
pub fn rouge_n_f1<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> f64 {
    let (hits, nc, nr) = overlap(cand, reference, n);
    if n == 0 || nc == 0 || nr == 0 {
        return 0.0;
    }
    f1(hits as f64 / nc as f64, hits as f64 / nr as f64)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l_f1<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(cand, reference) as f64;
    f1(l / cand.len() as f64, l / reference.len() as f64)
}

/// BLEU-k with +1 smoothing of the n ≥ 2 precisions.
pub fn bleu_k<T: Eq + Hash>(cand: &[T], reference: &[T], k: usize) -> f64 {
    bleu_k_with(cand, reference, k, true)
}

/// BLEU-k: geometric mean of clipped precisions for n = 1..k times
/// `min(1, exp(1 − |ref|/|cand|))`. `k` outside `1..=4` or an empty
/// candidate scores 0.
pub fn bleu_k_with<T: Eq + Hash>(cand: &[T], reference: &[T], k: usize, smoothing: bool) -> f64 {
    if cand.is_empty() || !(1..=4).contains(&k) {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=k {
        let (hits, total, _) = overlap(cand, reference, n);
        let add = if smoothing && n >= 2 { 1.0 } else { 0.0 };
        let (num, den) = (hits as f64 + add, total as f64 + add);
        if num == 0.0 || den == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln();
    }
    let bp = (1.0 - reference.len() as f64 / cand.len() as f64).exp().min(1.0);
    bp * (log_sum / k as f64).exp()
}

/// Mean of BLEU-1..4.
pub fn bleu_n_avg<T: Eq + Hash>(cand: &[T], reference: &[T]) -> f64 {
    (1..=4).map(|k| bleu_k(cand, reference, k)).sum::<f64>() / 4.0
}

/// `exp` of the mean masked-token negative log-likelihood over `test`.
pub fn perplexity<S: Scalar>(
    model: &BaseModel<S>,
    adapters: &AdapterSet<S>,
    test: &[TokenizedExample],
) -> Result<f64> {
    Ok(nll_sum(model, adapters, test)?.mean().exp())
}

/// Summed masked-token NLL and the token count (Eq. 1 in its literal sum form).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllSum {
    pub total: f64,
    pub tokens: usize,
}

impl NllSum {
    pub fn mean(&self) -> f64 {
        self.total / self.tokens as f64
    }
}

pub fn nll_sum<S: Scalar>(
    model: &BaseModel<S>,
    adapters: &AdapterSet<S>,
    test: &[TokenizedExample],
) -> Result<NllSum> {
    if test.is_empty() {
        return Err(Error::contract("perplexity of an empty test set"));
    }
    let mut total = 0.0;
    let mut tokens = 0;
    for ex in test {
        let n = ex.masked_count();
        if n == 0 {
            continue;
        }
        total += local_loss(model, adapters, &[ex])?.item()?.as_f64() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::contract("test set has no masked tokens"));
    }
    Ok(NllSum { total, tokens })
}

/// Unit that ROUGE/BLEU count over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenUnit {
    #[default]
    Byte,
    Whitespace,
}

/// Scores of one model on one test corpus; ROUGE/BLEU in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub corpus: String,
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub rouge_l_f1: f64,
    pub bleu4: f64,
    pub bleu_n: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Examples per corpus scored by greedy generation (ROUGE/BLEU).
    pub generate_limit: usize,
    /// Extra tokens allowed beyond the reference length.
    pub generate_slack: usize,
    pub unit: TokenUnit,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            generate_limit: 8,
            generate_slack: 8,
            unit: TokenUnit::Byte,
        }
    }
}

fn units(text: &str, unit: TokenUnit) -> Vec<String> {
    match unit {
        TokenUnit::Byte => text.bytes().map(|b| b.to_string()).collect(),
        TokenUnit::Whitespace => text.split_whitespace().map(str::to_string).collect(),
    }
}

/// Greedy continuation of the example's input, as text.
pub fn generate_output<S: Scalar>(
    model: &BaseModel<S>,
    adapters: &AdapterSet<S>,
    ex: &InstructionExample,
    max_new: usize,
) -> Result<String> {
    let prompt = ex.tokenize(model.config.max_context)?.x_tokens;
    let out = generate_greedy(model, adapters, &prompt, max_new)?;
    let new: Vec<usize> = out[prompt.len()..].iter().copied().take_while(|&t| t != EOS).collect();
    Ok(Tokenizer.detokenize_lossy(&new))
}

/// Perplexity over all of `test`; ROUGE/BLEU averaged over the first
/// `opts.generate_limit` examples.
pub fn evaluate<S: Scalar>(
    model: &BaseModel<S>,
    adapters: &AdapterSet<S>,
    test: &[InstructionExample],
    model_id: &str,
    corpus_id: &str,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let max_context = model.config.max_context;
    let tokenized = test
        .iter()
        .map(|e| e.tokenize(max_context))
        .collect::<Result<Vec<_>>>()?;
    let ppl = perplexity(model, adapters, &tokenized)?;
    let mut sums = [0.0; 5];
    let scored = opts.generate_limit.min(test.len());
    for (ex, tok) in test.iter().zip(&tokenized).take(scored) {
        let room = max_context.saturating_sub(tok.x_tokens.len());
        let max_new = (tok.y_tokens.len() + opts.generate_slack).min(room);
        let hyp = generate_output(model, adapters, ex, max_new)?;
        let (c, r) = (units(&hyp, opts.unit), units(&ex.instruction_output, opts.unit));
        let scores = [
            rouge_n_f1(&c, &r, 1),
            rouge_n_f1(&c, &r, 2),
            rouge_l_f1(&c, &r),
            bleu_k(&c, &r, 4),
            bleu_n_avg(&c, &r),
        ];
        for (s, v) in sums.iter_mut().zip(scores) {
            *s += v;
        }
    }
    let avg = |i: usize| if scored == 0 { 0.0 } else { sums[i] / scored as f64 };
    Ok(MetricReport {
        model: model_id.to_string(),
        corpus: corpus_id.to_string(),
        rouge1_f1: avg(0),
        rouge2_f1: avg(1),
        rouge_l_f1: avg(2),
        bleu4: avg(3),
        bleu_n: avg(4),
        perplexity: ppl,
    })
}

#[cfg(test)]
mod tests;
