use super::tokenizer::EOS;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding driven by a next-token logit function.
///
/// `next_logits` receives the whole sequence so far and returns the logits
/// for the following token. Decoding stops after `max_new` tokens, after
/// emitting `EOS`, or when the sequence reaches `max_len`.
pub fn greedy_decode<S: Scalar>(
    prompt: &[usize],
    max_new: usize,
    max_len: usize,
    mut next_logits: impl FnMut(&[usize]) -> Result<Vec<S>>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::contract("greedy decoding needs a nonempty prompt"));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        if seq.len() >= max_len {
            break;
        }
        let logits = next_logits(&seq)?;
        let next = argmax(&logits);
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(seq)
}
