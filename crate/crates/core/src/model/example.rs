use super::tokenizer::{Tokenizer, BOS, EOS};
use crate::error::{Error, Result};

/// One instruction pair in token form.
///
/// The full sequence is `x_tokens ++ y_tokens`; `loss_mask[j]` is 1 exactly
/// when token `j` belongs to the output, so the loss covers `y` only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub x_tokens: Vec<usize>,
    pub y_tokens: Vec<usize>,
    pub loss_mask: Vec<u8>,
}

impl TokenizedExample {
    /// Tokenizes `BOS + input` and `output + EOS`. When the pair exceeds
    /// `max_context`, input bytes are dropped from the left (BOS is kept);
    /// the output is never cut.
    pub fn new(input: &str, output: &str, max_context: usize) -> Result<Self> {
        let mut y_tokens = Tokenizer.tokenize_str(output);
        y_tokens.push(EOS);
        if y_tokens.len() + 1 > max_context {
            return Err(Error::contract(format!(
                "output of {} tokens cannot fit a context of {max_context}",
                y_tokens.len()
            )));
        }
        let input_ids = Tokenizer.tokenize_str(input);
        let room = max_context - y_tokens.len() - 1;
        let keep = input_ids.len().min(room);
        let mut x_tokens = Vec::with_capacity(keep + 1);
        x_tokens.push(BOS);
        x_tokens.extend_from_slice(&input_ids[input_ids.len() - keep..]);
        Ok(Self::from_parts(x_tokens, y_tokens))
    }

    pub fn from_parts(x_tokens: Vec<usize>, y_tokens: Vec<usize>) -> Self {
        let mut loss_mask = vec![0u8; x_tokens.len()];
        loss_mask.resize(x_tokens.len() + y_tokens.len(), 1);
        TokenizedExample {
            x_tokens,
            y_tokens,
            loss_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.loss_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss_mask.is_empty()
    }

    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.x_tokens.clone();
        s.extend_from_slice(&self.y_tokens);
        s
    }

    /// Model inputs (every token but the last).
    pub fn inputs(&self) -> Vec<usize> {
        let mut s = self.sequence();
        s.pop();
        s
    }

    /// Next-token targets aligned with [`inputs`](Self::inputs).
    pub fn targets(&self) -> Vec<usize> {
        self.sequence()[1..].to_vec()
    }

    /// Per-input-position flag: does the target there belong to the output?
    pub fn target_mask(&self) -> &[u8] {
        &self.loss_mask[1..]
    }

    pub fn masked_count(&self) -> usize {
        self.y_tokens.len()
    }
}
