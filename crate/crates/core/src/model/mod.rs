//! Byte-level tokenizer and the tiny decoder-only transformer that plays the
//! frozen base model.

mod config;
mod example;
mod generate;
mod tokenizer;
mod transformer;

pub use config::ModelConfig;
pub use example::TokenizedExample;
pub use generate::{argmax, greedy_decode};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, VOCAB_SIZE};
pub use transformer::{
    parse_site, site_name, BaseModel, Block, BoundModel, Injection, LoraVars, Projection,
    INJECTION_SITES, LN_EPS,
};

use crate::adapters::AdapterSet;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Logits `[len x vocab]` of the base model with `adapters` injected.
pub fn forward_logits<S: Scalar>(
    model: &BaseModel<S>,
    adapters: &AdapterSet<S>,
    tokens: &[usize],
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let injection = adapters.inject(&mut g, model)?;
    let out = model.forward(&mut g, &bound, Some(&injection), tokens)?;
    Ok(g.to_tensor(out))
}

/// Greedy continuation of `prompt` under `(model, adapters)`.
pub fn generate_greedy<S: Scalar>(
    model: &BaseModel<S>,
    adapters: &AdapterSet<S>,
    prompt: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    greedy_decode(prompt, max_new, model.config.max_context, |seq| {
        let logits = forward_logits(model, adapters, seq)?;
        let (rows, cols) = logits.dims2()?;
        Ok(logits.data()[(rows - 1) * cols..].to_vec())
    })
}
