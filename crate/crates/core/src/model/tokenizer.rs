//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn tokenize(&self, text: &[u8]) -> Vec<usize> {
        text.iter().map(|&b| b as usize).collect()
    }

    pub fn tokenize_str(&self, text: &str) -> Vec<usize> {
        self.tokenize(text.as_bytes())
    }

    /// Maps byte ids back to bytes; special and out-of-range ids are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
    }

    pub fn detokenize_lossy(&self, ids: &[usize]) -> String {
        String::from_utf8_lossy(&self.detokenize(ids)).into_owned()
    }
}
