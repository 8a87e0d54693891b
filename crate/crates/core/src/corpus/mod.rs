//! Instruction datasets: JSONL ingestion and three synthetic client styles.

mod styles;

pub use styles::{StyleSpec, STYLES};

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenizedExample, Tokenizer, VOCAB_SIZE};

/// One `{instruction input: instruction output}` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction_input: String,
    pub instruction_output: String,
}

impl InstructionExample {
    pub fn new(input: impl Into<String>, output: impl Into<String>) -> Self {
        InstructionExample {
            instruction_input: input.into(),
            instruction_output: output.into(),
        }
    }

    pub fn tokenize(&self, max_context: usize) -> Result<TokenizedExample> {
        TokenizedExample::new(&self.instruction_input, &self.instruction_output, max_context)
    }
}

pub fn tokenize_all(examples: &[InstructionExample], max_context: usize) -> Result<Vec<TokenizedExample>> {
    examples.iter().map(|e| e.tokenize(max_context)).collect()
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<InstructionExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            detail: e.to_string(),
        })?;
        let field = |name: &'static str| -> Result<String> {
            value
                .get(name)
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .ok_or(Error::Schema {
                    path: path.to_path_buf(),
                    line: lineno,
                    field: name,
                })
        };
        let input = field("instruction_input")?;
        let output = field("instruction_output")?;
        if output.is_empty() {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: lineno,
                field: "instruction_output",
            });
        }
        out.push(InstructionExample::new(input, output));
    }
    Ok(out)
}

pub fn save_jsonl(path: impl AsRef<Path>, examples: &[InstructionExample]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex).expect("strings always serialize");
        buf.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// One client's generated data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientCorpus {
    pub style: &'static str,
    pub train: Vec<InstructionExample>,
    pub test: Vec<InstructionExample>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedCorpora {
    pub clients: Vec<ClientCorpus>,
    /// Balanced held-out examples from every style.
    pub mixed_test: Vec<InstructionExample>,
}

/// Default desk-scale client sizes (8 : 2.2 : 1).
pub const DEFAULT_SIZES: [usize; 3] = [800, 220, 100];

/// Smallest accepted client size.
pub const MIN_CLIENT_SIZE: usize = 10;

/// Longest byte length of any generated pair, BOS and EOS included.
pub fn max_pair_tokens() -> usize {
    STYLES.iter().map(StyleSpec::max_tokens).max().unwrap_or(0)
}

fn style_rng(seed: u64, style: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream * 16 + style as u64 + 1);
    rng
}

/// Three client corpora, one per style, each split 90/10 in generation
/// order, plus a mixed test set with `ceil(total_test / 3)` fresh examples
/// per style.
pub fn generate_clients(seed: u64, sizes: &[usize]) -> Result<GeneratedCorpora> {
    if sizes.len() != STYLES.len() {
        return Err(Error::Config(format!(
            "expected {} client sizes, got {}",
            STYLES.len(),
            sizes.len()
        )));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n < MIN_CLIENT_SIZE) {
        return Err(Error::Config(format!(
            "client size {n} is below the minimum of {MIN_CLIENT_SIZE}"
        )));
    }
    let mut clients = Vec::with_capacity(sizes.len());
    let mut total_test = 0;
    for (i, (&n, style)) in sizes.iter().zip(STYLES.iter()).enumerate() {
        let mut rng = style_rng(seed, i, 0);
        let mut all: Vec<InstructionExample> = (0..n).map(|_| style.sample(&mut rng)).collect();
        let n_train = n - n.div_ceil(10);
        let test = all.split_off(n_train);
        total_test += test.len();
        clients.push(ClientCorpus {
            style: style.name,
            train: all,
            test,
        });
    }
    let per_style = total_test.div_ceil(STYLES.len());
    let mut mixed_test = Vec::with_capacity(per_style * STYLES.len());
    for (i, style) in STYLES.iter().enumerate() {
        let mut rng = style_rng(seed, i, 1);
        mixed_test.extend((0..per_style).map(|_| style.sample(&mut rng)));
    }
    Ok(GeneratedCorpora { clients, mixed_test })
}

impl GeneratedCorpora {
    /// Writes `client{i}_train.jsonl`, `client{i}_test.jsonl` and `mixed_test.jsonl`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, c) in self.clients.iter().enumerate() {
            save_jsonl(dir.join(format!("client{}_train.jsonl", i + 1)), &c.train)?;
            save_jsonl(dir.join(format!("client{}_test.jsonl", i + 1)), &c.test)?;
        }
        save_jsonl(dir.join("mixed_test.jsonl"), &self.mixed_test)
    }
}

/// Byte-token unigram distribution over both fields, with BOS/EOS counted
/// once per example.
pub fn unigram(examples: &[InstructionExample]) -> Vec<f64> {
    let mut counts = vec![0u64; VOCAB_SIZE];
    for ex in examples {
        let input = Tokenizer.tokenize_str(&ex.instruction_input);
        let output = Tokenizer.tokenize_str(&ex.instruction_output);
        for t in input.into_iter().chain(output) {
            counts[t] += 1;
        }
        counts[crate::model::BOS] += 1;
        counts[crate::model::EOS] += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; VOCAB_SIZE];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Jensen–Shannon divergence in nats.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}
