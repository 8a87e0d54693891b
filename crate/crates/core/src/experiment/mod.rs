//! The experimental grid: zero-shot, centralized, per-client centralized and
//! the two federated variants, each evaluated on every test corpus.

mod report;

pub use report::{emit_report, ReportMeta, SMOOTHING_NOTE};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{base_to_bytes, AdapterSet, RunTag};
use crate::corpus::{generate_clients, load_jsonl, tokenize_all, InstructionExample, DEFAULT_SIZES};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, MetricReport};
use crate::model::{BaseModel, ModelConfig, TokenizedExample};
use crate::orchestrator::{run_training, worker_threads, FedConfig, FedMode};
use crate::trainer::TrainHyper;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShot,
    Center,
    CenterClient,
    FedBase,
    FedCl,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::ZeroShot, Mode::Center, Mode::CenterClient, Mode::FedBase, Mode::FedCl];

    pub fn name(self) -> &'static str {
        match self {
            Mode::ZeroShot => "zero_shot",
            Mode::Center => "center",
            Mode::CenterClient => "center_client",
            Mode::FedBase => "fed_base",
            Mode::FedCl => "fed_cl",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedSection {
    pub rounds: u32,
    pub rank: usize,
}

impl Default for FedSection {
    fn default() -> Self {
        FedSection { rounds: 5, rank: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientFiles {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Generator seed; the experiment seed when absent.
    pub seed: Option<u64>,
    pub sizes: Vec<usize>,
    /// JSONL files per client; replaces the generator when non-empty.
    pub clients: Vec<ClientFiles>,
    pub mixed_test: Option<PathBuf>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            seed: None,
            sizes: DEFAULT_SIZES.to_vec(),
            clients: Vec::new(),
            mixed_test: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    /// 1-based client index for `center_client`.
    pub client: Option<usize>,
    pub out: PathBuf,
    /// Worker threads; `FEDLORA_THREADS` or the core count when absent.
    pub threads: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub fed: FedSection,
    pub corpus: CorpusSection,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::FedCl,
            seed: 0,
            client: None,
            out: PathBuf::from("out"),
            threads: None,
            model: ModelConfig::default(),
            train: TrainHyper::default(),
            fed: FedSection::default(),
            corpus: CorpusSection::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn n_clients(&self) -> usize {
        if self.corpus.clients.is_empty() {
            self.corpus.sizes.len()
        } else {
            self.corpus.clients.len()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.fed.rounds == 0 {
            return Err(Error::Config("fed.rounds must be at least 1".into()));
        }
        if self.fed.rank == 0 || self.fed.rank >= self.model.d_model {
            return Err(Error::Config(format!(
                "fed.rank must be in 1..{}",
                self.model.d_model
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let n = self.n_clients();
        if n == 0 {
            return Err(Error::Config("no clients configured".into()));
        }
        match self.mode {
            Mode::CenterClient => match self.client {
                Some(i) if (1..=n).contains(&i) => {}
                Some(i) => return Err(Error::Config(format!("client {i} outside 1..={n}"))),
                None => return Err(Error::Config("center_client needs a client index".into())),
            },
            Mode::FedBase | Mode::FedCl if n < 2 => {
                return Err(Error::Config("federated modes need at least two clients".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Digest of every setting that affects results (threads and output
    /// directory excluded).
    pub fn hash64(&self) -> u64 {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        canon.threads = None;
        let digest = Sha256::digest(canon.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn run_tag(&self) -> RunTag {
        RunTag {
            config_hash: self.hash64(),
            seed: self.seed,
            mode: self.mode.code(),
        }
    }
}

/// One client's tokenized training data and raw test split.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: Vec<InstructionExample>,
    pub test: Vec<InstructionExample>,
}

#[derive(Debug, Clone)]
pub struct Corpora {
    pub clients: Vec<ClientData>,
    pub mixed_test: Vec<InstructionExample>,
}

impl Corpora {
    /// Test corpora in report order: `client1..clientN`, then `mixed`.
    pub fn test_sets(&self) -> Vec<(String, &[InstructionExample])> {
        let mut out: Vec<(String, &[InstructionExample])> = self
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("client{}", i + 1), c.test.as_slice()))
            .collect();
        if !self.mixed_test.is_empty() {
            out.push(("mixed".to_string(), self.mixed_test.as_slice()));
        }
        out
    }
}

pub fn load_corpora(config: &ExperimentConfig) -> Result<Corpora> {
    if config.corpus.clients.is_empty() {
        let g = generate_clients(config.corpus.seed.unwrap_or(config.seed), &config.corpus.sizes)?;
        return Ok(Corpora {
            clients: g
                .clients
                .into_iter()
                .map(|c| ClientData {
                    train: c.train,
                    test: c.test,
                })
                .collect(),
            mixed_test: g.mixed_test,
        });
    }
    let clients = config
        .corpus
        .clients
        .iter()
        .map(|f| {
            Ok(ClientData {
                train: load_jsonl(&f.train)?,
                test: load_jsonl(&f.test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mixed_test = match &config.corpus.mixed_test {
        Some(p) => load_jsonl(p)?,
        None => Vec::new(),
    };
    Ok(Corpora { clients, mixed_test })
}

/// A trained (or untrained) model under evaluation.
#[derive(Debug, Clone)]
pub struct NamedModel {
    pub name: String,
    pub adapters: AdapterSet<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config_hash: u64,
    pub models: Vec<NamedModel>,
    pub reports: Vec<MetricReport>,
    /// Uplink bytes per round (federated and centralized modes).
    pub uplink: Vec<usize>,
    pub base_bytes: usize,
}

impl ExperimentResult {
    pub fn report(&self, model: &str, corpus: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.model == model && r.corpus == corpus)
    }
}

fn train_single(
    config: &ExperimentConfig,
    model: &BaseModel<f64>,
    data: Vec<TokenizedExample>,
    steps_per_epoch: usize,
    threads: usize,
    out: &Path,
) -> Result<(AdapterSet<f64>, Vec<usize>)> {
    let fed = FedConfig {
        rounds: 1,
        rank: config.fed.rank,
        seed: config.seed,
        mode: FedMode::Base,
        hyper: TrainHyper {
            epochs: config.train.epochs * config.fed.rounds as usize,
            steps_per_epoch: Some(steps_per_epoch),
            ..config.train.clone()
        },
        threads,
        run: Some(config.run_tag()),
    };
    let out = run_training(&fed, model, vec![data], Some(out))?;
    Ok((out.global, out.uplink))
}

/// Trains per `config.mode`, evaluates every produced model on every test
/// corpus, and writes checkpoints plus `report.csv` / `report.json` under
/// `config.out`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let threads = match config.threads {
        Some(n) => n,
        None => worker_threads()?,
    };
    let corpora = load_corpora(config)?;
    let model = BaseModel::<f64>::init(&config.model)?;
    let ctx = config.model.max_context;
    let out = config.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let base_bytes = base_to_bytes(&model)?;
    let window = config.train.window();
    let steps_for = |n: usize| n.div_ceil(window).min(n).max(1);

    let mut uplink = Vec::new();
    let models: Vec<NamedModel> = match config.mode {
        Mode::ZeroShot => vec![NamedModel {
            name: "zero_shot".into(),
            adapters: AdapterSet::default(),
        }],
        Mode::Center => {
            let mut pooled = Vec::new();
            let mut steps = 0;
            for c in &corpora.clients {
                pooled.extend(tokenize_all(&c.train, ctx)?);
                steps += steps_for(c.train.len());
            }
            write_base(out, &base_bytes)?;
            let (global, up) = train_single(config, &model, pooled, steps, threads, out)?;
            uplink = up;
            vec![NamedModel {
                name: "center".into(),
                adapters: global,
            }]
        }
        Mode::CenterClient => {
            let i = config.client.expect("validated");
            let c = &corpora.clients[i - 1];
            let data = tokenize_all(&c.train, ctx)?;
            write_base(out, &base_bytes)?;
            let (global, up) = train_single(config, &model, data, steps_for(c.train.len()), threads, out)?;
            uplink = up;
            vec![NamedModel {
                name: format!("center_client{i}"),
                adapters: global,
            }]
        }
        Mode::FedBase | Mode::FedCl => {
            let fed = FedConfig {
                rounds: config.fed.rounds,
                rank: config.fed.rank,
                seed: config.seed,
                mode: if config.mode == Mode::FedCl { FedMode::Cl } else { FedMode::Base },
                hyper: config.train.clone(),
                threads,
                run: Some(config.run_tag()),
            };
            let datasets = corpora
                .clients
                .iter()
                .map(|c| tokenize_all(&c.train, ctx))
                .collect::<Result<Vec<_>>>()?;
            write_base(out, &base_bytes)?;
            let res = run_training(&fed, &model, datasets, Some(out))?;
            uplink = res.uplink;
            let prefix = config.mode.name();
            let mut models = vec![NamedModel {
                name: format!("{prefix}.global"),
                adapters: res.global,
            }];
            for (i, p) in res.personal.into_iter().enumerate() {
                models.push(NamedModel {
                    name: format!("{prefix}.client{}", i + 1),
                    adapters: p,
                });
            }
            models
        }
    };

    let reports = evaluate_matrix(&model, &models, &corpora, &config.eval, threads)?;
    let meta = ReportMeta {
        config_hash: config.hash64(),
        seed: config.seed,
        mode: config.mode.name().to_string(),
        uplink_bytes_per_round: uplink.clone(),
        base_model_bytes: base_bytes.len(),
    };
    emit_report(&reports, &meta, out)?;
    Ok(ExperimentResult {
        config_hash: meta.config_hash,
        models,
        reports,
        uplink,
        base_bytes: base_bytes.len(),
    })
}

fn write_base(out: &Path, bytes: &[u8]) -> Result<()> {
    let path = out.join("base.fjla");
    std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

/// Every model on every test corpus, rows ordered model-major.
pub fn evaluate_matrix(
    model: &BaseModel<f64>,
    models: &[NamedModel],
    corpora: &Corpora,
    opts: &EvalOptions,
    threads: usize,
) -> Result<Vec<MetricReport>> {
    let tests = corpora.test_sets();
    let cells: Vec<(&NamedModel, &(String, &[InstructionExample]))> =
        models.iter().flat_map(|m| tests.iter().map(move |t| (m, t))).collect();
    let workers = threads.clamp(1, cells.len().max(1));
    let mut results: Vec<Option<Result<MetricReport>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut lanes: Vec<Vec<(usize, &mut Option<Result<MetricReport>>)>> =
            (0..workers).map(|_| Vec::new()).collect();
        for (i, slot) in results.iter_mut().enumerate() {
            lanes[i % workers].push((i, slot));
        }
        for lane in lanes {
            let cells = &cells;
            scope.spawn(move || {
                for (i, slot) in lane {
                    let (m, (corpus, test)) = cells[i];
                    *slot = Some(evaluate(model, &m.adapters, test, &m.name, corpus, opts));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("every cell ran")).collect()
}
