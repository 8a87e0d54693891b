//! The server side of Algorithm 1.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapters, AdapterSet, RunTag};
use crate::error::{Error, Result};
use crate::model::{BaseModel, TokenizedExample};
use crate::scalar::Scalar;
use crate::trainer::{client_update, ClientState, StepLog, TrainHyper};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "FEDLORA_THREADS";

/// Worker count: available parallelism, capped by `FEDLORA_THREADS` when set.
pub fn worker_threads() -> Result<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(available),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(available)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedMode {
    /// Clients always minimize Eq. 1.
    Base,
    /// Clients minimize Eq. 4 from round 2 on.
    Cl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub rounds: u32,
    pub rank: usize,
    pub seed: u64,
    pub mode: FedMode,
    pub hyper: TrainHyper,
    pub threads: usize,
    pub run: Option<RunTag>,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 5,
            rank: 4,
            seed: 0,
            mode: FedMode::Cl,
            hyper: TrainHyper::default(),
            threads: 1,
            run: None,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.hyper.validate()
    }

    /// Hyperparameters a client actually uses in this mode.
    pub fn client_hyper(&self) -> TrainHyper {
        let mut h = self.hyper.clone();
        if self.mode == FedMode::Base {
            h.lambda = 0.0;
        }
        h
    }
}

/// `|D_i| / Σ_j |D_j|`.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::contract("no client sizes"));
    }
    if sizes.contains(&0) {
        return Err(Error::contract("client sizes must be at least 1"));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Eq. 2: size-weighted average of the client adapters, accumulated in
/// list order. The result's round index is one past the inputs'.
pub fn aggregate<S: Scalar>(received: &[(AdapterSet<S>, usize)]) -> Result<AdapterSet<S>> {
    let (first, _) = received
        .first()
        .ok_or_else(|| Error::contract("aggregate of zero clients"))?;
    let sizes: Vec<usize> = received.iter().map(|(_, n)| *n).collect();
    let weights = aggregation_weights(&sizes)?;
    let layout: Vec<(&str, &[usize], &[usize])> = first
        .pairs()
        .map(|(k, p)| (k, p.a.shape(), p.b.shape()))
        .collect();
    for (set, _) in &received[1..] {
        let other: Vec<(&str, &[usize], &[usize])> =
            set.pairs().map(|(k, p)| (k, p.a.shape(), p.b.shape())).collect();
        if other != layout {
            return Err(Error::contract("client adapter sets differ in layout"));
        }
    }
    // x_1 + Σ_{i>1} w_i (x_i − x_1): the same convex combination, but
    // identical inputs come back bit-exact.
    let base = first.flatten();
    let mut acc = base.clone();
    for ((set, _), &w) in received.iter().zip(&weights).skip(1) {
        let w = S::lit(w);
        for ((a, x), x0) in acc.iter_mut().zip(set.flatten()).zip(&base) {
            *a += w * (x - *x0);
        }
    }
    let mut out = first.unflatten(&acc)?;
    out.set_trainable(false);
    out.meta.client_id = None;
    out.meta.round = first.meta.round + 1;
    Ok(out)
}

/// One line of the round log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub t: u32,
    pub client_id: u32,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub mean_loss: f64,
    pub mean_penalty: f64,
}

/// Server-side record of a finished round.
#[derive(Debug, Clone)]
pub struct RoundState<S> {
    pub t: u32,
    pub global: AdapterSet<S>,
    /// Client adapters in client order, as deserialized by the server.
    pub received: Vec<AdapterSet<S>>,
    pub logs: Vec<RoundLog>,
    pub steps: Vec<StepLog>,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub elapsed: std::time::Duration,
}

struct ClientReply {
    bytes: Vec<u8>,
    mean_loss: f64,
    mean_penalty: f64,
    steps: Vec<StepLog>,
}

fn serve_client<S: Scalar>(
    state: &mut ClientState<S>,
    model: &BaseModel<S>,
    down: &[u8],
    t: u32,
    hyper: &TrainHyper,
) -> Result<ClientReply> {
    let global = AdapterSet::<S>::from_bytes(down)?;
    let out = client_update(state, model, &global, t, hyper)?;
    Ok(ClientReply {
        bytes: out.adapters.to_bytes()?,
        mean_loss: out.mean_loss,
        mean_penalty: out.mean_penalty,
        steps: out.logs,
    })
}

/// Distributes `global` as bytes, runs every client (up to `config.threads`
/// at once), collects their bytes and aggregates. Any client failure aborts
/// the round.
pub fn run_round<S: Scalar>(
    global: &AdapterSet<S>,
    clients: &mut [ClientState<S>],
    model: &BaseModel<S>,
    t: u32,
    config: &FedConfig,
) -> Result<RoundState<S>> {
    if clients.is_empty() {
        return Err(Error::contract("a round needs at least one client"));
    }
    let start = std::time::Instant::now();
    let down = global.to_bytes()?;
    let hyper = config.client_hyper();
    let workers = config.threads.clamp(1, clients.len());
    let mut replies: Vec<Option<Result<ClientReply>>> = (0..clients.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut lanes: Vec<Vec<(&mut ClientState<S>, &mut Option<Result<ClientReply>>)>> =
            (0..workers).map(|_| Vec::new()).collect();
        for (i, (c, r)) in clients.iter_mut().zip(replies.iter_mut()).enumerate() {
            lanes[i % workers].push((c, r));
        }
        for lane in lanes {
            let (down, hyper) = (&down, &hyper);
            scope.spawn(move || {
                for (state, slot) in lane {
                    *slot = Some(serve_client(state, model, down, t, hyper));
                }
            });
        }
    });
    let mut received = Vec::with_capacity(clients.len());
    let mut logs = Vec::with_capacity(clients.len());
    let mut steps = Vec::new();
    let mut bytes_up = 0;
    for (state, reply) in clients.iter().zip(replies) {
        let reply = reply
            .expect("every client ran")
            .map_err(|e| Error::Client {
                client: state.client_id as usize,
                source: Box::new(e),
            })?;
        let set = AdapterSet::<S>::from_bytes(&reply.bytes)?;
        bytes_up += reply.bytes.len();
        logs.push(RoundLog {
            t,
            client_id: state.client_id,
            bytes_up: reply.bytes.len(),
            bytes_down: down.len(),
            mean_loss: reply.mean_loss,
            mean_penalty: reply.mean_penalty,
        });
        steps.extend(reply.steps);
        received.push((set, state.dataset.len()));
    }
    let new_global = aggregate(&received)?;
    Ok(RoundState {
        t,
        global: new_global,
        received: received.into_iter().map(|(s, _)| s).collect(),
        logs,
        steps,
        bytes_up,
        bytes_down: down.len() * clients.len(),
        elapsed: start.elapsed(),
    })
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainingOutput<S> {
    pub global: AdapterSet<S>,
    /// Each client's final local adapters (the personalized models).
    pub personal: Vec<AdapterSet<S>>,
    pub rounds: Vec<RoundLog>,
    pub steps: Vec<StepLog>,
    /// Uplink bytes per round.
    pub uplink: Vec<usize>,
    pub globals: Vec<AdapterSet<S>>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("log rows serialize");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Algorithm 1. Client `i` (1-based) trains on `datasets[i-1]`. When `out`
/// is given, writes `global_round{t}.fjla`, `client{i}_final.fjla`,
/// `rounds.jsonl` and `steps.jsonl` there.
pub fn run_training<S: Scalar>(
    config: &FedConfig,
    model: &BaseModel<S>,
    datasets: Vec<Vec<TokenizedExample>>,
    out: Option<&Path>,
) -> Result<TrainingOutput<S>> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::Config("at least one client is required".into()));
    }
    let mut clients = datasets
        .into_iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(i as u32 + 1, d, config.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut global = init_adapters::<S>(&model.config, config.rank, config.seed)?;
    global.meta.run = config.run;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut output = TrainingOutput {
        global: global.clone(),
        personal: Vec::new(),
        rounds: Vec::new(),
        steps: Vec::new(),
        uplink: Vec::new(),
        globals: Vec::new(),
    };
    for t in 1..=config.rounds {
        let round = run_round(&global, &mut clients, model, t, config)?;
        global = round.global;
        if let Some(dir) = out {
            global.save(dir.join(format!("global_round{t}.fjla")))?;
        }
        output.rounds.extend(round.logs);
        output.steps.extend(round.steps);
        output.uplink.push(round.bytes_up);
        output.globals.push(global.clone());
        output.personal = round.received;
    }
    output.global = global;
    if let Some(dir) = out {
        for (i, p) in output.personal.iter().enumerate() {
            p.save(dir.join(format!("client{}_final.fjla", i + 1)))?;
        }
        write_jsonl(&dir.join("rounds.jsonl"), &output.rounds)?;
        write_jsonl(&dir.join("steps.jsonl"), &output.steps)?;
    }
    Ok(output)
}

#[cfg(test)]
mod tests;
