//! One federated client: masked instruction loss, the continual-learning
//! penalty against the last global adapters, and Adam.

mod adam;

pub use adam::Adam;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::model::{BaseModel, TokenizedExample};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    /// 2e-3 by default: at 2e-4 the desk-scale model barely moves off its
    /// initialization within the default budget.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lambda: f64,
    pub probe_batch_size: usize,
    /// Use `|J|` in the penalty instead of the signed gradient.
    pub abs_jacobian: bool,
    /// Overrides the number of optimizer steps per epoch; the shuffled data
    /// is then split into that many near-equal windows.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 2,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 2,
            grad_accum: 8,
            lambda: 1.0,
            probe_batch_size: 16,
            abs_jacobian: false,
            steps_per_epoch: None,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("Adam eps must be positive");
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.probe_batch_size == 0 {
            return bad("batch_size, grad_accum and probe_batch_size must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1");
        }
        Ok(())
    }

    /// Examples consumed by one optimizer step.
    pub fn window(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| n_examples.div_ceil(self.window()))
            .min(n_examples)
            .max(1)
    }
}

/// Gradient of the client's loss at the received global adapters, frozen for
/// the rest of the round.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianEstimate<S> {
    pub j: Vec<S>,
    pub probe_ids: Vec<usize>,
    pub round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub round: u32,
    pub client_id: u32,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub cl_penalty: f64,
    pub s: f64,
}

pub struct ClientState<S> {
    pub client_id: u32,
    pub dataset: Vec<TokenizedExample>,
    pub adapters: AdapterSet<S>,
    pub optimizer: Adam<S>,
    pub seed: u64,
}

impl<S: Scalar> ClientState<S> {
    pub fn new(client_id: u32, dataset: Vec<TokenizedExample>, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::contract(format!("client {client_id} has an empty dataset")));
        }
        Ok(ClientState {
            client_id,
            dataset,
            adapters: AdapterSet::default(),
            optimizer: Adam::new(0),
            seed,
        })
    }
}

/// Per-round RNG seed for a client.
pub fn round_seed(seed: u64, client_id: u32, round: u32) -> u64 {
    let mut z = seed ^ (u64::from(client_id) << 32 | u64::from(round)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn masked_tokens(batch: &[&TokenizedExample]) -> usize {
    batch.iter().map(|e| e.masked_count()).sum()
}

/// Records Eq. 1 on `g`: mean over every masked output position in `batch` of
/// `−log P(y_m | x, y_<m)`.
pub fn record_local_loss<'a, S: Scalar>(
    g: &mut Graph<'a, S>,
    model: &'a BaseModel<S>,
    adapters: &'a AdapterSet<S>,
    batch: &[&TokenizedExample],
) -> Result<(Var, Vec<Var>)> {
    let total = masked_tokens(batch);
    if batch.is_empty() || total == 0 {
        return Err(Error::contract("loss over a batch without masked tokens"));
    }
    let bound = model.bind(g);
    let (injection, vars) = adapters.inject_vars(g, model)?;
    let w = S::one() / S::lit(total as f64);
    let mut loss: Option<Var> = None;
    for ex in batch {
        let mask = ex.target_mask();
        let Some(first) = mask.iter().position(|&m| m != 0) else {
            continue;
        };
        let inputs = ex.inputs();
        let targets = &ex.targets()[first..];
        let weights: Vec<S> = mask[first..]
            .iter()
            .map(|&m| if m != 0 { w } else { S::zero() })
            .collect();
        let logits = model.forward_tail(g, &bound, Some(&injection), &inputs, first)?;
        let term = g.cross_entropy(logits, targets, &weights)?;
        loss = Some(match loss {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((loss.expect("at least one masked example"), vars))
}

/// Value of Eq. 1 (mean masked-token negative log-likelihood).
pub fn local_loss<S: Scalar>(
    model: &BaseModel<S>,
    adapters: &AdapterSet<S>,
    batch: &[&TokenizedExample],
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (loss, _) = record_local_loss(&mut g, model, adapters, batch)?;
    Ok(Tensor::scalar(g.scalar_value(loss)?))
}

fn trainable<S: Scalar>(adapters: &AdapterSet<S>) -> AdapterSet<S> {
    let mut out = adapters.clone();
    out.set_trainable(true);
    out
}

fn flat_grad<S: Scalar>(
    grads: &crate::tensor::Gradients<S>,
    vars: &[Var],
    adapters: &AdapterSet<S>,
) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(adapters.len());
    for (v, t) in vars.iter().zip(adapters.tensors()) {
        out.extend(grads.get_or_zeros(*v, t.len()));
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(out)
}

/// Loss and its gradient with respect to the flattened adapters.
pub fn loss_and_grad<S: Scalar>(
    model: &BaseModel<S>,
    adapters: &AdapterSet<S>,
    batch: &[&TokenizedExample],
) -> Result<(S, Vec<S>)> {
    let adapters = trainable(adapters);
    let mut g = Graph::new();
    let (loss, vars) = record_local_loss(&mut g, model, &adapters, batch)?;
    let value = g.scalar_value(loss)?;
    let grads = g.backward(loss)?;
    Ok((value, flat_grad(&grads, &vars, &adapters)?))
}

/// `J` = gradient of Eq. 1 on `probe` at the global adapters.
pub fn estimate_jacobian<S: Scalar>(
    model: &BaseModel<S>,
    global: &AdapterSet<S>,
    probe: &[&TokenizedExample],
) -> Result<JacobianEstimate<S>> {
    if probe.is_empty() {
        return Err(Error::contract("empty probe batch"));
    }
    let (_, j) = loss_and_grad(model, global, probe)?;
    Ok(JacobianEstimate {
        j,
        probe_ids: Vec::new(),
        round: global.meta.round,
    })
}

/// Records `s = Jᵀ|local − global|` and `s + s²` on `g`.
fn record_penalty<'a, S: Scalar>(
    g: &mut Graph<'a, S>,
    local_vars: &[Var],
    local: &AdapterSet<S>,
    global: &'a AdapterSet<S>,
    j: &'a [S],
) -> Result<(Var, Var)> {
    if local.len() != global.len() || local.len() != j.len() || local_vars.len() != 2 * local.num_sites()
    {
        return Err(Error::contract(format!(
            "penalty operands differ in length: local {}, global {}, J {}",
            local.len(),
            global.len(),
            j.len()
        )));
    }
    let mut s: Option<Var> = None;
    let mut offset = 0;
    for ((&v, lt), gt) in local_vars.iter().zip(local.tensors()).zip(global.tensors()) {
        if lt.shape() != gt.shape() {
            return Err(Error::contract("local and global adapters differ in layout"));
        }
        let n = lt.len();
        let gv = g.input(gt);
        let jv = g.slice_leaf(lt.shape(), &j[offset..offset + n], false)?;
        offset += n;
        let d = g.sub(v, gv)?;
        let d = g.abs(d)?;
        let weighted = g.mul(jv, d)?;
        let part = g.sum(weighted)?;
        s = Some(match s {
            None => part,
            Some(acc) => g.add(acc, part)?,
        });
    }
    let s = match s {
        Some(s) => s,
        None => g.owned(Tensor::scalar(S::zero())),
    };
    let sq = g.mul(s, s)?;
    let penalty = g.add(s, sq)?;
    Ok((penalty, s))
}

/// Value, `s` and gradient (with respect to `local`) of Eq. 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty<S> {
    pub value: S,
    pub s: S,
    pub grad: Vec<S>,
}

pub fn cl_penalty<S: Scalar>(
    local: &AdapterSet<S>,
    global_prev: &AdapterSet<S>,
    j: &JacobianEstimate<S>,
) -> Result<Penalty<S>> {
    let local = trainable(local);
    let mut g = Graph::new();
    let vars: Vec<Var> = local.tensors().map(|t| g.input(t)).collect();
    let (penalty, s) = record_penalty(&mut g, &vars, &local, global_prev, &j.j)?;
    let value = g.scalar_value(penalty)?;
    let s = g.scalar_value(s)?;
    let grads = g.backward(penalty)?;
    Ok(Penalty {
        value,
        s,
        grad: flat_grad(&grads, &vars, &local)?,
    })
}

/// Everything Eq. 4 produces for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective<S> {
    pub value: S,
    pub loss: S,
    pub penalty: S,
    pub s: S,
    pub grad: Vec<S>,
}

/// Eq. 4: `loss + 𝕀(t≠1)·λ·penalty`. At `t == 1` (or `λ == 0`) the penalty
/// is never recorded, so the result is exactly the Eq. 1 loss.
pub fn combined_objective<S: Scalar>(
    model: &BaseModel<S>,
    local: &AdapterSet<S>,
    batch: &[&TokenizedExample],
    global_prev: &AdapterSet<S>,
    j: Option<&JacobianEstimate<S>>,
    t: u32,
    lambda: f64,
) -> Result<Objective<S>> {
    if t == 0 {
        return Err(Error::contract("rounds are numbered from 1"));
    }
    let local = trainable(local);
    let mut g = Graph::new();
    let (loss, vars) = record_local_loss(&mut g, model, &local, batch)?;
    let loss_value = g.scalar_value(loss)?;
    let (total, penalty, s) = if t != 1 && lambda != 0.0 {
        let j = j.ok_or_else(|| Error::contract("round > 1 needs a Jacobian estimate"))?;
        let (p, s) = record_penalty(&mut g, &vars, &local, global_prev, &j.j)?;
        let (pv, sv) = (g.scalar_value(p)?, g.scalar_value(s)?);
        let weighted = g.scale(p, S::lit(lambda))?;
        (g.add(loss, weighted)?, pv, sv)
    } else {
        (loss, S::zero(), S::zero())
    };
    let value = g.scalar_value(total)?;
    let grads = g.backward(total)?;
    Ok(Objective {
        value,
        loss: loss_value,
        penalty,
        s,
        grad: flat_grad(&grads, &vars, &local)?,
    })
}

/// Splits `0..n` into `parts` contiguous windows whose sizes differ by at most one.
fn windows(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let (base, extra) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Result of one round of local training.
#[derive(Debug, Clone)]
pub struct ClientOutcome<S> {
    pub adapters: AdapterSet<S>,
    pub logs: Vec<StepLog>,
    pub mean_loss: f64,
    pub mean_penalty: f64,
}

/// Algorithm 1's `ClientUpdate`: start from `global`, estimate `J` at the
/// global point when `t > 1`, then run `K` epochs of Adam on Eq. 4.
pub fn client_update<S: Scalar>(
    state: &mut ClientState<S>,
    model: &BaseModel<S>,
    global: &AdapterSet<S>,
    t: u32,
    hyper: &TrainHyper,
) -> Result<ClientOutcome<S>> {
    hyper.validate()?;
    if t == 0 {
        return Err(Error::contract("rounds are numbered from 1"));
    }
    let n = state.dataset.len();
    if n == 0 {
        return Err(Error::contract(format!("client {} has an empty dataset", state.client_id)));
    }
    state.adapters = global.clone();
    state.adapters.set_trainable(false);
    state.optimizer = Adam::new(global.len());
    let mut rng = ChaCha8Rng::seed_from_u64(round_seed(state.seed, state.client_id, t));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let jacobian = if t > 1 && hyper.lambda != 0.0 {
        let probe_ids: Vec<usize> = order.iter().copied().take(hyper.probe_batch_size).collect();
        let probe: Vec<&TokenizedExample> = probe_ids.iter().map(|&i| &state.dataset[i]).collect();
        let mut est = estimate_jacobian(model, global, &probe)?;
        if hyper.abs_jacobian {
            est.j.iter_mut().for_each(|x| *x = x.abs());
        }
        est.probe_ids = probe_ids;
        Some(est)
    } else {
        None
    };

    let steps = hyper.steps_per_epoch(n);
    let mut logs = Vec::with_capacity(steps * hyper.epochs);
    let (mut loss_sum, mut pen_sum) = (0.0, 0.0);
    for epoch in 0..hyper.epochs {
        if epoch > 0 {
            order.shuffle(&mut rng);
        }
        for (step, range) in windows(n, steps).into_iter().enumerate() {
            let window = &order[range];
            let micro: Vec<&[usize]> = window.chunks(hyper.batch_size).collect();
            let inv = S::one() / S::lit(micro.len() as f64);
            let mut grad = vec![S::zero(); state.adapters.len()];
            let (mut loss, mut penalty, mut s) = (0.0, 0.0, 0.0);
            for mb in &micro {
                let batch: Vec<&TokenizedExample> = mb.iter().map(|&i| &state.dataset[i]).collect();
                let obj = combined_objective(
                    model,
                    &state.adapters,
                    &batch,
                    global,
                    jacobian.as_ref(),
                    t,
                    hyper.lambda,
                )?;
                for (g, d) in grad.iter_mut().zip(&obj.grad) {
                    *g += *d * inv;
                }
                loss += obj.loss.as_f64();
                penalty += obj.penalty.as_f64();
                s += obj.s.as_f64();
            }
            let k = micro.len() as f64;
            state.optimizer.step(&mut state.adapters, &grad, hyper)?;
            logs.push(StepLog {
                round: t,
                client_id: state.client_id,
                epoch: epoch + 1,
                step: step + 1,
                loss: loss / k,
                cl_penalty: penalty / k,
                s: s / k,
            });
            loss_sum += loss / k;
            pen_sum += penalty / k;
        }
    }
    let count = logs.len() as f64;
    let mut adapters = state.adapters.clone();
    adapters.set_trainable(false);
    adapters.meta.client_id = Some(state.client_id);
    adapters.meta.round = global.meta.round;
    Ok(ClientOutcome {
        adapters,
        logs,
        mean_loss: loss_sum / count,
        mean_penalty: pen_sum / count,
    })
}
