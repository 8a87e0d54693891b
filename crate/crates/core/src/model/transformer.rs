use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Init standard deviations of the frozen weights.
pub const TOKEN_EMBED_STD: f64 = 0.125;
pub const POS_EMBED_STD: f64 = 0.05;
pub const PROJ_STD: f64 = 0.125;
pub const LN_EPS: f64 = 1e-5;

/// Attention projection matrices that can host an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn tag(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Projections that receive adapters during federated training.
pub const INJECTION_SITES: [Projection; 2] = [Projection::Q, Projection::V];

pub fn site_name(layer: usize, proj: Projection) -> String {
    format!("layers.{layer}.attn.{}", proj.tag())
}

/// Inverse of [`site_name`].
pub fn parse_site(name: &str) -> Option<(usize, Projection)> {
    let rest = name.strip_prefix("layers.")?;
    let (layer, proj) = rest.split_once(".attn.")?;
    let proj = Projection::ALL.into_iter().find(|p| p.tag() == proj)?;
    Some((layer.parse().ok()?, proj))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    /// `[d_out x d_in]` projections, indexed by [`Projection`].
    pub attn: [Tensor<S>; 4],
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    /// `[d_ff x d_model]`
    pub ff_up: Tensor<S>,
    /// `[d_model x d_ff]`
    pub ff_down: Tensor<S>,
}

impl<S: Scalar> Block<S> {
    pub fn proj(&self, p: Projection) -> &Tensor<S> {
        &self.attn[p.slot()]
    }

    pub fn proj_mut(&mut self, p: Projection) -> &mut Tensor<S> {
        &mut self.attn[p.slot()]
    }
}

/// Frozen decoder-only transformer with tied input/output embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel<S> {
    pub config: ModelConfig,
    pub tok_embed: Tensor<S>,
    pub pos_embed: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    pub lnf_gain: Tensor<S>,
    pub lnf_bias: Tensor<S>,
}

/// Low-rank update bound to graph variables: `scale · B · A` added to a projection.
#[derive(Debug, Clone, Copy)]
pub struct LoraVars<S> {
    pub a: Var,
    pub b: Var,
    pub scale: S,
}

/// Adapter variables per layer and projection, ready for a forward pass.
#[derive(Debug, Clone)]
pub struct Injection<S> {
    layers: Vec<[Option<LoraVars<S>>; 4]>,
}

impl<S: Scalar> Injection<S> {
    pub fn new(n_layers: usize) -> Self {
        Injection {
            layers: vec![[None; 4]; n_layers],
        }
    }

    pub fn insert(&mut self, layer: usize, proj: Projection, vars: LoraVars<S>) -> Result<()> {
        let slots = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Key(site_name(layer, proj)))?;
        slots[proj.slot()] = Some(vars);
        Ok(())
    }

    fn get(&self, layer: usize, proj: Projection) -> Option<LoraVars<S>> {
        self.layers.get(layer).and_then(|s| s[proj.slot()])
    }
}

struct BlockVars {
    ln1: (Var, Var),
    attn: [Var; 4],
    ln2: (Var, Var),
    up: Var,
    down: Var,
}

/// Base weights recorded on a graph once, reusable across several forward passes.
pub struct BoundModel {
    tok: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    lnf: (Var, Var),
}

impl<S: Scalar> BaseModel<S> {
    /// Deterministic random initialization from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |shape: &[usize], std: f64| -> Tensor<S> {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape.to_vec(), |_| S::lit(dist.sample(&mut rng)))
        };
        let d = config.d_model;
        let out_std = PROJ_STD / ((2 * config.n_layers) as f64).sqrt();
        let tok_embed = normal(&[config.vocab_size, d], TOKEN_EMBED_STD);
        let pos_embed = normal(&[config.max_context, d], POS_EMBED_STD);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn = [
                normal(&[d, d], PROJ_STD),
                normal(&[d, d], PROJ_STD),
                normal(&[d, d], PROJ_STD),
                normal(&[d, d], out_std),
            ];
            let ff_up = normal(&[config.d_ff, d], PROJ_STD);
            let ff_down = normal(&[d, config.d_ff], out_std * (d as f64 / config.d_ff as f64).sqrt());
            blocks.push(Block {
                ln1_gain: Tensor::from_fn([d], |_| S::one()),
                ln1_bias: Tensor::zeros([d]),
                attn,
                ln2_gain: Tensor::from_fn([d], |_| S::one()),
                ln2_bias: Tensor::zeros([d]),
                ff_up,
                ff_down,
            });
        }
        Ok(BaseModel {
            config: config.clone(),
            tok_embed,
            pos_embed,
            blocks,
            lnf_gain: Tensor::from_fn([d], |_| S::one()),
            lnf_bias: Tensor::zeros([d]),
        })
    }

    /// Every frozen tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("tok_embed".to_string(), &self.tok_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{l}.ln1.gain"), &b.ln1_gain));
            out.push((format!("layers.{l}.ln1.bias"), &b.ln1_bias));
            for p in Projection::ALL {
                out.push((site_name(l, p), b.proj(p)));
            }
            out.push((format!("layers.{l}.ln2.gain"), &b.ln2_gain));
            out.push((format!("layers.{l}.ln2.bias"), &b.ln2_bias));
            out.push((format!("layers.{l}.ff.up"), &b.ff_up));
            out.push((format!("layers.{l}.ff.down"), &b.ff_down));
        }
        out.push(("lnf.gain".to_string(), &self.lnf_gain));
        out.push(("lnf.bias".to_string(), &self.lnf_bias));
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = vec![
            ("tok_embed".to_string(), &mut self.tok_embed),
            ("pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layers.{l}.ln1.gain"), &mut b.ln1_gain));
            out.push((format!("layers.{l}.ln1.bias"), &mut b.ln1_bias));
            let [q, k, v, o] = &mut b.attn;
            for (p, t) in Projection::ALL.into_iter().zip([q, k, v, o]) {
                out.push((site_name(l, p), t));
            }
            out.push((format!("layers.{l}.ln2.gain"), &mut b.ln2_gain));
            out.push((format!("layers.{l}.ln2.bias"), &mut b.ln2_bias));
            out.push((format!("layers.{l}.ff.up"), &mut b.ff_up));
            out.push((format!("layers.{l}.ff.down"), &mut b.ff_down));
        }
        out.push(("lnf.gain".to_string(), &mut self.lnf_gain));
        out.push(("lnf.bias".to_string(), &mut self.lnf_bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `(d_out, d_in)` of an attention projection.
    pub fn site_dims(&self, layer: usize, proj: Projection) -> Option<(usize, usize)> {
        let t = self.blocks.get(layer)?.proj(proj);
        t.dims2().ok()
    }

    /// Records every base tensor as a frozen, borrowed leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, S>) -> BoundModel {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1: (g.input(&b.ln1_gain), g.input(&b.ln1_bias)),
                attn: [
                    g.input(&b.attn[0]),
                    g.input(&b.attn[1]),
                    g.input(&b.attn[2]),
                    g.input(&b.attn[3]),
                ],
                ln2: (g.input(&b.ln2_gain), g.input(&b.ln2_bias)),
                up: g.input(&b.ff_up),
                down: g.input(&b.ff_down),
            })
            .collect();
        BoundModel {
            tok: g.input(&self.tok_embed),
            pos: g.input(&self.pos_embed),
            blocks,
            lnf: (g.input(&self.lnf_gain), g.input(&self.lnf_bias)),
        }
    }

    /// Records the forward pass; returns `[len x vocab]` logits where row `m`
    /// scores the token following position `m`.
    pub fn forward(
        &self,
        g: &mut Graph<'_, S>,
        bound: &BoundModel,
        injection: Option<&Injection<S>>,
        tokens: &[usize],
    ) -> Result<Var> {
        self.forward_tail(g, bound, injection, tokens, 0)
    }

    /// Like [`forward`](Self::forward) but only rows `first_row..len` go
    /// through the output head.
    pub fn forward_tail(
        &self,
        g: &mut Graph<'_, S>,
        bound: &BoundModel,
        injection: Option<&Injection<S>>,
        tokens: &[usize],
        first_row: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::contract("forward on an empty sequence"));
        }
        if n > cfg.max_context {
            return Err(Error::contract(format!(
                "sequence of {n} tokens exceeds max_context {}",
                cfg.max_context
            )));
        }
        let eps = S::lit(LN_EPS);
        let positions: Vec<usize> = (0..n).collect();
        let tok = g.embedding(bound.tok, tokens)?;
        let pos = g.embedding(bound.pos, &positions)?;
        let mut h = g.add(tok, pos)?;
        let hd = cfg.head_dim();
        let att_scale = S::lit(1.0 / (hd as f64).sqrt());
        for (l, bv) in bound.blocks.iter().enumerate() {
            let x = g.layer_norm(h, bv.ln1.0, bv.ln1.1, eps)?;
            let proj = |g: &mut Graph<'_, S>, p: Projection, input: Var| -> Result<Var> {
                let base = g.matmul_nt(input, bv.attn[p.slot()])?;
                match injection.and_then(|inj| inj.get(l, p)) {
                    None => Ok(base),
                    Some(lora) => {
                        let down = g.matmul_nt(input, lora.a)?;
                        let mut up = g.matmul_nt(down, lora.b)?;
                        if lora.scale != S::one() {
                            up = g.scale(up, lora.scale)?;
                        }
                        g.add(base, up)
                    }
                }
            };
            let q = proj(g, Projection::Q, x)?;
            let k = proj(g, Projection::K, x)?;
            let v = proj(g, Projection::V, x)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let (lo, hi) = (head * hd, (head + 1) * hd);
                let (qh, kh, vh) = if cfg.n_heads == 1 {
                    (q, k, v)
                } else {
                    (g.slice(q, 1, lo, hi)?, g.slice(k, 1, lo, hi)?, g.slice(v, 1, lo, hi)?)
                };
                let scores = g.matmul_nt(qh, kh)?;
                let weights = g.causal_softmax(scores, att_scale)?;
                heads.push(g.matmul(weights, vh)?);
            }
            let merged = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat(&heads, 1)?
            };
            let attn_out = proj(g, Projection::O, merged)?;
            h = g.add(h, attn_out)?;
            let x2 = g.layer_norm(h, bv.ln2.0, bv.ln2.1, eps)?;
            let up = g.matmul_nt(x2, bv.up)?;
            let act = g.gelu(up)?;
            let down = g.matmul_nt(act, bv.down)?;
            h = g.add(h, down)?;
        }
        if first_row > 0 {
            h = g.slice(h, 0, first_row, n)?;
        }
        let hf = g.layer_norm(h, bound.lnf.0, bound.lnf.1, eps)?;
        g.matmul_nt(hf, bound.tok)
    }

    /// Logits of the adapter-free model.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward(&mut g, &bound, None, tokens)?;
        Ok(g.to_tensor(out))
    }
}
