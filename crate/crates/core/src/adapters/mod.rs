//! Low-rank adapter parameters: the only state that leaves a client.

pub mod fjla;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use self::fjla::RawTensor;
use crate::error::{DecodeError, Error, Result};
use crate::model::{parse_site, site_name, BaseModel, Injection, LoraVars, ModelConfig, INJECTION_SITES};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Standard deviation of the Gaussian used for `A` at initialization.
pub const A_INIT_STD: f64 = 0.02;

const META_NAME: &str = "__meta__";
const BASE_PREFIX: &str = "base.";
const BASE_CONFIG_NAME: &str = "base.__config__";

/// One low-rank update `scale · B · A` of shape `d_out x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair<S> {
    /// `[r x d_in]`
    pub a: Tensor<S>,
    /// `[d_out x r]`
    pub b: Tensor<S>,
    pub scale: S,
}

impl<S: Scalar> AdapterPair<S> {
    pub fn new(a: Tensor<S>, b: Tensor<S>, scale: S) -> Result<Self> {
        let (r, _) = a.dims2()?;
        let (_, rb) = b.dims2()?;
        if r == 0 || r != rb {
            return Err(Error::dim("adapter_pair", format!("A has rank {r}, B has rank {rb}")));
        }
        if !(scale > S::zero()) {
            return Err(Error::Config("adapter scale must be positive".into()));
        }
        Ok(AdapterPair { a, b, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    /// The dense update `scale · B · A`.
    pub fn contribution(&self) -> Result<Tensor<S>> {
        Ok(self.b.matmul(&self.a)?.scale(self.scale))
    }

    pub fn len(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Provenance of an adapter set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdapterMeta {
    pub rank: usize,
    pub model_hash: u64,
    pub client_id: Option<u32>,
    pub round: u32,
    pub run: Option<RunTag>,
}

/// Identifies the experiment that produced a checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunTag {
    pub config_hash: u64,
    pub seed: u64,
    pub mode: u8,
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v >> 32) as f64, (v & 0xffff_ffff) as f64]
}

fn join_u64(hi: f64, lo: f64) -> Option<u64> {
    let ok = |x: f64| x >= 0.0 && x <= u32::MAX as f64 && x.fract() == 0.0;
    (ok(hi) && ok(lo)).then(|| ((hi as u64) << 32) | lo as u64)
}

impl AdapterMeta {
    const LEN: usize = 12;

    fn encode(&self, scale: f64) -> Tensor<f64> {
        let client = self.client_id.map_or(-1.0, f64::from);
        let run = self.run.unwrap_or_default();
        let [mh, ml] = split_u64(self.model_hash);
        let [rh, rl] = split_u64(run.config_hash);
        let [sh, sl] = split_u64(run.seed);
        let data = vec![
            self.rank as f64,
            scale,
            client,
            f64::from(self.round),
            mh,
            ml,
            if self.run.is_some() { 1.0 } else { 0.0 },
            rh,
            rl,
            sh,
            sl,
            f64::from(run.mode),
        ];
        Tensor::new([Self::LEN], data).expect("metadata is finite")
    }

    fn decode(t: &Tensor<f64>) -> Result<(Self, f64), DecodeError> {
        let bad = || DecodeError::Malformed("invalid adapter metadata".into());
        let d = t.data();
        if t.shape() != [Self::LEN] {
            return Err(bad());
        }
        let small = |x: f64| (x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64).then_some(x);
        let client_id = match d[2] {
            c if c == -1.0 => None,
            c => Some(small(c).ok_or_else(bad)? as u32),
        };
        let run = match d[6] {
            x if x == 0.0 => None,
            x if x == 1.0 => Some(RunTag {
                config_hash: join_u64(d[7], d[8]).ok_or_else(bad)?,
                seed: join_u64(d[9], d[10]).ok_or_else(bad)?,
                mode: small(d[11]).filter(|&m| m <= 255.0).ok_or_else(bad)? as u8,
            }),
            _ => return Err(bad()),
        };
        let meta = AdapterMeta {
            rank: small(d[0]).ok_or_else(bad)? as usize,
            model_hash: join_u64(d[4], d[5]).ok_or_else(bad)?,
            client_id,
            round: small(d[3]).ok_or_else(bad)? as u32,
            run,
        };
        Ok((meta, d[1]))
    }
}

/// Adapter pairs keyed by injection-site name, iterated in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<S> {
    pairs: BTreeMap<String, AdapterPair<S>>,
    pub meta: AdapterMeta,
}

impl<S: Scalar> Default for AdapterSet<S> {
    fn default() -> Self {
        AdapterSet {
            pairs: BTreeMap::new(),
            meta: AdapterMeta::default(),
        }
    }
}

/// Fresh adapters on every injection site: `A ~ N(0, 0.02²)` drawn from
/// `seed`, `B = 0`, so the initial contribution is exactly zero.
pub fn init_adapters<S: Scalar>(config: &ModelConfig, rank: usize, seed: u64) -> Result<AdapterSet<S>> {
    config.validate()?;
    let d = config.d_model;
    if rank == 0 || rank >= d {
        return Err(Error::Config(format!(
            "adapter rank {rank} must be in 1..{d} (below min(d_in, d_out))"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, A_INIT_STD).expect("positive std");
    let mut set = AdapterSet {
        pairs: BTreeMap::new(),
        meta: AdapterMeta {
            rank,
            model_hash: config.hash64(),
            ..AdapterMeta::default()
        },
    };
    for layer in 0..config.n_layers {
        for proj in INJECTION_SITES {
            let a = Tensor::from_fn([rank, d], |_| S::lit(normal.sample(&mut rng)));
            let b = Tensor::zeros([d, rank]);
            set.insert(site_name(layer, proj), AdapterPair::new(a, b, S::one())?)?;
        }
    }
    Ok(set)
}

impl<S: Scalar> AdapterSet<S> {
    pub fn new(meta: AdapterMeta) -> Self {
        AdapterSet {
            pairs: BTreeMap::new(),
            meta,
        }
    }

    /// Adds a pair; every pair in a set shares one rank.
    pub fn insert(&mut self, site: impl Into<String>, pair: AdapterPair<S>) -> Result<()> {
        if let Some(first) = self.pairs.values().next() {
            if first.rank() != pair.rank() {
                return Err(Error::contract(format!(
                    "rank {} differs from the set's rank {}",
                    pair.rank(),
                    first.rank()
                )));
            }
        }
        self.meta.rank = pair.rank();
        self.pairs.insert(site.into(), pair);
        Ok(())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &AdapterPair<S>)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn pairs_mut(&mut self) -> impl Iterator<Item = (&str, &mut AdapterPair<S>)> {
        self.pairs.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, site: &str) -> Option<&AdapterPair<S>> {
        self.pairs.get(site)
    }

    pub fn num_sites(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of trainable scalars.
    pub fn len(&self) -> usize {
        self.pairs.values().map(AdapterPair::len).sum()
    }

    /// Parameter tensors in flatten order: per site, `A` then `B`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.pairs.values().flat_map(|p| [&p.a, &p.b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.pairs.values_mut().flat_map(|p| [&mut p.a, &mut p.b])
    }

    /// Marks every parameter tensor as (not) requiring gradients.
    pub fn set_trainable(&mut self, flag: bool) {
        self.tensors_mut().for_each(|t| t.set_requires_grad(flag));
    }

    /// Site-sorted concatenation of every `A` then `B`, row-major.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.len());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// A copy of this set with values taken from `flat` (inverse of [`flatten`](Self::flatten)).
    pub fn unflatten(&self, flat: &[S]) -> Result<Self> {
        let mut out = self.clone();
        out.assign_flat(flat)?;
        Ok(out)
    }

    /// Overwrites every parameter from a flat vector in flatten order.
    pub fn assign_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::contract(format!(
                "flat vector has {} values, adapter set {}",
                flat.len(),
                self.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("assign_flat"));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Records every pair on `g` (borrowing the data) and maps it onto the
    /// model's projections.
    pub fn inject<'a>(&'a self, g: &mut Graph<'a, S>, model: &BaseModel<S>) -> Result<Injection<S>> {
        Ok(self.inject_vars(g, model)?.0)
    }

    /// [`inject`](Self::inject) plus the recorded parameter vars in flatten order.
    pub fn inject_vars<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        model: &BaseModel<S>,
    ) -> Result<(Injection<S>, Vec<Var>)> {
        let mut inj = Injection::new(model.config.n_layers);
        let mut vars = Vec::with_capacity(2 * self.pairs.len());
        for (site, pair) in &self.pairs {
            let (layer, proj) = parse_site(site).ok_or_else(|| Error::Key(site.clone()))?;
            let (d_out, d_in) = model
                .site_dims(layer, proj)
                .ok_or_else(|| Error::Key(site.clone()))?;
            if pair.d_in() != d_in || pair.d_out() != d_out {
                return Err(Error::dim(
                    "inject",
                    format!(
                        "{site}: adapter is {}x{}, projection is {d_out}x{d_in}",
                        pair.d_out(),
                        pair.d_in()
                    ),
                ));
            }
            let lora = LoraVars {
                a: g.input(&pair.a),
                b: g.input(&pair.b),
                scale: pair.scale,
            };
            vars.extend([lora.a, lora.b]);
            inj.insert(layer, proj, lora)?;
        }
        Ok((inj, vars))
    }

    fn common_scale(&self) -> Result<S> {
        let mut scales = self.pairs.values().map(|p| p.scale);
        let first = scales.next().unwrap_or_else(S::one);
        if scales.any(|s| s != first) {
            return Err(Error::contract("all adapter pairs in a set must share one scale"));
        }
        Ok(first)
    }

    /// Serializes to an `.fjla` container.
    ///
    /// Metadata travels as an f64 tensor named `__meta__`; it is omitted for
    /// an empty set with default metadata, which encodes to zero tensors.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let scale = self.common_scale()?;
        let mut raw = Vec::with_capacity(2 * self.pairs.len() + 1);
        if !(self.pairs.is_empty() && self.meta == AdapterMeta::default()) {
            raw.push(RawTensor::from_tensor(META_NAME, &self.meta.encode(scale.as_f64())));
        }
        for (site, pair) in &self.pairs {
            raw.push(RawTensor::from_tensor(format!("{site}.A"), &pair.a));
            raw.push(RawTensor::from_tensor(format!("{site}.B"), &pair.b));
        }
        fjla::encode(&raw)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = fjla::decode(bytes)?;
        let malformed = |m: String| Error::from(DecodeError::Malformed(m));
        let mut meta = AdapterMeta::default();
        let mut scale = S::one();
        let mut halves: BTreeMap<String, (Option<Tensor<S>>, Option<Tensor<S>>)> = BTreeMap::new();
        for t in &raw {
            if t.name == META_NAME {
                let (m, s) = AdapterMeta::decode(&t.to_tensor::<f64>()?)?;
                meta = m;
                scale = S::lit(s);
                continue;
            }
            let (site, part) = t
                .name
                .rsplit_once('.')
                .ok_or_else(|| malformed(format!("unexpected tensor `{}`", t.name)))?;
            let slot = halves.entry(site.to_string()).or_default();
            let target = match part {
                "A" => &mut slot.0,
                "B" => &mut slot.1,
                _ => return Err(malformed(format!("unexpected tensor `{}`", t.name))),
            };
            if target.replace(t.to_tensor()?).is_some() {
                return Err(malformed(format!("duplicate tensor `{}`", t.name)));
            }
        }
        let mut set = AdapterSet::new(meta);
        for (site, (a, b)) in halves {
            let (Some(a), Some(b)) = (a, b) else {
                return Err(malformed(format!("site `{site}` lacks A or B")));
            };
            set.insert(site, AdapterPair::new(a, b, scale)?)?;
        }
        set.meta = meta;
        if !set.is_empty() && set.pairs.values().any(|p| p.rank() != meta.rank) {
            return Err(malformed("metadata rank disagrees with tensors".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Folds the adapters into the base weights: each site becomes `W + scale·B·A`.
pub fn merge<S: Scalar>(base: &BaseModel<S>, adapters: &AdapterSet<S>) -> Result<BaseModel<S>> {
    let mut merged = base.clone();
    for (site, pair) in adapters.pairs() {
        let (layer, proj) = parse_site(site).ok_or_else(|| Error::Key(site.to_string()))?;
        let block = merged
            .blocks
            .get_mut(layer)
            .ok_or_else(|| Error::Key(site.to_string()))?;
        let w = block.proj_mut(proj);
        let updated = w.add(&pair.contribution()?)?;
        *w = updated;
    }
    Ok(merged)
}

fn base_config_tensor(c: &ModelConfig) -> Tensor<f64> {
    let [sh, sl] = split_u64(c.seed);
    let data = vec![
        c.vocab_size as f64,
        c.d_model as f64,
        c.n_layers as f64,
        c.n_heads as f64,
        c.d_ff as f64,
        c.max_context as f64,
        sh,
        sl,
    ];
    Tensor::new([8], data).expect("config is finite")
}

/// Serializes the frozen base model into the same container, names prefixed `base.`.
pub fn base_to_bytes<S: Scalar>(model: &BaseModel<S>) -> Result<Vec<u8>> {
    let mut raw = vec![RawTensor::from_tensor(BASE_CONFIG_NAME, &base_config_tensor(&model.config))];
    for (name, t) in model.named_tensors() {
        raw.push(RawTensor::from_tensor(format!("{BASE_PREFIX}{name}"), t));
    }
    fjla::encode(&raw)
}

pub fn base_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<BaseModel<S>> {
    let raw = fjla::decode(bytes)?;
    let malformed = |m: &str| Error::from(DecodeError::Malformed(m.to_string()));
    let cfg_t = raw
        .iter()
        .find(|t| t.name == BASE_CONFIG_NAME)
        .ok_or_else(|| malformed("missing base config"))?
        .to_tensor::<f64>()?;
    let c = cfg_t.data();
    if c.len() != 8 {
        return Err(malformed("base config has wrong length"));
    }
    let config = ModelConfig {
        vocab_size: c[0] as usize,
        d_model: c[1] as usize,
        n_layers: c[2] as usize,
        n_heads: c[3] as usize,
        d_ff: c[4] as usize,
        max_context: c[5] as usize,
        seed: join_u64(c[6], c[7]).ok_or_else(|| malformed("bad seed"))?,
    };
    let mut model = BaseModel::<S>::init(&config)?;
    let mut by_name: BTreeMap<&str, &RawTensor> = raw.iter().map(|t| (t.name.as_str(), t)).collect();
    for (name, slot) in model.named_tensors_mut() {
        let key = format!("{BASE_PREFIX}{name}");
        let t = by_name
            .remove(key.as_str())
            .ok_or_else(|| malformed(&format!("missing `{key}`")))?
            .to_tensor::<S>()?;
        if t.shape() != slot.shape() {
            return Err(malformed(&format!("`{key}` has the wrong shape")));
        }
        *slot = t;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, Projection};
    use rand::Rng;

    fn pair(a: &[f64], b: &[f64], r: usize) -> AdapterPair<f64> {
        let d_in = a.len() / r;
        let d_out = b.len() / r;
        AdapterPair::new(
            Tensor::new([r, d_in], a.to_vec()).unwrap(),
            Tensor::new([d_out, r], b.to_vec()).unwrap(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn default_trainable_count() {
        let set = init_adapters::<f64>(&ModelConfig::default(), 4, 0).unwrap();
        // n_layers · 2 sites · (4·64 + 64·4)
        assert_eq!(set.len(), 2 * 2 * (4 * 64 + 64 * 4));
        assert_eq!(set.len(), 2048);
        assert_eq!(set.num_sites(), 4);
        assert!(set.pairs().all(|(_, p)| p.b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let cfg = ModelConfig::default();
        let a = init_adapters::<f64>(&cfg, 4, 9).unwrap();
        let b = init_adapters::<f64>(&cfg, 4, 9).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert!(matches!(init_adapters::<f64>(&cfg, 64, 0), Err(Error::Config(_))));
        assert!(matches!(init_adapters::<f64>(&cfg, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_std_is_close_to_target() {
        let set = init_adapters::<f64>(&ModelConfig::default(), 4, 3).unwrap();
        let a: Vec<f64> = set.pairs().flat_map(|(_, p)| p.a.data().to_vec()).collect();
        let var = a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.002, "std {}", var.sqrt());
    }

    #[test]
    fn flatten_order_and_norm() {
        let mut set = AdapterSet::default();
        set.insert("s", pair(&[3.0], &[5.0], 1)).unwrap();
        assert_eq!(set.flatten(), vec![3.0, 5.0]);

        let set = init_adapters::<f64>(&ModelConfig::default(), 4, 1).unwrap();
        let flat = set.flatten();
        let norm = flat.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rss = set
            .tensors()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert_eq!(norm, rss);
        assert_eq!(set.unflatten(&flat).unwrap(), set);
        assert!(set.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn single_scalar_mutation_changes_one_coordinate() {
        let set = init_adapters::<f64>(&ModelConfig::default(), 4, 1).unwrap();
        let mut flat = set.flatten();
        flat[777] += 0.5;
        let other = set.unflatten(&flat).unwrap();
        let diff = set
            .flatten()
            .iter()
            .zip(other.flatten())
            .filter(|(a, b)| **a != *b)
            .count();
        assert_eq!(diff, 1);
    }

    #[test]
    fn contribution_by_hand() {
        // A = [[1, 0]], B = [[2], [0]] → B·A = [[2, 0], [0, 0]]
        let p = pair(&[1.0, 0.0], &[2.0, 0.0], 1);
        assert_eq!(p.contribution().unwrap().data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn merge_two_by_two_site() {
        let cfg = ModelConfig {
            vocab_size: 5,
            d_model: 2,
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            max_context: 4,
            seed: 0,
        };
        let base = BaseModel::<f64>::init(&cfg).unwrap();
        let mut set = AdapterSet::default();
        set.insert(site_name(0, Projection::Q), pair(&[1.0, 0.0], &[2.0, 0.0], 1))
            .unwrap();
        let merged = merge(&base, &set).unwrap();
        let before = base.blocks[0].proj(Projection::Q).data();
        let after = merged.blocks[0].proj(Projection::Q).data();
        let delta: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
        assert_eq!(delta, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn merge_with_zero_b_is_bit_identical() {
        let cfg = ModelConfig::default();
        let base = BaseModel::<f64>::init(&cfg).unwrap();
        let set = init_adapters::<f64>(&cfg, 4, 2).unwrap();
        assert_eq!(merge(&base, &set).unwrap(), base);
    }

    #[test]
    fn merge_rejects_unknown_site() {
        let base = BaseModel::<f64>::init(&ModelConfig::default()).unwrap();
        let mut set = AdapterSet::default();
        set.insert("layers.9.attn.q", pair(&[0.0; 64], &[0.0; 64], 1)).unwrap();
        assert!(matches!(merge(&base, &set), Err(Error::Key(_))));
        let mut set = AdapterSet::default();
        set.insert("embedding", pair(&[0.0; 64], &[0.0; 64], 1)).unwrap();
        assert!(matches!(merge(&base, &set), Err(Error::Key(_))));
    }

    #[test]
    fn zero_adapters_leave_logits_unchanged() {
        let cfg = ModelConfig::default();
        let base = BaseModel::<f64>::init(&cfg).unwrap();
        let set = init_adapters::<f64>(&cfg, 4, 7).unwrap();
        let tokens = [257, 72, 101, 108, 108, 111];
        let plain = base.logits(&tokens).unwrap();
        let with = forward_logits(&base, &set, &tokens).unwrap();
        assert!(plain.max_abs_diff(&with).unwrap() < 1e-12);
    }

    #[test]
    fn merged_forward_matches_adapter_forward() {
        let cfg = ModelConfig::default();
        let base = BaseModel::<f64>::init(&cfg).unwrap();
        let mut set = init_adapters::<f64>(&cfg, 4, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flat: Vec<f64> = set.flatten().iter().map(|_| rng.random_range(-0.1..0.1)).collect();
        set.assign_flat(&flat).unwrap();
        let merged = merge(&base, &set).unwrap();
        let tokens: Vec<usize> = (0..40).map(|_| rng.random_range(0..259)).collect();
        let a = merged.logits(&tokens).unwrap();
        let b = forward_logits(&base, &set, &tokens).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn bytes_roundtrip_with_metadata() {
        let mut set = init_adapters::<f64>(&ModelConfig::default(), 4, 5).unwrap();
        set.meta.client_id = Some(2);
        set.meta.round = 3;
        set.meta.run = Some(RunTag {
            config_hash: u64::MAX - 7,
            seed: 42,
            mode: 4,
        });
        let bytes = set.to_bytes().unwrap();
        let back = AdapterSet::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn empty_set_has_zero_tensors() {
        let bytes = AdapterSet::<f64>::default().to_bytes().unwrap();
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        assert_eq!(AdapterSet::<f64>::from_bytes(&bytes).unwrap(), AdapterSet::default());
    }

    #[test]
    fn f32_sets_roundtrip() {
        let set = init_adapters::<f32>(&ModelConfig::default(), 4, 5).unwrap();
        let bytes = set.to_bytes().unwrap();
        assert_eq!(AdapterSet::<f32>::from_bytes(&bytes).unwrap(), set);
        let wide = AdapterSet::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(wide.flatten().len(), 2048);
    }

    #[test]
    fn base_checkpoint_roundtrip() {
        let cfg = ModelConfig {
            seed: 77,
            ..ModelConfig::default()
        };
        let base = BaseModel::<f64>::init(&cfg).unwrap();
        let bytes = base_to_bytes(&base).unwrap();
        assert_eq!(base_from_bytes::<f64>(&bytes).unwrap(), base);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.fjla");
        let set = init_adapters::<f64>(&ModelConfig::default(), 4, 5).unwrap();
        set.save(&path).unwrap();
        assert_eq!(AdapterSet::<f64>::load(&path).unwrap(), set);
        assert!(AdapterSet::<f64>::load(dir.path().join("missing.fjla"))
            .unwrap_err()
            .is_io());
    }
}
