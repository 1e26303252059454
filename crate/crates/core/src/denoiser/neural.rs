//! Conditional transformer noise predictor.
//!
//! Tokens: one per joint 6D block, one per shape coefficient (in a separate
//! branch), one each for the object rotation and translation. Each layer
//! runs self-attention, then two parallel cross-attentions (observation
//! tokens `c_I` and geometry tokens `c_G`) whose outputs are concatenated
//! and fused by a linear head, then a feed-forward block. Timestep
//! information enters as a per-token scale and shift of the input tokens.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::weights::WeightBundle;
use super::{check_dim, Conditions, Denoiser};
use crate::autodiff::{Tape, Tensor, Var};
use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::object::COARSE_POINTS;
use crate::model::params::{ParamLayout, BETA_DIM};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuralConfig {
    pub joints: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub geo_tokens: usize,
    pub time_dim: usize,
    pub ffn_mult: usize,
    /// When false, learned null tokens replace both condition streams.
    pub conditional: bool,
    pub seed: u64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            joints: crate::model::body::JOINT_COUNT,
            width: 64,
            heads: 4,
            layers: 3,
            geo_tokens: 4,
            time_dim: 64,
            ffn_mult: 2,
            conditional: true,
            seed: 0,
        }
    }
}

impl NeuralConfig {
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.joints)
    }

    pub fn observation_dim(&self) -> usize {
        3 * self.joints + 4
    }

    fn obs_items(&self) -> usize {
        self.joints + 1
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid("neural config", "width must be a positive multiple of heads"));
        }
        if self.layers == 0 || self.joints == 0 || self.geo_tokens == 0 || self.time_dim < 2 || self.ffn_mult == 0 {
            return Err(Error::invalid("neural config", format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, with their initialization.
    fn parameter_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let w = self.width;
        let k = self.joints;
        let mut specs = Vec::new();
        let mut linear = |name: &str, fan_in: usize, fan_out: usize, init: Init| {
            specs.push((format!("{name}.w"), vec![fan_in, fan_out], init));
            specs.push((format!("{name}.b"), vec![fan_out], Init::Zero));
        };
        linear("embed.joint", 6 + k, w, Init::Normal);
        linear("embed.beta", 1 + BETA_DIM, w, Init::Normal);
        linear("embed.rot", 6, w, Init::Normal);
        linear("embed.trans", 3, w, Init::Normal);
        linear("time.l1", self.time_dim, w, Init::Normal);
        linear("time.l2", w, 2 * w, Init::Zero);
        linear("obs.l1", 4 + self.obs_items(), w, Init::Normal);
        linear("obs.l2", w, w, Init::Normal);
        linear("geo.l1", 3, w, Init::Normal);
        linear("geo.l2", w, w, Init::Normal);
        linear("geo.proj", w, self.geo_tokens * w, Init::Normal);
        for branch in ["main", "beta"] {
            for l in 0..self.layers {
                let p = format!("{branch}.{l}");
                for attn in ["self", "obs", "geo"] {
                    for m in ["q", "k", "v", "o"] {
                        specs_push(&mut linear, &format!("{p}.{attn}.{m}"), w, w);
                    }
                }
                linear(&format!("{p}.fuse"), 2 * w, w, Init::Normal);
                linear(&format!("{p}.ffn1"), w, self.ffn_mult * w, Init::Normal);
                linear(&format!("{p}.ffn2"), self.ffn_mult * w, w, Init::Normal);
            }
        }
        linear("head.joint", w, 6, Init::Zero);
        linear("head.beta", w, 1, Init::Zero);
        linear("head.rot", w, 6, Init::Zero);
        linear("head.trans", w, 3, Init::Zero);
        if !self.conditional {
            specs.push(("null.obs".into(), vec![self.obs_items(), w], Init::Normal));
            specs.push(("null.geo".into(), vec![self.geo_tokens, w], Init::Normal));
        }
        specs
    }
}

fn specs_push(linear: &mut impl FnMut(&str, usize, usize, Init), name: &str, a: usize, b: usize) {
    linear(name, a, b, Init::Normal)
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    Normal,
}

/// Precomputed condition tokens for one scene.
#[derive(Clone, Debug)]
pub struct NeuralContext {
    obs: Arc<Tensor>,
    geo: Arc<Tensor>,
}

#[derive(Clone, Debug)]
pub struct NeuralDenoiser {
    config: NeuralConfig,
    params: BTreeMap<String, Arc<Tensor>>,
    schedule: NoiseSchedule,
}

/// One training example: a clean parameter vector and its conditions.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub x0: Vec<f64>,
    pub cond: Conditions,
}

pub type TrainBatch = [TrainExample];

struct Params<'p, 't> {
    vars: BTreeMap<&'p str, Var<'t>>,
}

impl<'t> Params<'_, 't> {
    fn get(&self, name: &str) -> Var<'t> {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn linear(&self, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        x.matmul(self.get(&format!("{name}.w")))?
            .add(self.get(&format!("{name}.b")))
    }
}

impl NeuralDenoiser {
    pub fn new(config: NeuralConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .parameter_specs()
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zero => vec![0.0; n],
                    Init::Normal => {
                        let std = (1.0 / shape[0] as f64).sqrt();
                        (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); std * z }).collect()
                    }
                };
                (name, Arc::new(Tensor::from_parts(shape, data)))
            })
            .collect();
        Ok(Self {
            config,
            params,
            schedule,
        })
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn to_bundle(&self) -> WeightBundle {
        WeightBundle {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            tensors: self.params.iter().map(|(k, v)| (k.clone(), (**v).clone())).collect(),
        }
    }

    /// Builds a denoiser from loaded tensors, checking every expected name
    /// and shape.
    pub fn from_bundle(bundle: WeightBundle) -> Result<Self> {
        bundle.config.validate()?;
        let mut tensors = bundle.tensors;
        let mut params = BTreeMap::new();
        for (name, shape, _) in bundle.config.parameter_specs() {
            let t = tensors.remove(&name).ok_or_else(|| Error::ArchitectureMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: Vec::new(),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ArchitectureMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            params.insert(name, Arc::new(t));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::WeightsFormat(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            config: bundle.config,
            params,
            schedule: bundle.schedule,
        })
    }

    /// Zeroes the output heads, making the prediction identically zero.
    pub fn zero_output_heads(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("head.") {
                let z = Tensor::zeros(t.shape());
                *t = Arc::new(z);
            }
        }
    }

    fn bind<'p, 't>(&'p self, tape: &'t Tape, trainable: bool) -> Params<'p, 't> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf_shared(v.clone())
                } else {
                    tape.constant_shared(v.clone())
                };
                (k.as_str(), var)
            })
            .collect();
        Params { vars }
    }

    fn check_conditions(&self, cond: &Conditions) -> Result<()> {
        if cond.observation.len() != self.config.observation_dim() {
            return Err(Error::invalid(
                "neural denoiser",
                format!(
                    "observation has {} values, expected {}",
                    cond.observation.len(),
                    self.config.observation_dim()
                ),
            ));
        }
        if cond.points.len() != COARSE_POINTS {
            return Err(Error::invalid(
                "neural denoiser",
                format!("expected {COARSE_POINTS} coarse points, got {}", cond.points.len()),
            ));
        }
        Ok(())
    }

    /// Condition tokens `[B·items, W]` and `[B·geo_tokens, W]`.
    fn encode<'t>(&self, p: &Params<'_, 't>, tape: &'t Tape, conds: &[&Conditions]) -> Result<(Var<'t>, Var<'t>)> {
        let b = conds.len();
        let cfg = &self.config;
        let items = cfg.obs_items();
        if !cfg.conditional {
            let obs_idx: Vec<usize> = (0..b * items).map(|i| i % items).collect();
            let geo_idx: Vec<usize> = (0..b * cfg.geo_tokens).map(|i| i % cfg.geo_tokens).collect();
            return Ok((p.get("null.obs").gather(&obs_idx)?, p.get("null.geo").gather(&geo_idx)?));
        }
        let k = cfg.joints;
        let feat = 4 + items;
        let mut obs = vec![0.0; b * items * feat];
        for (e, c) in conds.iter().enumerate() {
            let noise = c.observation[3 * k + 3];
            for it in 0..items {
                let row = &mut obs[(e * items + it) * feat..(e * items + it + 1) * feat];
                row[..3].copy_from_slice(&c.observation[3 * it..3 * it + 3]);
                row[3] = noise;
                row[4 + it] = 1.0;
            }
        }
        let obs = tape.constant(Tensor::from_parts(vec![b * items, feat], obs));
        let h = p.linear(obs, "obs.l1")?.gelu()?;
        let obs_tokens = p.linear(h, "obs.l2")?.layer_norm(1e-5)?;

        let pts: Vec<f64> = conds.iter().flat_map(|c| c.points.iter().flatten().copied()).collect();
        let pts = tape.constant(Tensor::from_parts(vec![b * COARSE_POINTS, 3], pts));
        let h = p.linear(pts, "geo.l1")?.gelu()?;
        let h = p.linear(h, "geo.l2")?;
        let pooled = segment_max(h, COARSE_POINTS)?;
        let geo_tokens = p
            .linear(pooled, "geo.proj")?
            .reshape(&[b * cfg.geo_tokens, cfg.width])?
            .layer_norm(1e-5)?;
        Ok((obs_tokens, geo_tokens))
    }

    fn layer<'t>(
        &self,
        p: &Params<'_, 't>,
        prefix: &str,
        x: Var<'t>,
        batch: usize,
        n: usize,
        obs: Var<'t>,
        geo: Var<'t>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let heads = cfg.heads;
        let items = cfg.obs_items();
        let attn = |h: Var<'t>, ctx: Var<'t>, m: usize, name: &str| -> Result<Var<'t>> {
            let q = h.matmul(p.get(&format!("{prefix}.{name}.q.w")))?;
            let k = ctx.matmul(p.get(&format!("{prefix}.{name}.k.w")))?;
            let v = ctx.matmul(p.get(&format!("{prefix}.{name}.v.w")))?;
            let o = attention(q, k, v, batch, n, m, heads)?;
            p.linear(o, &format!("{prefix}.{name}.o"))
        };
        let h = x.layer_norm(1e-5)?;
        let x = x.add(attn(h, h, n, "self")?)?;
        let h = x.layer_norm(1e-5)?;
        let a_obs = attn(h, obs, items, "obs")?;
        let a_geo = attn(h, geo, cfg.geo_tokens, "geo")?;
        let fused = p.linear(Var::concat(&[a_obs, a_geo], 1)?, &format!("{prefix}.fuse"))?;
        let x = x.add(fused)?;
        let h = x.layer_norm(1e-5)?;
        let h = p.linear(h, &format!("{prefix}.ffn1"))?.gelu()?;
        x.add(p.linear(h, &format!("{prefix}.ffn2"))?)
    }

    /// Batched prediction `[B, D]` from `x_t: [B, D]`.
    fn forward<'t>(
        &self,
        p: &Params<'_, 't>,
        x: Var<'t>,
        ts: &[usize],
        obs: Var<'t>,
        geo: Var<'t>,
    ) -> Result<Var<'t>> {
        let tape = x.tape();
        let cfg = &self.config;
        let layout = cfg.layout();
        let (b, k, w) = (ts.len(), cfg.joints, cfg.width);
        if x.shape() != [b, layout.dim()] {
            return Err(Error::Shape {
                op: "neural denoiser",
                lhs: x.shape(),
                rhs: vec![b, layout.dim()],
            });
        }

        let theta = x.narrow(1, 0, 6 * k)?.reshape(&[b * k, 6])?;
        let theta = Var::concat(&[theta, tape.constant(one_hot(b, k))], 1)?;
        let joint_tok = p.linear(theta, "embed.joint")?;
        let beta = x.narrow(1, layout.beta().start, BETA_DIM)?.reshape(&[b * BETA_DIM, 1])?;
        let beta = Var::concat(&[beta, tape.constant(one_hot(b, BETA_DIM))], 1)?;
        let beta_tok = p.linear(beta, "embed.beta")?;
        let rot_tok = p.linear(x.narrow(1, layout.rot_o().start, 6)?, "embed.rot")?;
        let trans_tok = p.linear(x.narrow(1, layout.trans_o().start, 3)?, "embed.trans")?;

        let n_main = k + 2;
        let mut order = Vec::with_capacity(b * n_main);
        for e in 0..b {
            order.extend((0..k).map(|j| e * k + j));
            order.push(b * k + e);
            order.push(b * k + b + e);
        }
        let main = Var::concat(&[joint_tok, rot_tok, trans_tok], 0)?.gather(&order)?;

        let temb = tape.constant(timestep_embedding(ts, cfg.time_dim));
        let th = p.linear(temb, "time.l1")?.gelu()?;
        let th = p.linear(th, "time.l2")?;
        let scale = th.narrow(1, 0, w)?.add_scalar(1.0)?;
        let shift = th.narrow(1, w, w)?;
        let modulate = |tokens: Var<'t>, per: usize| -> Result<Var<'t>> {
            let idx: Vec<usize> = (0..b * per).map(|i| i / per).collect();
            tokens.mul(scale.gather(&idx)?)?.add(shift.gather(&idx)?)
        };
        let mut main = modulate(main, n_main)?;
        let mut beta_tokens = modulate(beta_tok, BETA_DIM)?;

        for l in 0..cfg.layers {
            main = self.layer(p, &format!("main.{l}"), main, b, n_main, obs, geo)?;
            beta_tokens = self.layer(p, &format!("beta.{l}"), beta_tokens, b, BETA_DIM, obs, geo)?;
        }

        let main = main.layer_norm(1e-5)?;
        let beta_tokens = beta_tokens.layer_norm(1e-5)?;
        let rows = |offset: usize| -> Vec<usize> { (0..b).map(|e| e * n_main + offset).collect() };
        let joint_rows: Vec<usize> = (0..b).flat_map(|e| (0..k).map(move |j| e * n_main + j)).collect();
        let eps_theta = p
            .linear(main.gather(&joint_rows)?, "head.joint")?
            .reshape(&[b, 6 * k])?;
        let eps_beta = p.linear(beta_tokens, "head.beta")?.reshape(&[b, BETA_DIM])?;
        let eps_rot = p.linear(main.gather(&rows(k))?, "head.rot")?;
        let eps_trans = p.linear(main.gather(&rows(k + 1))?, "head.trans")?;
        Var::concat(&[eps_theta, eps_beta, eps_rot, eps_trans], 1)
    }

    /// Mean squared noise-prediction error for fixed `(t, ε)` draws.
    fn batch_loss<'t>(
        &self,
        p: &Params<'_, 't>,
        tape: &'t Tape,
        batch: &TrainBatch,
        ts: &[usize],
        eps: &[Vec<f64>],
    ) -> Result<Var<'t>> {
        let d = self.config.layout().dim();
        let mut xt = Vec::with_capacity(batch.len() * d);
        for ((ex, &t), e) in batch.iter().zip(ts).zip(eps) {
            if ex.x0.len() != d {
                return Err(Error::invalid("train_step", format!("example has {} values, expected {d}", ex.x0.len())));
            }
            self.check_conditions(&ex.cond)?;
            xt.extend(forward_diffuse(&ex.x0, t, e, &self.schedule)?);
        }
        let conds: Vec<&Conditions> = batch.iter().map(|e| &e.cond).collect();
        let (obs, geo) = self.encode(p, tape, &conds)?;
        let x = tape.constant(Tensor::from_parts(vec![batch.len(), d], xt));
        let pred = self.forward(p, x, ts, obs, geo)?;
        let target = tape.constant(Tensor::from_parts(vec![batch.len(), d], eps.concat()));
        pred.sub(target)?.square()?.mean()
    }

    fn draw_noise(&self, batch_len: usize, t_max: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec<f64>>) {
        let d = self.config.layout().dim();
        let ts: Vec<usize> = (0..batch_len).map(|_| rng.gen_range(1..=t_max)).collect();
        let eps = (0..batch_len)
            .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        (ts, eps)
    }

    /// One optimizer step on the noise-prediction objective with `t`
    /// uniform on `1..=T`; returns the batch loss before the update.
    pub fn train_step(&mut self, batch: &TrainBatch, adam: &mut Adam, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.train_step_capped(batch, adam, rng, self.schedule.steps())
    }

    /// As [`Self::train_step`] with `t` uniform on `1..=t_max`.
    pub fn train_step_capped(
        &mut self,
        batch: &TrainBatch,
        adam: &mut Adam,
        rng: &mut ChaCha8Rng,
        t_max: usize,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        if t_max == 0 || t_max > self.schedule.steps() {
            return Err(Error::invalid("train_step", format!("t_max must lie in 1..={}", self.schedule.steps())));
        }
        let (ts, eps) = self.draw_noise(batch.len(), t_max, rng);
        let (loss, grads) = {
            let tape = Tape::new();
            let p = self.bind(&tape, true);
            let loss = self.batch_loss(&p, &tape, batch, &ts, &eps)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: value,
                    step: adam.step,
                    diagnostics: format!("batch of {}, timesteps {:?}", batch.len(), &ts[..ts.len().min(8)]),
                });
            }
            let g = tape.backward(loss)?;
            let grads: BTreeMap<String, Tensor> = p
                .vars
                .iter()
                .map(|(name, var)| (name.to_string(), g.get(*var)))
                .collect();
            (value, grads)
        };
        adam.update(&mut self.params, &grads)?;
        Ok(loss)
    }

    /// Mean squared noise-prediction error on `batch` with `t` uniform on
    /// `1..=t_max` and noise drawn from `rng`, without updating weights.
    pub fn eval_loss(&self, batch: &TrainBatch, t_max: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        if batch.is_empty() || t_max == 0 || t_max > self.schedule.steps() {
            return Err(Error::invalid("eval_loss", "need a nonempty batch and 1 ≤ t_max ≤ T"));
        }
        let (ts, eps) = self.draw_noise(batch.len(), t_max, rng);
        let tape = Tape::inference();
        let p = self.bind(&tape, false);
        self.batch_loss(&p, &tape, batch, &ts, &eps)?.item()
    }

    /// Batched inference for many scenes at their own timesteps.
    pub fn eval_batch(&self, xs: &[Vec<f64>], ts: &[usize], conds: &[&Conditions]) -> Result<Vec<Vec<f64>>> {
        let d = self.config.layout().dim();
        let tape = Tape::inference();
        let p = self.bind(&tape, false);
        for c in conds {
            self.check_conditions(c)?;
        }
        let (obs, geo) = self.encode(&p, &tape, conds)?;
        let x = tape.constant(Tensor::new(vec![xs.len(), d], xs.concat())?);
        let out = self.forward(&p, x, ts, obs, geo)?.value();
        Ok(out.data().chunks(d).map(<[f64]>::to_vec).collect())
    }

    /// Gradient of `‖ε‖²`-style scalar objectives with respect to the
    /// encoder inputs is not needed; only `x_t` is differentiated.
    fn eval_single<'t>(&self, x_t: Var<'t>, t: usize, ctx: &NeuralContext) -> Result<Var<'t>> {
        let tape = x_t.tape();
        let d = self.config.layout().dim();
        check_dim("neural denoiser", d, &x_t.shape())?;
        let p = self.bind(tape, false);
        let obs = tape.constant_shared(ctx.obs.clone());
        let geo = tape.constant_shared(ctx.geo.clone());
        self.forward(&p, x_t.reshape(&[1, d])?, &[t], obs, geo)?.reshape(&[d])
    }
}

impl Denoiser for NeuralDenoiser {
    type Context = NeuralContext;

    fn dim(&self) -> usize {
        self.config.layout().dim()
    }

    fn context(&self, cond: &Conditions) -> Result<NeuralContext> {
        self.check_conditions(cond)?;
        let tape = Tape::inference();
        let p = self.bind(&tape, false);
        let (obs, geo) = self.encode(&p, &tape, &[cond])?;
        Ok(NeuralContext {
            obs: obs.value(),
            geo: geo.value(),
        })
    }

    fn eval_var<'t>(&self, x_t: Var<'t>, t: usize, ctx: &NeuralContext) -> Result<Var<'t>> {
        self.eval_single(x_t, t, ctx)
    }
}

fn one_hot(batch: usize, n: usize) -> Tensor {
    let mut data = vec![0.0; batch * n * n];
    for e in 0..batch {
        for j in 0..n {
            data[(e * n + j) * n + j] = 1.0;
        }
    }
    Tensor::from_parts(vec![batch * n, n], data)
}

/// Sinusoidal embedding `[B, dim]` of integer timesteps.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; ts.len() * dim];
    for (e, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let (s, c) = (t as f64 * freq).sin_cos();
            data[e * dim + i] = s;
            data[e * dim + half + i] = c;
        }
    }
    Tensor::from_parts(vec![ts.len(), dim], data)
}

/// Row-wise maximum over consecutive groups of `group` rows:
/// `[B·group, W] → [B, W]`.
pub fn segment_max(x: Var<'_>, group: usize) -> Result<Var<'_>> {
    let v = x.value();
    let (rows, w) = v
        .dims2()
        .ok_or_else(|| Error::invalid("segment_max", format!("expected rank 2, got {:?}", v.shape())))?;
    if group == 0 || rows % group != 0 {
        return Err(Error::invalid("segment_max", format!("{rows} rows do not split into groups of {group}")));
    }
    let b = rows / group;
    let mut out = vec![f64::NEG_INFINITY; b * w];
    let mut arg = vec![0usize; b * w];
    for e in 0..b {
        for r in 0..group {
            let row = e * group + r;
            for c in 0..w {
                let val = v.data()[row * w + c];
                if val > out[e * w + c] {
                    out[e * w + c] = val;
                    arg[e * w + c] = row;
                }
            }
        }
    }
    x.tape().custom("segment_max", &[x], Tensor::from_parts(vec![b, w], out), move |g| {
        let mut gx = Tensor::zeros(&[rows, w]);
        for (i, &row) in arg.iter().enumerate() {
            gx.data_mut()[row * w + i % w] += g.data()[i];
        }
        vec![Some(gx)]
    })
}

/// Multi-head scaled dot-product attention over `batch` independent
/// examples. `q: [B·n, W]`, `k, v: [B·m, W]` → `[B·n, W]`.
pub fn attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    batch: usize,
    n: usize,
    m: usize,
    heads: usize,
) -> Result<Var<'t>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let w = qv.shape().get(1).copied().unwrap_or(0);
    if qv.shape() != [batch * n, w]
        || kv.shape() != [batch * m, w]
        || vv.shape() != [batch * m, w]
        || heads == 0
        || w % heads != 0
    {
        return Err(Error::Shape {
            op: "attention",
            lhs: qv.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        });
    }
    let d = w / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; batch * heads * n * m];
    let mut out = vec![0.0; batch * n * w];
    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
    let mut row = vec![0.0; m];
    for e in 0..batch {
        for h in 0..heads {
            let off = h * d;
            for i in 0..n {
                let qi = &qd[(e * n + i) * w + off..(e * n + i) * w + off + d];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kd[(e * m + j) * w + off..(e * m + j) * w + off + d];
                    *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let p = &mut probs[((e * heads + h) * n + i) * m..((e * heads + h) * n + i + 1) * m];
                let o = &mut out[(e * n + i) * w + off..(e * n + i) * w + off + d];
                for (j, s) in row.iter().enumerate() {
                    let pj = s / z;
                    p[j] = pj;
                    let vj = &vd[(e * m + j) * w + off..(e * m + j) * w + off + d];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += pj * vc;
                    }
                }
            }
        }
    }
    let (need_q, need_k, need_v) = (q.requires_grad(), k.requires_grad(), v.requires_grad());
    q.tape().custom("attention", &[q, k, v], Tensor::from_parts(vec![batch * n, w], out), move |g| {
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut gq = vec![0.0; batch * n * w];
        let mut gk = vec![0.0; batch * m * w];
        let mut gv = vec![0.0; batch * m * w];
        let mut dp = vec![0.0; m];
        for e in 0..batch {
            for h in 0..heads {
                let off = h * d;
                for i in 0..n {
                    let p = &probs[((e * heads + h) * n + i) * m..((e * heads + h) * n + i + 1) * m];
                    let gi = &gd[(e * n + i) * w + off..(e * n + i) * w + off + d];
                    let mut dot = 0.0;
                    for j in 0..m {
                        let vrow = (e * m + j) * w + off;
                        dp[j] = gi.iter().zip(&vd[vrow..vrow + d]).map(|(a, b)| a * b).sum();
                        dot += p[j] * dp[j];
                        if need_v {
                            for c in 0..d {
                                gv[vrow + c] += p[j] * gi[c];
                            }
                        }
                    }
                    let qrow = (e * n + i) * w + off;
                    for j in 0..m {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (e * m + j) * w + off;
                        for c in 0..d {
                            if need_q {
                                gq[qrow + c] += ds * kd[krow + c];
                            }
                            if need_k {
                                gk[krow + c] += ds * qd[qrow + c];
                            }
                        }
                    }
                }
            }
        }
        vec![
            need_q.then(|| Tensor::from_parts(vec![batch * n, w], gq)),
            need_k.then(|| Tensor::from_parts(vec![batch * m, w], gk)),
            need_v.then(|| Tensor::from_parts(vec![batch * m, w], gv)),
        ]
    })
}

/// Adaptive moment estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn update(&mut self, params: &mut BTreeMap<String, Arc<Tensor>>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid("adam", format!("no gradient for `{name}`")))?;
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = Arc::make_mut(p).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                data[i] -= self.lr * (m[i] / b1t) / ((v[i] / b2t).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, n, m, w, h) = (2, 3, 4, 8, 2);
        let inputs = [
            rand_tensor(&mut rng, &[b * n, w]),
            rand_tensor(&mut rng, &[b * m, w]),
            rand_tensor(&mut rng, &[b * m, w]),
        ];
        let weights = rand_tensor(&mut rng, &[b * n, w]);
        let f = |xs: &[Tensor]| -> Result<f64> {
            let tape = Tape::inference();
            let v: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let o = attention(v[0], v[1], v[2], b, n, m, h)?;
            o.mul(tape.constant(weights.clone()))?.sum()?.item()
        };
        let tape = Tape::new();
        let v: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let o = attention(v[0], v[1], v[2], b, n, m, h).unwrap();
        let loss = o.mul(tape.constant(weights.clone())).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        for i in 0..3 {
            let numeric = finite_diff_grad(
                |p| {
                    let mut xs = inputs.clone();
                    xs[i] = p.clone();
                    f(&xs)
                },
                &inputs[i],
                1e-6,
            )
            .unwrap();
            assert!(max_relative_error(&g.get(v[i]), &numeric, 1e-7) < 1e-5);
        }
    }

    #[test]
    fn segment_max_picks_group_maxima() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4, 2], vec![1., 5., 3., 2., -1., 0., -2., 4.]).unwrap());
        let y = segment_max(x, 2).unwrap();
        assert_eq!(y.value().data(), &[3., 5., -1., 4.]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).data(), &[0., 1., 1., 0., 1., 0., 0., 1.]);
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let d = NeuralDenoiser::new(NeuralConfig::default(), NoiseSchedule::default()).unwrap();
        let cond = Conditions {
            observation: vec![0.1; d.config().observation_dim()],
            points: vec![[0.1, 0.2, 0.3]; COARSE_POINTS],
        };
        let ctx = d.context(&cond).unwrap();
        let x: Vec<f64> = (0..d.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        assert!(d.eval(&x, 17, &ctx).unwrap().iter().all(|&e| e == 0.0));
    }
}
