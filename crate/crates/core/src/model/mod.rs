//! The Kolmogorov-Arnold transformer: patch embedding, positional encoding,
//! pre-norm blocks (`x + MSA(LN(x))`, then `x + mixer(LN(x))`), final norm,
//! mean pooling over tokens and a linear head.

mod config;
mod train;

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{KatConfig, MixerKind, Positional, Preset, Task};
pub use train::{
    evaluate, train, Dataset, EvalReport, Targets, TraceRow, TrainConfig, TrainReport,
};

use crate::error::{Error, Result};
use crate::grkan::{GrKanLayer, GroupRationalParams};
use crate::initfit::{
    cached_fit, estimate_gain, transfer_from_mlp, ActivationTarget, GainOptions, GainSource,
};
use crate::initfit::{Linear, TransferOptions};
use crate::scalar::Scalar;
use crate::tensor::{Eager, Graph, Tensor};

/// Parameter positions for one block's channel mixer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MixerIdx {
    GrKan {
        num1: usize,
        den1: usize,
        w1: usize,
        b1: usize,
        num2: usize,
        den2: usize,
        w2: usize,
        b2: usize,
    },
    Mlp {
        w1: usize,
        b1: usize,
        w2: usize,
        b2: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BlockIdx {
    ln1: (usize, usize),
    q: (usize, usize),
    /// No bias: `q·b_k` is the same for every key, so softmax cancels it.
    k: usize,
    v: (usize, usize),
    proj: (usize, usize),
    ln2: (usize, usize),
    mixer: MixerIdx,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    embed: (usize, usize),
    pos: Option<usize>,
    blocks: Vec<BlockIdx>,
    norm: (usize, usize),
    head: (usize, usize),
}

/// How a parameter is drawn at build time.
#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    XavierUniform,
    /// `U(±1/√fan_in)`
    FanInUniform,
    Normal(f64),
    /// Coefficients of the cached fit to a target.
    Numerators(ActivationTarget),
    Denominators(ActivationTarget),
    /// `N(0, α/fan_in)`, `α` the gain of the fitted target.
    Gain(ActivationTarget),
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    fan_in: usize,
}

fn layout(cfg: &KatConfig) -> (Vec<Spec>, Layout) {
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init, fan_in: usize| {
        specs.push(Spec {
            name,
            shape,
            init,
            fan_in,
        });
        specs.len() - 1
    };
    let (d, h, f) = (cfg.dim, cfg.mixer_hidden, cfg.token_features);
    let dense = |push: &mut dyn FnMut(String, Vec<usize>, Init, usize) -> usize,
                 prefix: &str,
                 out: usize,
                 inp: usize,
                 w: Init,
                 b: Init| {
        (
            push(format!("{prefix}.weight"), vec![out, inp], w, inp),
            push(format!("{prefix}.bias"), vec![out], b, inp),
        )
    };
    let embed = dense(&mut push, "embed", d, f, Init::XavierUniform, Init::Zeros);
    let pos = (cfg.positional == Positional::Learnable)
        .then(|| push("pos".into(), vec![cfg.tokens, d], Init::Normal(0.02), d));
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init, usize) -> usize, prefix: &str| {
        (
            push(format!("{prefix}.gamma"), vec![d], Init::Ones, d),
            push(format!("{prefix}.beta"), vec![d], Init::Zeros, d),
        )
    };
    let groups = cfg.groups;
    let den_rows = match cfg.denominator {
        crate::grkan::DenominatorLayout::Shared => 1,
        crate::grkan::DenominatorLayout::PerGroup => groups,
    };
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("blocks.{l}");
        let ln1 = norm(&mut push, &format!("{p}.ln1"));
        let q = dense(
            &mut push,
            &format!("{p}.attn.q"),
            d,
            d,
            Init::XavierUniform,
            Init::Zeros,
        );
        let k = push(
            format!("{p}.attn.k.weight"),
            vec![d, d],
            Init::XavierUniform,
            d,
        );
        let v = dense(
            &mut push,
            &format!("{p}.attn.v"),
            d,
            d,
            Init::XavierUniform,
            Init::Zeros,
        );
        let proj = dense(
            &mut push,
            &format!("{p}.attn.proj"),
            d,
            d,
            Init::XavierUniform,
            Init::Zeros,
        );
        let ln2 = norm(&mut push, &format!("{p}.ln2"));
        let mixer = match cfg.mixer {
            MixerKind::GrKan => {
                let (t1, t2) = (cfg.init_first, cfg.init_second);
                let num1 = push(
                    format!("{p}.mixer.fc1.numerators"),
                    vec![groups, cfg.m + 1],
                    Init::Numerators(t1),
                    d,
                );
                let den1 = push(
                    format!("{p}.mixer.fc1.denominators"),
                    vec![den_rows, cfg.n],
                    Init::Denominators(t1),
                    d,
                );
                let (w1, b1) = dense(
                    &mut push,
                    &format!("{p}.mixer.fc1"),
                    h,
                    d,
                    Init::Gain(t1),
                    Init::Zeros,
                );
                let num2 = push(
                    format!("{p}.mixer.fc2.numerators"),
                    vec![groups, cfg.m + 1],
                    Init::Numerators(t2),
                    h,
                );
                let den2 = push(
                    format!("{p}.mixer.fc2.denominators"),
                    vec![den_rows, cfg.n],
                    Init::Denominators(t2),
                    h,
                );
                let (w2, b2) = dense(
                    &mut push,
                    &format!("{p}.mixer.fc2"),
                    d,
                    h,
                    Init::Gain(t2),
                    Init::Zeros,
                );
                MixerIdx::GrKan {
                    num1,
                    den1,
                    w1,
                    b1,
                    num2,
                    den2,
                    w2,
                    b2,
                }
            }
            MixerKind::Mlp => {
                let (w1, b1) = dense(
                    &mut push,
                    &format!("{p}.mixer.fc1"),
                    h,
                    d,
                    Init::FanInUniform,
                    Init::FanInUniform,
                );
                let (w2, b2) = dense(
                    &mut push,
                    &format!("{p}.mixer.fc2"),
                    d,
                    h,
                    Init::FanInUniform,
                    Init::FanInUniform,
                );
                MixerIdx::Mlp { w1, b1, w2, b2 }
            }
        };
        blocks.push(BlockIdx {
            ln1,
            q,
            k,
            v,
            proj,
            ln2,
            mixer,
        });
    }
    let norm_idx = norm(&mut push, "norm");
    let head = dense(
        &mut push,
        "head",
        cfg.outputs,
        d,
        Init::XavierUniform,
        Init::Zeros,
    );
    (
        specs,
        Layout {
            embed,
            pos,
            blocks,
            norm: norm_idx,
            head,
        },
    )
}

/// Number of trainable scalars a config builds, without allocating it.
pub fn param_count(cfg: &KatConfig) -> usize {
    layout(cfg)
        .0
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Gain of the cached fit to `target`, computed once per process.
pub fn cached_gain(target: ActivationTarget, m: usize, n: usize) -> Result<f64> {
    static CACHE: OnceLock<Mutex<HashMap<(ActivationTarget, usize, usize), f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(&g) = cache
        .lock()
        .expect("gain cache poisoned")
        .get(&(target, m, n))
    {
        return Ok(g);
    }
    let fit = cached_fit(target, m, n)?;
    let alpha = estimate_gain(GainSource::Rational(&fit.coeffs), &GainOptions::default())?.alpha;
    cache
        .lock()
        .expect("gain cache poisoned")
        .insert((target, m, n), alpha);
    Ok(alpha)
}

/// Fixed sine/cosine table `[tokens, dim]`.
pub fn sinusoidal_table<T: Scalar>(tokens: usize, dim: usize) -> Result<Tensor<T>> {
    Tensor::from_fn([tokens, dim], |i| {
        let (t, c) = (i / dim, i % dim);
        let freq = 10000f64.powf(-((c / 2 * 2) as f64) / dim as f64);
        let angle = t as f64 * freq;
        T::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Values recorded by one forward pass.
pub struct Forward<V> {
    pub output: V,
    /// One handle per parameter, in [`KatModel::params`] order.
    pub params: Vec<V>,
    /// Channel-mixer output of every block, before the residual add.
    pub mixer_outputs: Vec<V>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KatModel<T> {
    config: KatConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

impl<T: Scalar> KatModel<T> {
    pub fn build(config: &KatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(s.shape.clone())?,
                Init::Ones => Tensor::full(s.shape.clone(), T::one())?,
                Init::XavierUniform => {
                    let bound = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                    Tensor::uniform(s.shape.clone(), bound, &mut rng)?
                }
                Init::FanInUniform => {
                    Tensor::uniform(s.shape.clone(), 1.0 / (s.fan_in as f64).sqrt(), &mut rng)?
                }
                Init::Normal(std) => Tensor::randn(s.shape.clone(), std, &mut rng)?,
                Init::Numerators(t) => {
                    let fit = cached_fit(t, config.m, config.n)?;
                    let row = fit.coeffs.numerator();
                    Tensor::from_fn(s.shape.clone(), |i| T::lit(row[i % row.len()]))?
                }
                Init::Denominators(t) => {
                    let fit = cached_fit(t, config.m, config.n)?;
                    let row = fit.coeffs.denominator();
                    Tensor::from_fn(s.shape.clone(), |i| T::lit(row[i % row.len()]))?
                }
                Init::Gain(t) => {
                    let alpha = cached_gain(t, config.m, config.n)?;
                    Tensor::randn(s.shape.clone(), (alpha / s.fan_in as f64).sqrt(), &mut rng)?
                }
            };
            params.push(t);
        }
        Ok(KatModel {
            config: config.clone(),
            names: specs.into_iter().map(|s| s.name).collect(),
            params,
            layout,
        })
    }

    /// Rebuilds a model from named tensors, e.g. a loaded checkpoint.
    pub fn from_named(config: &KatConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = layout(config);
        let mut by_name: HashMap<String, Tensor<T>> = named.into_iter().collect();
        let mut params = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = by_name
                .remove(&s.name)
                .ok_or_else(|| Error::format(format!("missing tensor '{}'", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::format(format!(
                    "tensor '{}' has shape {:?}, config expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            params.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::format(format!("unexpected tensor '{extra}'")));
        }
        Ok(KatModel {
            config: config.clone(),
            names: specs.into_iter().map(|s| s.name).collect(),
            params,
            layout,
        })
    }

    pub fn config(&self) -> &KatConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> KatModel<U> {
        KatModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Every group-rational table as `(name prefix, numerators, denominators)`.
    pub fn rationals(&self) -> Vec<(String, GroupRationalParams<T>)> {
        let mut out = Vec::new();
        for (l, b) in self.layout.blocks.iter().enumerate() {
            if let MixerIdx::GrKan {
                num1,
                den1,
                num2,
                den2,
                ..
            } = b.mixer
            {
                for (stage, num, den, width) in [
                    (1, num1, den1, self.config.dim),
                    (2, num2, den2, self.config.mixer_hidden),
                ] {
                    let params = GroupRationalParams::from_tensors(
                        width,
                        self.params[num].clone(),
                        self.params[den].clone(),
                    )
                    .expect("layout shapes are valid");
                    out.push((format!("blocks.{l}.mixer.fc{stage}"), params));
                }
            }
        }
        out
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        if input.rank() != 3 || input.shape()[1] != c.tokens || input.shape()[2] != c.token_features
        {
            return Err(Error::shape(format!(
                "model input {:?} should be [batch, {}, {}]",
                input.shape(),
                c.tokens,
                c.token_features
            )));
        }
        Ok(())
    }

    /// One forward definition for every graph: `input` is `[B, tokens, features]`.
    pub fn forward_graph<G: Graph<T>>(
        &self,
        g: &mut G,
        input: &Tensor<T>,
    ) -> Result<Forward<G::Var>> {
        self.check_input(input)?;
        let c = &self.config;
        let p: Vec<G::Var> = self.params.iter().map(|t| g.param(t)).collect();
        let eps = T::lit(c.ln_eps);
        let x = g.constant(input.clone());
        let mut h = g.linear(&x, &p[self.layout.embed.0], Some(&p[self.layout.embed.1]))?;
        let pos = match self.layout.pos {
            Some(i) => p[i].clone(),
            None => g.constant(sinusoidal_table(c.tokens, c.dim)?),
        };
        h = g.add(&h, &pos)?;
        let mut mixer_outputs = Vec::with_capacity(c.layers);
        for b in &self.layout.blocks {
            let a = g.layer_norm(&h, &p[b.ln1.0], &p[b.ln1.1], eps)?;
            let q = g.linear(&a, &p[b.q.0], Some(&p[b.q.1]))?;
            let k = g.linear(&a, &p[b.k], None)?;
            let v = g.linear(&a, &p[b.v.0], Some(&p[b.v.1]))?;
            let att = g.attention(&q, &k, &v, c.heads)?;
            let o = g.linear(&att, &p[b.proj.0], Some(&p[b.proj.1]))?;
            h = g.add(&h, &o)?;
            let a = g.layer_norm(&h, &p[b.ln2.0], &p[b.ln2.1], eps)?;
            let o = match b.mixer {
                MixerIdx::GrKan {
                    num1,
                    den1,
                    w1,
                    b1,
                    num2,
                    den2,
                    w2,
                    b2,
                } => {
                    let r = g.group_rational(&a, &p[num1], &p[den1])?;
                    let z = g.linear(&r, &p[w1], Some(&p[b1]))?;
                    let r = g.group_rational(&z, &p[num2], &p[den2])?;
                    g.linear(&r, &p[w2], Some(&p[b2]))?
                }
                MixerIdx::Mlp { w1, b1, w2, b2 } => {
                    let z = g.linear(&a, &p[w1], Some(&p[b1]))?;
                    let z = g.activation(&z, c.mlp_activation)?;
                    g.linear(&z, &p[w2], Some(&p[b2]))?
                }
            };
            mixer_outputs.push(o.clone());
            h = g.add(&h, &o)?;
        }
        let h = g.layer_norm(&h, &p[self.layout.norm.0], &p[self.layout.norm.1], eps)?;
        let pooled = g.mean_tokens(&h)?;
        let output = g.linear(
            &pooled,
            &p[self.layout.head.0],
            Some(&p[self.layout.head.1]),
        )?;
        Ok(Forward {
            output,
            params: p,
            mixer_outputs,
        })
    }

    /// Logits (classification) or predictions (regression), `[B, outputs]`.
    pub fn forward_inference(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_graph(&mut Eager, input)?.output)
    }

    /// Sample variance of every block's mixer output on `input`.
    pub fn mixer_variances(&self, input: &Tensor<T>) -> Result<Vec<f64>> {
        Ok(self
            .forward_graph(&mut Eager, input)?
            .mixer_outputs
            .iter()
            .map(Tensor::variance)
            .collect())
    }

    /// Converts an MLP-mixer model into a GR-KAN one: every tensor outside
    /// the mixers is copied, and each mixer goes through
    /// [`transfer_from_mlp`] with the model's `mlp_activation`.
    pub fn transfer_to_grkan(&self, groups: usize) -> Result<KatModel<T>> {
        if self.config.mixer != MixerKind::Mlp {
            return Err(Error::Usage("transfer source must use MLP mixers".into()));
        }
        let cfg = KatConfig {
            mixer: MixerKind::GrKan,
            groups,
            init_first: ActivationTarget::Identity,
            init_second: self.config.mlp_activation.into(),
            ..self.config.clone()
        };
        cfg.validate()?;
        let opts = TransferOptions {
            groups,
            layout: cfg.denominator,
            fit: crate::initfit::FitOptions {
                m: cfg.m,
                n: cfg.n,
                ..Default::default()
            },
        };
        let mut named: Vec<(String, Tensor<T>)> = Vec::new();
        for (name, t) in self.named() {
            if !name.contains(".mixer.") {
                named.push((name.to_string(), t.clone()));
            }
        }
        for (l, b) in self.layout.blocks.iter().enumerate() {
            let MixerIdx::Mlp { w1, b1, w2, b2 } = b.mixer else {
                unreachable!("checked mixer kind above")
            };
            let lin1 = Linear::new(self.params[w1].clone(), self.params[b1].clone())?;
            let lin2 = Linear::new(self.params[w2].clone(), self.params[b2].clone())?;
            let (k1, k2) = transfer_from_mlp(&lin1, cfg.init_second, &lin2, &opts)?;
            for (stage, layer) in [(1, k1), (2, k2)] {
                let p = format!("blocks.{l}.mixer.fc{stage}");
                named.push((format!("{p}.numerators"), layer.act().numerators().clone()));
                named.push((
                    format!("{p}.denominators"),
                    layer.act().denominators().clone(),
                ));
                named.push((format!("{p}.weight"), layer.weight().clone()));
                named.push((format!("{p}.bias"), layer.bias().clone()));
            }
        }
        KatModel::from_named(&cfg, named)
    }

    /// The two GR-KAN layers of block `l`'s mixer, if it has them.
    pub fn grkan_mixer(&self, l: usize) -> Option<(GrKanLayer<T>, GrKanLayer<T>)> {
        let b = self.layout.blocks.get(l)?;
        let MixerIdx::GrKan {
            num1,
            den1,
            w1,
            b1,
            num2,
            den2,
            w2,
            b2,
        } = b.mixer
        else {
            return None;
        };
        let c = &self.config;
        let mk = |num: usize,
                  den: usize,
                  w: usize,
                  bias: usize,
                  width: usize|
         -> Result<GrKanLayer<T>> {
            let act = GroupRationalParams::from_tensors(
                width,
                self.params[num].clone(),
                self.params[den].clone(),
            )?;
            GrKanLayer::new(act, self.params[w].clone(), self.params[bias].clone())
        };
        Some((
            mk(num1, den1, w1, b1, c.dim).ok()?,
            mk(num2, den2, w2, b2, c.mixer_hidden).ok()?,
        ))
    }
}
