//! Visual parameter-efficient fine-tuning: deep visual prompts, low-rank
//! query/value updates, and bottleneck adapters. One [`PeftModule`] is
//! shared by every source–target pair.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Parameterized, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftKind {
    Prompt,
    Lora,
    Adapter,
}

impl fmt::Display for PeftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeftKind::Prompt => "prompt",
            PeftKind::Lora => "lora",
            PeftKind::Adapter => "adapter",
        })
    }
}

impl FromStr for PeftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt" => Ok(PeftKind::Prompt),
            "lora" => Ok(PeftKind::Lora),
            "adapter" => Ok(PeftKind::Adapter),
            other => Err(Error::Validation {
                key: "peft.kind".into(),
                reason: format!("`{other}` is not one of prompt, lora, adapter"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeftConfig {
    pub kind: PeftKind,
    /// Visual prompt tokens per layer.
    pub m3: usize,
    /// Low-rank update rank.
    pub r1: usize,
    /// Adapter bottleneck width.
    pub r2: usize,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            kind: PeftKind::Lora,
            m3: 20,
            r1: 8,
            r2: 16,
        }
    }
}

/// Per-layer prompt token matrices, each `m3 × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPromptModule<T> {
    pub tokens: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer<T> {
    pub a_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub a_v: Tensor<T>,
    pub b_v: Tensor<T>,
}

/// Low-rank updates `ΔW = BA` on the query and value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule<T> {
    pub layers: Vec<LoraLayer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer<T> {
    /// `r2 × d`, applied first.
    pub w_up: Tensor<T>,
    /// `d × r2`, zero at init.
    pub w_dn: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModule<T> {
    pub layers: Vec<AdapterLayer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PeftModule<T> {
    Prompt(VisualPromptModule<T>),
    Lora(LoraModule<T>),
    Adapter(AdapterModule<T>),
}

/// Graph handles for one bound [`PeftModule`].
#[derive(Clone, Debug)]
pub enum PeftVars {
    Prompt(Vec<Var>),
    Lora(Vec<[Var; 4]>),
    Adapter(Vec<[Var; 2]>),
}

impl PeftVars {
    pub fn prompt(&self, layer: usize) -> Option<Var> {
        match self {
            PeftVars::Prompt(v) => Some(v[layer]),
            _ => None,
        }
    }

    pub fn lora(&self, layer: usize) -> Option<[Var; 4]> {
        match self {
            PeftVars::Lora(v) => Some(v[layer]),
            _ => None,
        }
    }

    pub fn adapter(&self, layer: usize) -> Option<[Var; 2]> {
        match self {
            PeftVars::Adapter(v) => Some(v[layer]),
            _ => None,
        }
    }
}

impl<T: Scalar> PeftModule<T> {
    /// Initializes near the frozen behavior: zero `B` for LoRA, zero
    /// `W_dn` for adapters, small Gaussian prompts.
    pub fn init<R: Rng + ?Sized>(cfg: &PeftConfig, layers: usize, width: usize, rng: &mut R) -> Result<Self> {
        let d = width;
        match cfg.kind {
            PeftKind::Prompt => {
                if cfg.m3 == 0 {
                    return Err(Error::Config("peft.m3 must be at least 1".into()));
                }
                Ok(PeftModule::Prompt(VisualPromptModule {
                    tokens: (0..layers)
                        .map(|_| Tensor::randn([cfg.m3, d], INIT_STD, rng).trainable())
                        .collect(),
                }))
            }
            PeftKind::Lora => {
                if cfg.r1 == 0 {
                    return Err(Error::Config("peft.r1 must be at least 1".into()));
                }
                Ok(PeftModule::Lora(LoraModule {
                    layers: (0..layers)
                        .map(|_| LoraLayer {
                            a_q: Tensor::randn([cfg.r1, d], INIT_STD, rng).trainable(),
                            b_q: Tensor::zeros([d, cfg.r1]).trainable(),
                            a_v: Tensor::randn([cfg.r1, d], INIT_STD, rng).trainable(),
                            b_v: Tensor::zeros([d, cfg.r1]).trainable(),
                        })
                        .collect(),
                }))
            }
            PeftKind::Adapter => {
                if cfg.r2 == 0 || cfg.r2 >= d {
                    return Err(Error::Config(format!(
                        "adapter bottleneck r2={} must satisfy 1 <= r2 < d={d}",
                        cfg.r2
                    )));
                }
                Ok(PeftModule::Adapter(AdapterModule {
                    layers: (0..layers)
                        .map(|_| AdapterLayer {
                            w_up: Tensor::randn([cfg.r2, d], INIT_STD, rng).trainable(),
                            w_dn: Tensor::zeros([d, cfg.r2]).trainable(),
                        })
                        .collect(),
                }))
            }
        }
    }

    pub fn kind(&self) -> PeftKind {
        match self {
            PeftModule::Prompt(_) => PeftKind::Prompt,
            PeftModule::Lora(_) => PeftKind::Lora,
            PeftModule::Adapter(_) => PeftKind::Adapter,
        }
    }

    pub fn layers(&self) -> usize {
        match self {
            PeftModule::Prompt(m) => m.tokens.len(),
            PeftModule::Lora(m) => m.layers.len(),
            PeftModule::Adapter(m) => m.layers.len(),
        }
    }

    /// Token width the module was built for.
    pub fn width(&self) -> usize {
        match self {
            PeftModule::Prompt(m) => m.tokens.first().map_or(0, |t| t.cols()),
            PeftModule::Lora(m) => m.layers.first().map_or(0, |l| l.a_q.cols()),
            PeftModule::Adapter(m) => m.layers.first().map_or(0, |l| l.w_up.cols()),
        }
    }

    /// Freezes or unfreezes every tensor.
    pub fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(on));
    }

    pub fn bind(&self, g: &mut Graph<T>) -> PeftVars {
        match self {
            PeftModule::Prompt(m) => PeftVars::Prompt(m.tokens.iter().map(|t| g.param(t)).collect()),
            PeftModule::Lora(m) => PeftVars::Lora(
                m.layers
                    .iter()
                    .map(|l| [g.param(&l.a_q), g.param(&l.b_q), g.param(&l.a_v), g.param(&l.b_v)])
                    .collect(),
            ),
            PeftModule::Adapter(m) => PeftVars::Adapter(
                m.layers
                    .iter()
                    .map(|l| [g.param(&l.w_up), g.param(&l.w_dn)])
                    .collect(),
            ),
        }
    }

    /// Pulls graph gradients into the owned tensors' grad buffers.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &PeftVars) -> Result<()> {
        fn pull<T: Scalar>(t: &mut Tensor<T>, g: &Graph<T>, v: Var) -> Result<()> {
            match g.grad(v) {
                Some(gr) if t.requires_grad() => t.accumulate_grad(gr),
                _ => Ok(()),
            }
        }
        match (self, vars) {
            (PeftModule::Prompt(m), PeftVars::Prompt(v)) => {
                for (t, &var) in m.tokens.iter_mut().zip(v) {
                    pull(t, g, var)?;
                }
            }
            (PeftModule::Lora(m), PeftVars::Lora(v)) => {
                for (l, vs) in m.layers.iter_mut().zip(v) {
                    pull(&mut l.a_q, g, vs[0])?;
                    pull(&mut l.b_q, g, vs[1])?;
                    pull(&mut l.a_v, g, vs[2])?;
                    pull(&mut l.b_v, g, vs[3])?;
                }
            }
            (PeftModule::Adapter(m), PeftVars::Adapter(v)) => {
                for (l, vs) in m.layers.iter_mut().zip(v) {
                    pull(&mut l.w_up, g, vs[0])?;
                    pull(&mut l.w_dn, g, vs[1])?;
                }
            }
            _ => return Err(Error::Contract("PEFT vars bound from a different module kind".into())),
        }
        Ok(())
    }

    /// True when every tensor's gradient is absent or all zeros.
    pub fn grads_are_zero(&self) -> bool {
        let mut zero = true;
        self.visit(&mut |_, t| {
            if let Some(g) = t.grad() {
                zero &= g.iter().all(|v| *v == T::zero());
            }
        });
        zero
    }
}

impl<T: Scalar> Parameterized<T> for PeftModule<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            PeftModule::Prompt(m) => {
                for (l, t) in m.tokens.iter().enumerate() {
                    f(&format!("peft.prompt.{l}"), t);
                }
            }
            PeftModule::Lora(m) => {
                for (l, x) in m.layers.iter().enumerate() {
                    f(&format!("peft.lora.{l}.a_q"), &x.a_q);
                    f(&format!("peft.lora.{l}.b_q"), &x.b_q);
                    f(&format!("peft.lora.{l}.a_v"), &x.a_v);
                    f(&format!("peft.lora.{l}.b_v"), &x.b_v);
                }
            }
            PeftModule::Adapter(m) => {
                for (l, x) in m.layers.iter().enumerate() {
                    f(&format!("peft.adapter.{l}.w_up"), &x.w_up);
                    f(&format!("peft.adapter.{l}.w_dn"), &x.w_dn);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            PeftModule::Prompt(m) => {
                for (l, t) in m.tokens.iter_mut().enumerate() {
                    f(&format!("peft.prompt.{l}"), t);
                }
            }
            PeftModule::Lora(m) => {
                for (l, x) in m.layers.iter_mut().enumerate() {
                    f(&format!("peft.lora.{l}.a_q"), &mut x.a_q);
                    f(&format!("peft.lora.{l}.b_q"), &mut x.b_q);
                    f(&format!("peft.lora.{l}.a_v"), &mut x.a_v);
                    f(&format!("peft.lora.{l}.b_v"), &mut x.b_v);
                }
            }
            PeftModule::Adapter(m) => {
                for (l, x) in m.layers.iter_mut().enumerate() {
                    f(&format!("peft.adapter.{l}.w_up"), &mut x.w_up);
                    f(&format!("peft.adapter.{l}.w_dn"), &mut x.w_dn);
                }
            }
        }
    }
}

/// Prepends layer prompt tokens `e` (`m3 × d`) to content tokens (`n × d`).
pub fn visual_prompt_apply<T: Scalar>(g: &mut Graph<T>, tokens: Var, e: Var) -> Result<Var> {
    let (dt, de) = (g.value(tokens).cols(), g.value(e).cols());
    if dt != de {
        return Err(Error::Config(format!(
            "visual prompt width {de} does not match token width {dt}"
        )));
    }
    g.concat_rows(&[e, tokens])
}

/// `x·Wᵀ + (x·Aᵀ)·Bᵀ`, the row-major form of `(W + BA)x`.
pub fn lora_apply<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, a: Var, b: Var) -> Result<Var> {
    let (ra, rb) = (g.value(a).rows(), g.value(b).cols());
    if ra != rb {
        return Err(shape_err("lora_apply", format!("A has rank {ra}, B has rank {rb}")));
    }
    let base = g.matmul_nt(x, w)?;
    let down = g.matmul_nt(x, a)?;
    let up = g.matmul_nt(down, b)?;
    g.add(base, up)
}

/// `layernorm(h + W_dn·relu(W_up·h))` applied to each row of `h`.
pub fn adapter_apply<T: Scalar>(g: &mut Graph<T>, h: Var, w_up: Var, w_dn: Var) -> Result<Var> {
    let z = g.matmul_nt(h, w_up)?;
    let z = g.relu(z);
    let f = g.matmul_nt(z, w_dn)?;
    let s = g.add(h, f)?;
    Ok(g.layernorm(s))
}
