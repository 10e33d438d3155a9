//! Embedding tables, bucket pooling, input assembly and the causal
//! transformer backbone.

mod assemble;
mod forward;

pub use assemble::{assemble_sequence, Special, Token, TokenSequence};
pub use forward::{Bound, Encoded};

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};

pub const CONFIG_FILE: &str = "config.json";
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyMode {
    /// Alternating item and action tokens.
    Interleaved,
    /// One token per (item, action) pair.
    Merged,
}

impl std::str::FromStr for AssemblyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interleaved" => Ok(Self::Interleaved),
            "merged" => Ok(Self::Merged),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (interleaved|merged)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub item_vocab: usize,
    pub action_vocab: usize,
    pub user_vocab: usize,
    pub category_vocab: usize,
    /// Recent window length (iLen).
    pub max_recent: usize,
    /// Bucket budget (V).
    pub max_buckets: usize,
    /// Items kept per bucket (G).
    pub max_items_per_bucket: usize,
    pub temperature: f64,
    pub mode: AssemblyMode,
    pub use_align: bool,
    pub use_action_head: bool,
    pub use_history: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_layers: 3,
            num_heads: 8,
            ffn_expansion: 4,
            item_vocab: 1,
            action_vocab: 1,
            user_vocab: 1,
            category_vocab: 1,
            max_recent: 64,
            max_buckets: 8,
            max_items_per_bucket: 32,
            temperature: 0.1,
            mode: AssemblyMode::Interleaved,
            use_align: true,
            use_action_head: true,
            use_history: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_expansion", self.ffn_expansion),
            ("item_vocab", self.item_vocab),
            ("action_vocab", self.action_vocab),
            ("user_vocab", self.user_vocab),
            ("category_vocab", self.category_vocab),
            ("max_recent", self.max_recent),
            ("max_buckets", self.max_buckets),
            ("max_items_per_bucket", self.max_items_per_bucket),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Longest assembled sequence: four marker/user tokens, `V` history
    /// tokens and two tokens per recent interaction.
    pub fn max_len(&self) -> usize {
        4 + self.max_buckets + 2 * self.max_recent
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Positions of each parameter in [`Model::params`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ParamIdx {
    pub item: usize,
    pub category: usize,
    pub user: usize,
    pub action: usize,
    pub position: usize,
    pub special: usize,
    pub align_w: usize,
    pub align_b: usize,
    pub action_w: usize,
    pub action_b: usize,
    pub layers: Vec<LayerIdx>,
    pub final_g: usize,
    pub final_b: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Parameter shapes and their initialisation, in storage order.
fn layout(cfg: &ModelConfig) -> (Vec<(String, usize, usize, Init)>, ParamIdx) {
    let d = cfg.hidden_dim;
    let f = d * cfg.ffn_expansion;
    let mut specs = Vec::new();
    let mut add = |name: String, r: usize, c: usize, init: Init| {
        specs.push((name, r, c, init));
        specs.len() - 1
    };
    let item = add("item_emb".into(), cfg.item_vocab, d, Init::Normal);
    let category = add("category_emb".into(), cfg.category_vocab, d, Init::Normal);
    let user = add("user_emb".into(), cfg.user_vocab, d, Init::Normal);
    let action = add("action_emb".into(), cfg.action_vocab, d, Init::Normal);
    let position = add("position_emb".into(), cfg.max_len(), d, Init::Normal);
    let special = add("special_emb".into(), Special::COUNT, d, Init::Normal);
    let align_w = add("align_w".into(), d, d, Init::Normal);
    let align_b = add("align_b".into(), 1, d, Init::Zeros);
    let action_w = add("action_head_w".into(), d, cfg.action_vocab, Init::Normal);
    let action_b = add("action_head_b".into(), 1, cfg.action_vocab, Init::Zeros);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        layers.push(LayerIdx {
            ln1_g: add(p("ln1_g"), 1, d, Init::Ones),
            ln1_b: add(p("ln1_b"), 1, d, Init::Zeros),
            wq: add(p("wq"), d, d, Init::Normal),
            bq: add(p("bq"), 1, d, Init::Zeros),
            wk: add(p("wk"), d, d, Init::Normal),
            bk: add(p("bk"), 1, d, Init::Zeros),
            wv: add(p("wv"), d, d, Init::Normal),
            bv: add(p("bv"), 1, d, Init::Zeros),
            wo: add(p("wo"), d, d, Init::Normal),
            bo: add(p("bo"), 1, d, Init::Zeros),
            ln2_g: add(p("ln2_g"), 1, d, Init::Ones),
            ln2_b: add(p("ln2_b"), 1, d, Init::Zeros),
            w1: add(p("w1"), d, f, Init::Normal),
            b1: add(p("b1"), 1, f, Init::Zeros),
            w2: add(p("w2"), f, d, Init::Normal),
            b2: add(p("b2"), 1, d, Init::Zeros),
        });
    }
    let final_g = add("final_ln_g".into(), 1, d, Init::Ones);
    let final_b = add("final_ln_b".into(), 1, d, Init::Zeros);
    let idx = ParamIdx {
        item,
        category,
        user,
        action,
        position,
        special,
        align_w,
        align_b,
        action_w,
        action_b,
        layers,
        final_g,
        final_b,
    };
    (specs, idx)
}

/// Model weights with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub(crate) idx: ParamIdx,
}

impl<T: Scalar> Model<T> {
    /// Weight matrices and tables from N(0, 0.02²); biases zero, layer-norm
    /// gains one.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (specs, idx) = layout(&cfg);
        let mut rng = rng_for(seed, "model-init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid deviation");
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, r, c, init) in specs {
            let t = match init {
                Init::Normal => Tensor::from_fn(r, c, |_, _| T::lit(normal.sample(&mut rng))),
                Init::Zeros => Tensor::zeros(r, c),
                Init::Ones => Tensor::filled(r, c, T::one()),
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            cfg,
            names,
            params,
            idx,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn item_embeddings(&self) -> &Tensor<T> {
        &self.params[self.idx.item]
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// `logit_c = e · E_item[c] / τ`.
    pub fn score_items(&self, e: &[T], candidates: &[u32]) -> Result<Vec<T>> {
        let table = self.item_embeddings();
        if e.len() != table.cols() {
            return Err(Error::shape(
                "score_items",
                format!("vector of {} for dim {}", e.len(), table.cols()),
            ));
        }
        let inv_tau = T::lit(1.0 / self.cfg.temperature);
        candidates
            .iter()
            .map(|&c| {
                if c as usize >= table.rows() {
                    return Err(Error::UnknownItem(c));
                }
                Ok(crate::tensor::kernels::dot(e, table.row(c as usize)) * inv_tau)
            })
            .collect()
    }

    /// Weights, manifest and config JSON in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let named: Vec<(&str, &Tensor<T>)> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(&self.params)
            .collect();
        write_checkpoint(dir, &named)?;
        let mut json = serde_json::to_string_pretty(&self.cfg)?;
        json.push('\n');
        fs::write(dir.join(CONFIG_FILE), json)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Model::save`], checking every shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_slice(&fs::read(dir.join(CONFIG_FILE))?)?;
        let mut model = Self::new(cfg, 0)?;
        let mut stored = read_checkpoint::<T>(dir)?;
        for (name, slot) in model.names.iter().zip(model.params.iter_mut()) {
            let t = stored
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }
}
