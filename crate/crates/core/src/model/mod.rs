//! BERT-style encoder with a pooled order-classification head and a tied
//! masked-LM head.

mod checkpoint;
mod forward;

use std::collections::HashMap;
use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{GeluKind, Tensor};
use crate::rng::{self, Domain};

pub use checkpoint::{read_tensor_file, write_tensor_file, MODEL_MAGIC};
pub use forward::{bind_params, check_gradients, forward_tape, loss_tape, loss_values, pooled_features, predict_order, predict_order_logits, Batch, LossValues, LossVars, Outputs, ParamVars};

/// Finite-difference step used for whole-model gradient checks.
pub const GRAD_CHECK_EPS: f64 = 3e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub type_vocab: usize,
    pub num_order_classes: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub gelu: GeluKind,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, 4 heads, hidden 64, ffn 256.
    pub fn desk(vocab_size: usize, num_order_classes: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn: 256,
            vocab_size,
            max_position: 128,
            type_vocab: 2,
            num_order_classes,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            gelu: GeluKind::Tanh,
            init_std: 0.02,
        }
    }

    /// BERT-base geometry.
    pub fn base(vocab_size: usize, num_order_classes: usize) -> Self {
        Self {
            layers: 12,
            heads: 12,
            hidden: 768,
            ffn: 3072,
            max_position: 512,
            ..Self::desk(vocab_size, num_order_classes)
        }
    }

    /// Gradient-check size: 2 layers, 2 heads, hidden 16. The wider init
    /// keeps every gradient coordinate well above finite-difference noise.
    pub fn tiny(vocab_size: usize, num_order_classes: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 16,
            ffn: 32,
            max_position: 32,
            init_std: 0.3,
            ..Self::desk(vocab_size, num_order_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.ffn == 0 || self.max_position == 0 || self.type_vocab != 2 {
            return fail("ffn and max_position must be positive and type_vocab must be 2".into());
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS {
            return fail(format!("vocab_size {} has no ordinary tokens", self.vocab_size));
        }
        if self.num_order_classes < 2 {
            return fail("need at least two order classes".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 || self.init_std < 0.0 {
            return fail("layer_norm_eps must be > 0 and init_std >= 0".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.kv_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("hidden", self.hidden.to_string()),
            ("ffn", self.ffn.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_position", self.max_position.to_string()),
            ("type_vocab", self.type_vocab.to_string()),
            ("num_order_classes", self.num_order_classes.to_string()),
            ("dropout", self.dropout.to_string()),
            ("layer_norm_eps", self.layer_norm_eps.to_string()),
            (
                "gelu",
                match self.gelu {
                    GeluKind::Tanh => "tanh".into(),
                    GeluKind::Erf => "erf".into(),
                },
            ),
            ("init_std", self.init_std.to_string()),
        ]
    }

    /// Sets one field from its `key=value` spelling. Returns `false` for
    /// keys that are not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
        }
        match key {
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "ffn" => self.ffn = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "max_position" => self.max_position = num(key, value)?,
            "type_vocab" => self.type_vocab = num(key, value)?,
            "num_order_classes" => self.num_order_classes = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "gelu" => {
                self.gelu = match value.trim() {
                    "tanh" => GeluKind::Tanh,
                    "erf" => GeluKind::Erf,
                    other => return Err(Error::invalid(format!("unknown gelu {other:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::desk(0, 0);
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("model config", format!("expected key=value, got {line:?}")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::format("model config", format!("unknown key {}", k.trim())));
            }
            seen.push(k.trim().to_string());
        }
        for (k, _) in cfg.kv_pairs() {
            if !seen.iter().any(|s| s == k) {
                return Err(Error::format("model config", format!("missing key {k}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.hidden, self.ffn);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![self.vocab_size, d]),
            ("embeddings.segment".to_string(), vec![self.type_vocab, d]),
            ("embeddings.position".to_string(), vec![self.max_position, d]),
            ("embeddings.ln.gamma".to_string(), vec![d]),
            ("embeddings.ln.beta".to_string(), vec![d]),
        ];
        for l in 0..self.layers {
            let p = format!("layer.{l}");
            for (name, shape) in [
                ("attn.query.weight", vec![d, d]),
                ("attn.query.bias", vec![d]),
                ("attn.key.weight", vec![d, d]),
                ("attn.value.weight", vec![d, d]),
                ("attn.value.bias", vec![d]),
                ("attn.out.weight", vec![d, d]),
                ("attn.out.bias", vec![d]),
                ("attn.ln.gamma", vec![d]),
                ("attn.ln.beta", vec![d]),
                ("ffn.in.weight", vec![d, f]),
                ("ffn.in.bias", vec![f]),
                ("ffn.out.weight", vec![f, d]),
                ("ffn.out.bias", vec![d]),
                ("ffn.ln.gamma", vec![d]),
                ("ffn.ln.beta", vec![d]),
            ] {
                out.push((format!("{p}.{name}"), shape));
            }
        }
        out.extend([
            ("pooler.weight".to_string(), vec![d, d]),
            ("pooler.bias".to_string(), vec![d]),
            ("order_head.weight".to_string(), vec![d, self.num_order_classes]),
            ("order_head.bias".to_string(), vec![self.num_order_classes]),
            ("mlm.transform.weight".to_string(), vec![d, d]),
            ("mlm.transform.bias".to_string(), vec![d]),
            ("mlm.ln.gamma".to_string(), vec![d]),
            ("mlm.ln.beta".to_string(), vec![d]),
            ("mlm.output_bias".to_string(), vec![self.vocab_size]),
        ]);
        out
    }
}

/// Biases and layer-norm affine parameters are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with("output_bias"))
}

/// Named parameter tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Truncation-free normal init for weights and embeddings, ones for
    /// layer-norm gains, zeros for biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, Domain::Init, 0);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::invalid(e.to_string()))?;
        let entries = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gamma") {
                    vec![1.0; n]
                } else if !decays(&name) {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut r)).collect()
                };
                (name, Tensor::new(shape, data))
            })
            .collect();
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::format("parameters", format!("duplicate name {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks the name set and shapes against `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.param_shapes();
        if expected.len() != self.len() {
            return Err(Error::format("parameters", format!("expected {} tensors, found {}", expected.len(), self.len())));
        }
        for (name, shape) in expected {
            match self.get(&name) {
                None => return Err(Error::format("parameters", format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::format("parameters", format!("{name} has shape {:?}, expected {shape:?}", t.shape())))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }
}
