use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{grad_check_many, AttentionLayout, GradCheckReport, Tape, Tensor, Var};
use crate::rng::{self, Domain, Rng};
use crate::sampler::{argmax, PairExample};

use super::{Model, ModelConfig, ModelParams};

/// A padded mini-batch in flat `[batch * seq]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub key_valid: Vec<bool>,
    /// Flat row indices (`b * seq + position`) of masked tokens.
    pub mlm_rows: Vec<usize>,
    pub mlm_labels: Vec<usize>,
    /// `[batch, classes]` soft order targets.
    pub targets: Tensor,
}

impl Batch {
    /// Pads every example to the longest one in the slice.
    pub fn from_examples(examples: &[PairExample], num_classes: usize, max_position: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyExamples);
        }
        let seq = examples.iter().map(PairExample::len).max().unwrap_or(0);
        if seq > max_position {
            return Err(Error::SequenceTooLong { len: seq, max_position });
        }
        let batch = examples.len();
        let n = batch * seq;
        let mut b = Batch {
            batch,
            seq,
            token_ids: vec![crate::tokenizer::PAD as usize; n],
            segment_ids: vec![0; n],
            position_ids: (0..n).map(|i| i % seq).collect(),
            key_valid: vec![false; n],
            mlm_rows: Vec::new(),
            mlm_labels: Vec::new(),
            targets: Tensor::zeros([batch, num_classes]),
        };
        for (i, ex) in examples.iter().enumerate() {
            if ex.target.len() != num_classes {
                return Err(Error::invalid(format!(
                    "example {i} has {} target classes, model expects {num_classes}",
                    ex.target.len()
                )));
            }
            let base = i * seq;
            for (j, (&t, &s)) in ex.tokens.iter().zip(&ex.segment_ids).enumerate() {
                b.token_ids[base + j] = t as usize;
                b.segment_ids[base + j] = s as usize;
                b.key_valid[base + j] = true;
            }
            for (&p, &l) in ex.mlm_positions.iter().zip(&ex.mlm_labels) {
                b.mlm_rows.push(base + p as usize);
                b.mlm_labels.push(l as usize);
            }
            b.targets.data_mut()[i * num_classes..(i + 1) * num_classes].copy_from_slice(&ex.target);
        }
        Ok(b)
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.token_ids.iter().chain(&self.mlm_labels).find(|&&t| t >= vocab_size) {
            Some(t) => Err(Error::invalid(format!("token id {t} outside vocabulary of {vocab_size}"))),
            None => Ok(()),
        }
    }
}

/// Tape handles for every parameter, addressable by name.
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Handles in the parameter store's canonical order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn bind_params(tape: &mut Tape, params: &ModelParams) -> ParamVars {
    let mut vars = Vec::with_capacity(params.len());
    let mut index = HashMap::with_capacity(params.len());
    for (i, (name, t)) in params.iter().enumerate() {
        vars.push(tape.leaf(t.clone()));
        index.insert(name.to_string(), i);
    }
    ParamVars { vars, index }
}

pub struct Outputs {
    /// `[batch, hidden]` tanh-pooled `[CLS]` features.
    pub pooled: Var,
    /// `[batch, classes]`.
    pub order_logits: Var,
    /// `[masked, vocab]`, absent when nothing is masked.
    pub mlm_logits: Option<Var>,
}

fn dense(tape: &mut Tape, pv: &ParamVars, x: Var, prefix: &str) -> Var {
    let h = tape.matmul(x, pv.var(&format!("{prefix}.weight")));
    tape.add_row(h, pv.var(&format!("{prefix}.bias")))
}

fn norm(tape: &mut Tape, pv: &ParamVars, x: Var, prefix: &str, eps: f64) -> Var {
    tape.layer_norm(x, pv.var(&format!("{prefix}.gamma")), pv.var(&format!("{prefix}.beta")), eps)
}

/// Records the full forward pass on `tape`.
pub fn forward_tape(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, batch: &Batch, rng: &mut Rng, train: bool) -> Outputs {
    let p = cfg.dropout;
    let eps = cfg.layer_norm_eps;

    let tok = tape.embedding(pv.var("embeddings.token"), &batch.token_ids);
    let seg = tape.embedding(pv.var("embeddings.segment"), &batch.segment_ids);
    let pos = tape.embedding(pv.var("embeddings.position"), &batch.position_ids);
    let e = tape.add(tok, seg);
    let e = tape.add(e, pos);
    let e = norm(tape, pv, e, "embeddings.ln", eps);
    let mut h = tape.dropout(e, p, rng, train);

    let layout = AttentionLayout { batch: batch.batch, seq: batch.seq, heads: cfg.heads, key_valid: batch.key_valid.clone() };
    for l in 0..cfg.layers {
        let pre = format!("layer.{l}");
        let q = dense(tape, pv, h, &format!("{pre}.attn.query"));
        let k = tape.matmul(h, pv.var(&format!("{pre}.attn.key.weight")));
        let v = dense(tape, pv, h, &format!("{pre}.attn.value"));
        let ctx = tape.attention(q, k, v, layout.clone(), p, rng, train);
        let a = dense(tape, pv, ctx, &format!("{pre}.attn.out"));
        let a = tape.dropout(a, p, rng, train);
        let a = tape.add(a, h);
        let a = norm(tape, pv, a, &format!("{pre}.attn.ln"), eps);

        let f = dense(tape, pv, a, &format!("{pre}.ffn.in"));
        let f = tape.gelu(f, cfg.gelu);
        let f = dense(tape, pv, f, &format!("{pre}.ffn.out"));
        let f = tape.dropout(f, p, rng, train);
        let f = tape.add(f, a);
        h = norm(tape, pv, f, &format!("{pre}.ffn.ln"), eps);
    }

    let cls_rows: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq).collect();
    let cls = tape.gather_rows(h, &cls_rows);
    let pooled = dense(tape, pv, cls, "pooler");
    let pooled = tape.tanh(pooled);
    let dropped = tape.dropout(pooled, p, rng, train);
    let order_logits = dense(tape, pv, dropped, "order_head");

    let mlm_logits = (!batch.mlm_rows.is_empty()).then(|| {
        let m = tape.gather_rows(h, &batch.mlm_rows);
        let m = dense(tape, pv, m, "mlm.transform");
        let m = tape.gelu(m, cfg.gelu);
        let m = norm(tape, pv, m, "mlm.ln", eps);
        let z = tape.matmul_nt(m, pv.var("embeddings.token"));
        tape.add_row(z, pv.var("mlm.output_bias"))
    });

    Outputs { pooled, order_logits, mlm_logits }
}

pub struct LossVars {
    pub total: Var,
    pub mlm: Option<Var>,
    pub order: Var,
    pub outputs: Outputs,
}

/// Mean masked-token cross-entropy plus mean soft-target order
/// cross-entropy. A batch with no masked tokens contributes only the order
/// term.
pub fn loss_tape(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, batch: &Batch, rng: &mut Rng, train: bool) -> LossVars {
    let outputs = forward_tape(tape, pv, cfg, batch, rng, train);
    let order = tape.soft_cross_entropy(outputs.order_logits, &batch.targets);
    let mlm = outputs.mlm_logits.map(|z| tape.cross_entropy(z, &batch.mlm_labels));
    let total = match mlm {
        Some(m) => tape.add(m, order),
        None => order,
    };
    LossVars { total, mlm, order, outputs }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub mlm: f64,
    pub order: f64,
    /// Fraction of rows whose argmax matches the target argmax.
    pub order_acc: f64,
    pub masked: usize,
}

impl LossValues {
    pub fn read(tape: &Tape, vars: &LossVars, batch: &Batch) -> Self {
        let logits = tape.value(vars.outputs.order_logits);
        let correct = (0..batch.batch).filter(|&r| argmax(logits.row(r)) == argmax(batch.targets.row(r))).count();
        Self {
            total: tape.value(vars.total).item(),
            mlm: vars.mlm.map_or(0.0, |m| tape.value(m).item()),
            order: tape.value(vars.order).item(),
            order_acc: correct as f64 / batch.batch as f64,
            masked: batch.mlm_rows.len(),
        }
    }
}

/// Deterministic (dropout-free) loss of `model` on `batch`.
pub fn loss_values(model: &Model, batch: &Batch) -> LossValues {
    let mut tape = Tape::new();
    let pv = bind_params(&mut tape, &model.params);
    let mut rng = crate::rng::stream(0, crate::rng::Domain::Dropout, 0);
    let vars = loss_tape(&mut tape, &pv, &model.config, batch, &mut rng, false);
    LossValues::read(&tape, &vars, batch)
}

fn eval_outputs(model: &Model, batch: &Batch) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let pv = bind_params(&mut tape, &model.params);
    let mut rng = crate::rng::stream(0, crate::rng::Domain::Dropout, 0);
    let out = forward_tape(&mut tape, &pv, &model.config, batch, &mut rng, false);
    (tape.value(out.order_logits).clone(), tape.value(out.pooled).clone())
}

/// `[batch, classes]` order logits in evaluation mode.
pub fn predict_order_logits(model: &Model, batch: &Batch) -> Tensor {
    eval_outputs(model, batch).0
}

/// Argmax order class per row.
pub fn predict_order(model: &Model, batch: &Batch) -> Vec<usize> {
    let z = predict_order_logits(model, batch);
    (0..batch.batch).map(|r| argmax(z.row(r))).collect()
}

/// `[batch, hidden]` pooled features in evaluation mode.
pub fn pooled_features(model: &Model, batch: &Batch) -> Tensor {
    eval_outputs(model, batch).1
}

/// Finite-difference check of the eval-mode loss gradient with respect to
/// every parameter of `model` at once.
pub fn check_gradients(model: &Model, batch: &Batch, eps: f64) -> Result<GradCheckReport> {
    batch.check_vocab(model.config.vocab_size)?;
    grad_check_many(
        |tape, xs| {
            let mut pv = bind_params(tape, &model.params);
            pv.vars.copy_from_slice(xs);
            let mut rng = rng::stream(0, Domain::Dropout, 0);
            loss_tape(tape, &pv, &model.config, batch, &mut rng, false).total
        },
        model.params.tensors(),
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use crate::sampler::{MaskingConfig, OrderScheme, SchemeKind, Sampler};
    use crate::tokenizer::TokenSeq;

    fn toy_sampler(kind: SchemeKind, vocab: usize) -> Sampler {
        let docs: Vec<Vec<TokenSeq>> = (0..4)
            .map(|d| (0..5).map(|s| (0..3 + (d + s) % 3).map(|t| (5 + (d * 7 + s * 3 + t) % (vocab - 5)) as u32).collect()).collect())
            .collect();
        Sampler::from_encoded(docs, vocab, OrderScheme::new(kind), 24, MaskingConfig::default()).unwrap()
    }

    fn examples(kind: SchemeKind, n: usize, seed: u64) -> Vec<PairExample> {
        let s = toy_sampler(kind, 20);
        s.sample_batch(n, &mut stream(seed, Domain::SamplerWorker, 0)).unwrap()
    }

    #[test]
    fn batch_layout() {
        let ex = examples(SchemeKind::Pn3, 3, 1);
        let b = Batch::from_examples(&ex, 3, 32).unwrap();
        assert_eq!(b.seq, ex.iter().map(|e| e.len()).max().unwrap());
        assert_eq!(b.token_ids[0], crate::tokenizer::CLS as usize);
        assert_eq!(b.key_valid.iter().filter(|&&v| v).count(), ex.iter().map(|e| e.len()).sum::<usize>());
        assert!(matches!(Batch::from_examples(&ex, 3, 4), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(Batch::from_examples(&[], 3, 4), Err(Error::EmptyExamples)));
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        let model = Model::new(ModelConfig::tiny(20, 3), 4).unwrap();
        let ex = examples(SchemeKind::Pn3, 6, 2);
        let mut rev = ex.clone();
        rev.reverse();
        let a = loss_values(&model, &Batch::from_examples(&ex, 3, 32).unwrap());
        let b = loss_values(&model, &Batch::from_examples(&rev, 3, 32).unwrap());
        assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn padding_does_not_change_predictions() {
        let model = Model::new(ModelConfig::tiny(20, 3), 5).unwrap();
        let ex = examples(SchemeKind::Pn3, 5, 3);
        let joint = predict_order_logits(&model, &Batch::from_examples(&ex, 3, 32).unwrap());
        for (i, e) in ex.iter().enumerate() {
            let alone = predict_order_logits(&model, &Batch::from_examples(std::slice::from_ref(e), 3, 32).unwrap());
            for (x, y) in alone.row(0).iter().zip(joint.row(i)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn untrained_loss_near_uniform() {
        // With init std 0.02 every logit is close to zero, so each term is
        // near the log of its class count.
        let cfg = ModelConfig { init_std: 0.02, ..ModelConfig::tiny(20, 3) };
        let model = Model::new(cfg, 6).unwrap();
        let b = Batch::from_examples(&examples(SchemeKind::Pn3, 8, 4), 3, 32).unwrap();
        let v = loss_values(&model, &b);
        assert!((v.mlm - (20f64).ln()).abs() < 0.05, "{v:?}");
        assert!(v.order > 3f64.ln() - 0.05 && v.order < 3f64.ln() + 0.05, "{v:?}");
    }

    #[test]
    fn mlm_head_is_tied_to_token_embeddings() {
        let model = Model::new(ModelConfig::tiny(20, 3), 7).unwrap();
        let b = Batch::from_examples(&examples(SchemeKind::Pn3, 4, 5), 3, 32).unwrap();
        assert!(!b.mlm_rows.is_empty());
        let mut tape = Tape::new();
        let pv = bind_params(&mut tape, &model.params);
        let mut rng = stream(0, Domain::Dropout, 0);
        let vars = loss_tape(&mut tape, &pv, &model.config, &b, &mut rng, false);
        let mlm = vars.mlm.unwrap();
        let g = tape.backward(mlm);
        // Rows of the embedding table that never appear in the input still
        // receive gradient through the output projection.
        let used: std::collections::HashSet<usize> = b.token_ids.iter().copied().collect();
        let unused = (0..20).find(|t| !used.contains(t)).expect("some id unused");
        let grad = g.get(pv.var("embeddings.token")).unwrap();
        assert!(grad.row(unused).iter().any(|x| x.abs() > 0.0));
    }

    #[test]
    fn no_masked_tokens_gives_order_loss_only() {
        let model = Model::new(ModelConfig::tiny(20, 3), 8).unwrap();
        let mut ex = examples(SchemeKind::Pn3, 3, 6);
        for e in &mut ex {
            e.tokens = e.original_tokens();
            e.mlm_positions.clear();
            e.mlm_labels.clear();
        }
        let v = loss_values(&model, &Batch::from_examples(&ex, 3, 32).unwrap());
        assert_eq!(v.mlm, 0.0);
        assert_eq!(v.masked, 0);
        assert_eq!(v.total, v.order);
    }

    #[test]
    fn train_mode_uses_dropout() {
        let model = Model::new(ModelConfig::tiny(20, 3), 9).unwrap();
        let b = Batch::from_examples(&examples(SchemeKind::Pn3, 4, 7), 3, 32).unwrap();
        let run = |train: bool, seed: u64| {
            let mut tape = Tape::new();
            let pv = bind_params(&mut tape, &model.params);
            let mut rng = stream(seed, Domain::Dropout, 0);
            let vars = loss_tape(&mut tape, &pv, &model.config, &b, &mut rng, train);
            tape.value(vars.total).item()
        };
        assert_eq!(run(false, 1), run(false, 2));
        assert_eq!(run(true, 1), run(true, 1));
        assert_ne!(run(true, 1), run(true, 2));
    }

    #[test]
    fn full_model_gradients_match_differences() {
        let cfg = ModelConfig::tiny(20, 3);
        let model = Model::new(cfg, 10).unwrap();
        let b = Batch::from_examples(&examples(SchemeKind::Pn3, 2, 8), 3, 32).unwrap();
        let report = check_gradients(&model, &b, super::super::GRAD_CHECK_EPS).unwrap();
        let (i, c) = report.worst.unwrap();
        assert!(report.max_rel_error < 1e-4, "{}[{c}]: {report:?}", model.params.names()[i]);
    }
}
