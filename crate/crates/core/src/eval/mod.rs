//! Order-classification accuracy, the input-swap probe, and the synthetic
//! corpus both are measured on.

mod probe;
mod synthetic;

use rayon::prelude::*;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{pooled_features, predict_order, Batch, Model};
use crate::numerics::Tensor;
use crate::sampler::{OrderScheme, PairExample, SchemeKind};

pub use probe::{swap_probe, FinetuneConfig, ProbeProtocol};
pub use synthetic::{make_synthetic_corpus, OrderRule, PairTaskDataset, PairTaskExample, Split, SyntheticCorpus, SyntheticSpec};

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelAccuracy {
    pub label: String,
    pub count: usize,
    pub accuracy: f64,
}

/// Accuracy summary. The swap fields are empty for plain order accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub scheme: OrderScheme,
    pub n: usize,
    pub runs: usize,
    pub accuracy_original: f64,
    pub accuracy_swapped: Option<f64>,
    pub delta: Option<f64>,
    pub per_label: Vec<LabelAccuracy>,
}

impl ProbeReport {
    /// Flat JSON object. Keys, in order: `scheme`, `smoothing_factor`, `n`,
    /// `runs`, `accuracy_original`, `accuracy_swapped`, `delta`, then
    /// `per_label_accuracy.<label>` and `per_label_count.<label>` for each
    /// label. Absent swap values are `null`.
    pub fn to_json(&self) -> String {
        let mut m = Map::new();
        m.insert("scheme".into(), Value::from(self.scheme.kind.name()));
        m.insert("smoothing_factor".into(), Value::from(self.scheme.smoothing_factor));
        m.insert("n".into(), Value::from(self.n));
        m.insert("runs".into(), Value::from(self.runs));
        m.insert("accuracy_original".into(), Value::from(self.accuracy_original));
        m.insert("accuracy_swapped".into(), self.accuracy_swapped.map_or(Value::Null, Value::from));
        m.insert("delta".into(), self.delta.map_or(Value::Null, Value::from));
        for l in &self.per_label {
            m.insert(format!("per_label_accuracy.{}", l.label), Value::from(l.accuracy));
        }
        for l in &self.per_label {
            m.insert(format!("per_label_count.{}", l.label), Value::from(l.count));
        }
        let mut s = serde_json::to_string_pretty(&Value::Object(m)).expect("plain JSON values");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |why: String| Error::format("report", why);
        let v: Map<String, Value> = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let num = |k: &str| v.get(k).and_then(Value::as_f64).ok_or_else(|| bad(format!("missing number {k}")));
        let opt = |k: &str| match v.get(k) {
            Some(Value::Null) => Ok(None),
            Some(x) => x.as_f64().map(Some).ok_or_else(|| bad(format!("{k} is not a number"))),
            None => Err(bad(format!("missing {k}"))),
        };
        let kind: SchemeKind = v.get("scheme").and_then(Value::as_str).ok_or_else(|| bad("missing scheme".into()))?.parse()?;
        let scheme = OrderScheme { smoothing_factor: num("smoothing_factor")?, ..OrderScheme::new(kind) };
        let per_label = v
            .iter()
            .filter_map(|(k, x)| Some((k.strip_prefix("per_label_accuracy.")?, x)))
            .map(|(label, x)| {
                Ok(LabelAccuracy {
                    label: label.to_string(),
                    accuracy: x.as_f64().ok_or_else(|| bad(format!("accuracy for {label}")))?,
                    count: num(&format!("per_label_count.{label}"))? as usize,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            scheme,
            n: num("n")? as usize,
            runs: num("runs")? as usize,
            accuracy_original: num("accuracy_original")?,
            accuracy_swapped: opt("accuracy_swapped")?,
            delta: opt("delta")?,
            per_label,
        })
    }
}

/// Order-head predictions, evaluated in parallel chunks.
pub fn predict_classes(model: &Model, examples: &[PairExample]) -> Result<Vec<usize>> {
    let parts: Vec<Result<Vec<usize>>> = examples
        .par_chunks(EVAL_CHUNK)
        .map(|c| {
            let b = Batch::from_examples(c, model.config.num_order_classes, model.config.max_position)?;
            b.check_vocab(model.config.vocab_size)?;
            Ok(predict_order(model, &b))
        })
        .collect();
    let mut out = Vec::with_capacity(examples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `[n, hidden]` pooled features, evaluated in parallel chunks.
pub fn features(model: &Model, examples: &[PairExample]) -> Result<Tensor> {
    let parts: Vec<Result<Tensor>> = examples
        .par_chunks(EVAL_CHUNK)
        .map(|c| {
            let b = Batch::from_examples(c, model.config.num_order_classes, model.config.max_position)?;
            b.check_vocab(model.config.vocab_size)?;
            Ok(pooled_features(model, &b))
        })
        .collect();
    let mut data = Vec::with_capacity(examples.len() * model.config.hidden);
    for p in parts {
        data.extend(p?.into_data());
    }
    Ok(Tensor::new([examples.len(), model.config.hidden], data))
}

/// Fraction of examples whose predicted class is the class the scheme
/// scores the example's label against (for smoothed in-adjacent labels,
/// the argmax of the smoothed target).
pub fn order_accuracy(model: &Model, scheme: &OrderScheme, examples: &[PairExample]) -> Result<ProbeReport> {
    if examples.is_empty() {
        return Err(Error::EmptyExamples);
    }
    if model.config.num_order_classes != scheme.num_classes() {
        return Err(Error::invalid(format!(
            "model has {} order classes, scheme {} has {}",
            model.config.num_order_classes,
            scheme.kind,
            scheme.num_classes()
        )));
    }
    if let Some(e) = examples.iter().find(|e| !scheme.emits(e.label)) {
        return Err(Error::invalid(format!("label {} is not emitted by scheme {}", e.label, scheme.kind)));
    }
    let pred = predict_classes(model, examples)?;
    let correct: Vec<bool> = examples.iter().zip(&pred).map(|(e, &p)| p == scheme.class_of(e.label)).collect();
    let per_label = scheme
        .labels()
        .iter()
        .filter_map(|&l| {
            let hits: Vec<bool> = examples.iter().zip(&correct).filter(|(e, _)| e.label == l).map(|(_, &c)| c).collect();
            (!hits.is_empty()).then(|| LabelAccuracy {
                label: l.name().to_string(),
                count: hits.len(),
                accuracy: hits.iter().filter(|&&c| c).count() as f64 / hits.len() as f64,
            })
        })
        .collect();
    Ok(ProbeReport {
        scheme: *scheme,
        n: examples.len(),
        runs: 1,
        accuracy_original: correct.iter().filter(|&&c| c).count() as f64 / examples.len() as f64,
        accuracy_swapped: None,
        delta: None,
        per_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::{stream, Domain};
    use crate::sampler::{MaskingConfig, OrderLabel, Sampler};
    use crate::tokenizer::TokenSeq;

    fn sampler(kind: SchemeKind) -> Sampler {
        let docs: Vec<Vec<TokenSeq>> =
            (0..8).map(|d| (0..6).map(|s| (0..4).map(|t| (5 + (d * 13 + s * 7 + t) % 30) as u32).collect()).collect()).collect();
        Sampler::from_encoded(docs, 40, OrderScheme::new(kind), 32, MaskingConfig::default()).unwrap()
    }

    fn balanced(kind: SchemeKind, n: usize) -> Vec<PairExample> {
        let s = sampler(kind);
        let mut r = stream(1, Domain::Heldout, 0);
        let labels = s.scheme().labels();
        (0..n)
            .map(|i| {
                let l = labels[i % labels.len()];
                let src = s.draw_source(l, &mut r).unwrap();
                s.build(src, l)
            })
            .collect()
    }

    /// Forces class `c` by making its order-head bias dominate.
    fn constant_model(classes: usize, c: usize) -> Model {
        let mut m = Model::new(ModelConfig::tiny(40, classes), 1).unwrap();
        m.params.get_mut("order_head.bias").unwrap().data_mut()[c] = 100.0;
        m
    }

    #[test]
    fn constant_classifier_on_balanced_pn3() {
        let ex = balanced(SchemeKind::Pn3, 300);
        let r = order_accuracy(&constant_model(3, 0), &OrderScheme::new(SchemeKind::Pn3), &ex).unwrap();
        assert!((r.accuracy_original - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_label[0].accuracy, 1.0);
        assert_eq!(r.per_label[1].accuracy, 0.0);
    }

    #[test]
    fn per_label_aggregates_to_overall() {
        let ex = balanced(SchemeKind::PnSmth, 250);
        let m = Model::new(ModelConfig::tiny(40, 3), 3).unwrap();
        let r = order_accuracy(&m, &OrderScheme::new(SchemeKind::PnSmth), &ex).unwrap();
        let agg: f64 = r.per_label.iter().map(|l| l.accuracy * l.count as f64).sum::<f64>() / r.n as f64;
        assert!((agg - r.accuracy_original).abs() < 1e-12);
        assert_eq!(r.per_label.len(), 5);
    }

    #[test]
    fn smoothed_inadjacent_scored_by_target_argmax() {
        let ex: Vec<PairExample> = balanced(SchemeKind::PnSmth, 50).into_iter().filter(|e| e.label == OrderLabel::IsNextInadj).collect();
        let r = order_accuracy(&constant_model(3, 0), &OrderScheme::new(SchemeKind::PnSmth), &ex).unwrap();
        assert_eq!(r.accuracy_original, 1.0);
    }

    #[test]
    fn errors() {
        let m = constant_model(3, 0);
        assert!(matches!(order_accuracy(&m, &OrderScheme::new(SchemeKind::Pn3), &[]), Err(Error::EmptyExamples)));
        let ex = balanced(SchemeKind::Pn3, 3);
        assert!(order_accuracy(&m, &OrderScheme::new(SchemeKind::Nsp2), &ex).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let ex = balanced(SchemeKind::Pn3, 30);
        let r = order_accuracy(&constant_model(3, 1), &OrderScheme::new(SchemeKind::Pn3), &ex).unwrap();
        let text = r.to_json();
        assert!(text.find("\"scheme\"").unwrap() < text.find("\"accuracy_original\"").unwrap());
        assert_eq!(ProbeReport::from_json(&text).unwrap(), r);
        let swapped = ProbeReport { accuracy_swapped: Some(0.25), delta: Some(r.accuracy_original - 0.25), runs: 5, ..r };
        assert_eq!(ProbeReport::from_json(&swapped.to_json()).unwrap(), swapped);
    }

    #[test]
    fn parallel_prediction_matches_single_batch() {
        let ex = balanced(SchemeKind::Pn3, 150);
        let m = Model::new(ModelConfig::tiny(40, 3), 4).unwrap();
        let whole = predict_order(&m, &Batch::from_examples(&ex, 3, 32).unwrap());
        assert_eq!(predict_classes(&m, &ex).unwrap(), whole);
    }
}
