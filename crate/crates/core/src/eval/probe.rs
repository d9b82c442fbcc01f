use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::numerics::{Tape, Tensor};
use crate::rng::{self, Domain};
use crate::sampler::{OrderScheme, PairExample};
use crate::tokenizer::Vocab;
use crate::train::{adamw_step, OptimizerConfig, TrainState};

use super::{features, LabelAccuracy, PairTaskDataset, ProbeReport, Split};

/// How the swapped-order accuracy is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeProtocol {
    /// A second head is trained on the reversed train split and scored on
    /// the reversed dev split. Both heads share init and shuffle streams.
    Refit,
    /// One head, trained in original order, scores dev in both orders.
    FixedHead,
}

impl ProbeProtocol {
    pub fn name(self) -> &'static str {
        match self {
            ProbeProtocol::Refit => "refit",
            ProbeProtocol::FixedHead => "fixed-head",
        }
    }
}

impl std::str::FromStr for ProbeProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "refit" => Ok(ProbeProtocol::Refit),
            "fixed-head" => Ok(ProbeProtocol::FixedHead),
            other => Err(Error::invalid(format!("unknown probe protocol {other:?} (expected refit or fixed-head)"))),
        }
    }
}

/// Settings for the binary head trained on top of the frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub runs: usize,
    pub seed: u64,
    pub max_len: usize,
    pub protocol: ProbeProtocol,
}

impl FinetuneConfig {
    pub fn new(seed: u64) -> Self {
        Self { epochs: 3, lr: 1e-3, batch_size: 32, weight_decay: 0.01, runs: 5, seed, max_len: 128, protocol: ProbeProtocol::Refit }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.runs == 0 || self.lr <= 0.0 {
            return Err(Error::invalid("epochs, batch size, runs and lr must be positive"));
        }
        Ok(())
    }
}

fn encode(model: &Model, vocab: &Vocab, a: &str, b: &str, max_len: usize) -> PairExample {
    PairExample::for_inference(vocab.encode(a), vocab.encode(b), max_len, model.config.num_order_classes)
}

fn head_logits(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<usize> {
    let (n, d) = x.rows_cols();
    (0..n)
        .map(|r| {
            let row = x.row(r);
            let z: Vec<f64> = (0..2).map(|c| b.data()[c] + (0..d).map(|k| row[k] * w.data()[k * 2 + c]).sum::<f64>()).collect();
            usize::from(z[1] > z[0])
        })
        .collect()
}

fn rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let d = x.rows_cols().1;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new([idx.len(), d], data)
}

fn fit_head(cfg: &FinetuneConfig, run: usize, train_x: &Tensor, train_y: &[usize]) -> Result<(Tensor, Tensor)> {
    let d = train_x.rows_cols().1;
    let mut rng = rng::stream(cfg.seed, Domain::Finetune, run as u64);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let w = Tensor::new([d, 2], (0..2 * d).map(|_| normal.sample(&mut rng)).collect());
    let params = ModelParams::from_entries(vec![("probe.weight".into(), w), ("probe.bias".into(), Tensor::zeros([2]))])?;
    let mut state = TrainState::new(params, cfg.seed);
    let opt = OptimizerConfig { lr_max: cfg.lr, weight_decay: cfg.weight_decay, ..OptimizerConfig::default() };

    let mut order: Vec<usize> = (0..train_y.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(rows(train_x, chunk));
            let w = tape.leaf(state.params.tensors()[0].clone());
            let b = tape.leaf(state.params.tensors()[1].clone());
            let z = tape.matmul(x, w);
            let z = tape.add_row(z, b);
            let loss = tape.cross_entropy(z, &labels);
            let mut g = tape.backward(loss);
            let grads = vec![g.take(w).expect("weight grad"), g.take(b).expect("bias grad")];
            adamw_step(&mut state, &grads, &opt, cfg.lr)?;
        }
    }
    let mut t = state.params.tensors().to_vec().into_iter();
    Ok((t.next().expect("weight"), t.next().expect("bias")))
}

/// Trains a fresh binary head on frozen pooled features of the pair task's
/// train split and reports dev accuracy with inputs as `(A, B)` and as
/// `(B, A)`, labels unchanged. Under [`ProbeProtocol::Refit`] the swapped
/// figure comes from a head trained on the swapped train split; under
/// [`ProbeProtocol::FixedHead`] the original head is reused. Accuracies are
/// averaged over `cfg.runs` head seeds; run `r` uses the same stream for
/// every model and both orders, so comparisons are paired.
pub fn swap_probe(model: &Model, scheme: &OrderScheme, vocab: &Vocab, dataset: &PairTaskDataset, cfg: &FinetuneConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    dataset.validate()?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::invalid(format!("vocab has {} entries, model expects {}", vocab.len(), model.config.vocab_size)));
    }
    let max_len = cfg.max_len.min(model.config.max_position);
    let train: Vec<_> = dataset.split(Split::Train).collect();
    let dev: Vec<_> = dataset.split(Split::Dev).collect();
    let train_in: Vec<PairExample> = train.iter().map(|e| encode(model, vocab, &e.a, &e.b, max_len)).collect();
    let dev_in: Vec<PairExample> = dev.iter().map(|e| encode(model, vocab, &e.a, &e.b, max_len)).collect();
    let dev_sw: Vec<PairExample> = dev.iter().map(|e| encode(model, vocab, &e.b, &e.a, max_len)).collect();
    let train_sx = match cfg.protocol {
        ProbeProtocol::Refit => {
            let train_sw: Vec<PairExample> = train.iter().map(|e| encode(model, vocab, &e.b, &e.a, max_len)).collect();
            Some(features(model, &train_sw)?)
        }
        ProbeProtocol::FixedHead => None,
    };
    let train_x = features(model, &train_in)?;
    let dev_x = features(model, &dev_in)?;
    let dev_sx = features(model, &dev_sw)?;
    let train_y: Vec<usize> = train.iter().map(|e| usize::from(e.label)).collect();
    let dev_y: Vec<usize> = dev.iter().map(|e| usize::from(e.label)).collect();

    let n = dev_y.len();
    let counts = [dev_y.iter().filter(|&&y| y == 0).count(), dev_y.iter().filter(|&&y| y == 1).count()];
    let (mut acc_o, mut acc_s) = (0.0, 0.0);
    let mut per = [0.0f64; 2];
    for run in 0..cfg.runs {
        let (w, b) = fit_head(cfg, run, &train_x, &train_y)?;
        let original = head_logits(&dev_x, &w, &b);
        let swapped = match &train_sx {
            Some(sx) => {
                let (w, b) = fit_head(cfg, run, sx, &train_y)?;
                head_logits(&dev_sx, &w, &b)
            }
            None => head_logits(&dev_sx, &w, &b),
        };
        let hit = |p: &[usize]| p.iter().zip(&dev_y).filter(|(a, b)| a == b).count() as f64 / n as f64;
        acc_o += hit(&original);
        acc_s += hit(&swapped);
        for (c, slot) in per.iter_mut().enumerate() {
            let h = original.iter().zip(&dev_y).filter(|&(&p, &y)| y == c && p == y).count();
            *slot += if counts[c] == 0 { 0.0 } else { h as f64 / counts[c] as f64 };
        }
    }
    let runs = cfg.runs as f64;
    let (acc_o, acc_s) = (acc_o / runs, acc_s / runs);
    let per_label = ["negative", "positive"]
        .iter()
        .enumerate()
        .filter(|&(c, _)| counts[c] > 0)
        .map(|(c, name)| LabelAccuracy { label: name.to_string(), count: counts[c], accuracy: per[c] / runs })
        .collect();
    Ok(ProbeReport {
        scheme: *scheme,
        n,
        runs: cfg.runs,
        accuracy_original: acc_o,
        accuracy_swapped: Some(acc_s),
        delta: Some(acc_o - acc_s),
        per_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{make_synthetic_corpus, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::sampler::SchemeKind;
    use crate::tokenizer::build_vocab;

    fn setup(pairs: usize) -> (Model, Vocab, PairTaskDataset) {
        let spec = SyntheticSpec { docs: 20, heldout_docs: 2, pair_docs: 40, pairs_per_split: pairs, ..SyntheticSpec::default() };
        let c = make_synthetic_corpus(&spec, 11).unwrap();
        let vocab = build_vocab(&c.train, 1000).unwrap();
        let cfg = ModelConfig { init_std: 0.02, ..ModelConfig::tiny(vocab.len(), 3) };
        (Model::new(cfg, 2).unwrap(), vocab, c.pairs)
    }

    #[test]
    fn deterministic_and_consistent() {
        let (m, v, ds) = setup(100);
        let cfg = FinetuneConfig { runs: 2, ..FinetuneConfig::new(5) };
        let a = swap_probe(&m, &OrderScheme::new(SchemeKind::Pn3), &v, &ds, &cfg).unwrap();
        let b = swap_probe(&m, &OrderScheme::new(SchemeKind::Pn3), &v, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.delta.unwrap(), a.accuracy_original - a.accuracy_swapped.unwrap());
        let agg: f64 = a.per_label.iter().map(|l| l.accuracy * l.count as f64).sum::<f64>() / a.n as f64;
        assert!((agg - a.accuracy_original).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&a.accuracy_original));
    }

    #[test]
    fn random_encoder_has_no_order_preference() {
        let (m, v, ds) = setup(1000);
        let r = swap_probe(&m, &OrderScheme::new(SchemeKind::Pn3), &v, &ds, &FinetuneConfig::new(1)).unwrap();
        assert_eq!(r.n, 1000);
        assert!(r.delta.unwrap().abs() < 0.05, "{r:?}");
        assert!((r.accuracy_original - 0.5).abs() < 0.1, "{r:?}");
    }

    #[test]
    fn fixed_head_shares_original_accuracy_with_refit() {
        let (m, v, ds) = setup(100);
        let refit = FinetuneConfig { runs: 2, ..FinetuneConfig::new(5) };
        let fixed = FinetuneConfig { protocol: ProbeProtocol::FixedHead, ..refit.clone() };
        let scheme = OrderScheme::new(SchemeKind::Pn3);
        let a = swap_probe(&m, &scheme, &v, &ds, &refit).unwrap();
        let b = swap_probe(&m, &scheme, &v, &ds, &fixed).unwrap();
        assert_eq!(a.accuracy_original, b.accuracy_original);
        assert_eq!(a.per_label, b.per_label);
    }

    #[test]
    fn symmetric_dataset_gives_zero_refit_delta() {
        let (m, v, mut ds) = setup(100);
        for e in &mut ds.examples {
            e.b = e.a.clone();
        }
        let r = swap_probe(&m, &OrderScheme::new(SchemeKind::Pn3), &v, &ds, &FinetuneConfig { runs: 2, ..FinetuneConfig::new(9) }).unwrap();
        assert_eq!(r.delta, Some(0.0));
    }

    #[test]
    fn protocol_names_parse() {
        for p in [ProbeProtocol::Refit, ProbeProtocol::FixedHead] {
            assert_eq!(p.name().parse::<ProbeProtocol>().unwrap(), p);
        }
        assert!("both".parse::<ProbeProtocol>().is_err());
    }

    #[test]
    fn rejects_mismatched_vocab() {
        let (m, _, ds) = setup(20);
        let v = Vocab::from_tokens(["a"]).unwrap();
        assert!(swap_probe(&m, &OrderScheme::new(SchemeKind::Pn3), &v, &ds, &FinetuneConfig::new(1)).is_err());
    }
}
