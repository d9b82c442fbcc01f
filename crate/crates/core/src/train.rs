//! AdamW pre-training with warmup plus linear decay and length phases.
//!
//! Every random draw in step `t` comes from streams keyed by `(seed, t)`,
//! so a run resumed from a checkpoint replays exactly what an
//! uninterrupted run would have done.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{bind_params, decays, loss_tape, read_tensor_file, write_tensor_file, Batch, LossValues, Model, ModelConfig, ModelParams};
use crate::numerics::{Tape, Tensor};
use crate::rng::{self, Domain};
use crate::sampler::{OrderScheme, PairExample, Sampler};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr_max: 1e-4, beta1: 0.9, beta2: 0.999, weight_decay: 0.01, eps: 1e-6 }
    }
}

impl OptimizerConfig {
    /// Peak rate for the desk-scale presets, where 1e-4 leaves the order
    /// head at chance within a few thousand steps.
    pub fn desk() -> Self {
        Self { lr_max: 1e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.beta1) || !open(self.beta2) {
            return Err(Error::invalid(format!("betas must lie in (0, 1), got {} and {}", self.beta1, self.beta2)));
        }
        if self.weight_decay < 0.0 || self.lr_max < 0.0 || self.eps <= 0.0 {
            return Err(Error::invalid("lr_max and weight_decay must be >= 0 and eps > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub steps: u64,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulePlan {
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub phases: Vec<Phase>,
}

impl SchedulePlan {
    /// One phase at `max_seq_len`.
    pub fn single(total_steps: u64, max_seq_len: usize) -> Self {
        Self { total_steps, warmup_fraction: 0.1, phases: vec![Phase { steps: total_steps, max_seq_len }] }
    }

    /// 128-token phase then 512-token phase, split 5:4.
    pub fn two_phase(total_steps: u64) -> Self {
        let first = total_steps * 5 / 9;
        Self {
            total_steps,
            warmup_fraction: 0.1,
            phases: vec![
                Phase { steps: first, max_seq_len: 128 },
                Phase { steps: total_steps - first, max_seq_len: 512 },
            ],
        }
    }

    /// Full-scale base recipe: 50K steps at 128 tokens, 40K at 512.
    pub fn base_preset() -> Self {
        Self::two_phase(90_000)
    }

    /// Parses `len:steps[,len:steps...]`.
    pub fn parse_phases(text: &str) -> Result<Vec<Phase>> {
        text.split(',')
            .map(|part| {
                let (len, steps) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::invalid(format!("phase {part:?} is not len:steps")))?;
                let bad = || Error::invalid(format!("phase {part:?} is not len:steps"));
                Ok(Phase { max_seq_len: len.trim().parse().map_err(|_| bad())?, steps: steps.trim().parse().map_err(|_| bad())? })
            })
            .collect()
    }

    pub fn format_phases(&self) -> String {
        self.phases.iter().map(|p| format!("{}:{}", p.max_seq_len, p.steps)).collect::<Vec<_>>().join(",")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::invalid(format!("warmup fraction {} not in (0, 1)", self.warmup_fraction)));
        }
        if self.phases.is_empty() {
            return Err(Error::invalid("schedule has no phases"));
        }
        let sum: u64 = self.phases.iter().map(|p| p.steps).sum();
        if sum != self.total_steps {
            return Err(Error::invalid(format!("phase steps sum to {sum}, total is {}", self.total_steps)));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    /// Longest sequence any phase produces.
    pub fn max_seq_len(&self) -> usize {
        self.phases.iter().map(|p| p.max_seq_len).max().unwrap_or(0)
    }

    /// Phase index that runs update `step` (0-based).
    pub fn phase_of(&self, step: u64) -> usize {
        let mut end = 0;
        for (i, p) in self.phases.iter().enumerate() {
            end += p.steps;
            if step < end {
                return i;
            }
        }
        self.phases.len() - 1
    }

    /// Cumulative step count at the end of each phase.
    pub fn boundaries(&self) -> Vec<u64> {
        self.phases
            .iter()
            .scan(0, |acc, p| {
                *acc += p.steps;
                Some(*acc)
            })
            .collect()
    }
}

/// Linear warmup to `lr_max` over the first `warmup_fraction` of the run,
/// then linear decay to zero at `total_steps`.
pub fn lr_at(step: u64, plan: &SchedulePlan, opt: &OptimizerConfig) -> f64 {
    let total = plan.total_steps as f64;
    let s = step.min(plan.total_steps) as f64;
    let w = plan.warmup_steps();
    if s == 0.0 || total == 0.0 {
        0.0
    } else if s <= w {
        opt.lr_max * s / w
    } else {
        opt.lr_max * (total - s) / (total - w)
    }
}

/// Parameters plus AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Updates applied so far.
    pub step: u64,
    pub seed: u64,
    pub params: ModelParams,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Batches that happened to contain no masked token.
    pub empty_mlm_batches: u64,
}

pub const OPTIM_MAGIC: &str = "SENTORDER-OPTIM 1";

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { step: 0, seed, params, m: zeros.clone(), v: zeros, empty_mlm_batches: 0 }
    }

    /// Writes `model.bin` and `optim.bin` under `dir`.
    pub fn save(&self, dir: &Path, config: &ModelConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let model = Model { config: config.clone(), params: self.params.clone() };
        model.save(&dir.join("model.bin"))?;
        let header = format!("step={}\nseed={}\nempty_mlm_batches={}\n", self.step, self.seed, self.empty_mlm_batches);
        let names: Vec<(String, &Tensor)> = self
            .params
            .names()
            .iter()
            .zip(&self.m)
            .map(|(n, t)| (format!("m.{n}"), t))
            .chain(self.params.names().iter().zip(&self.v).map(|(n, t)| (format!("v.{n}"), t)))
            .collect();
        let refs: Vec<(&str, &Tensor)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_tensor_file(&dir.join("optim.bin"), OPTIM_MAGIC, &header, &refs)
    }

    /// [`TrainState::save`] plus the scheme the order head was trained on.
    pub fn save_checkpoint(&self, dir: &Path, config: &ModelConfig, scheme: &OrderScheme) -> Result<()> {
        self.save(dir, config)?;
        let p = dir.join("scheme.txt");
        fs::write(&p, scheme.to_kv()).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<(ModelConfig, Self)> {
        let model = Model::load(&dir.join("model.bin"))?;
        let path = dir.join("optim.bin");
        let (header, tensors) = read_tensor_file(&path, OPTIM_MAGIC)?;
        let what = path.display().to_string();
        let field = |key: &str| -> Result<u64> {
            header
                .lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::format(what.clone(), format!("missing {key}")))
        };
        let n = model.params.len();
        if tensors.len() != 2 * n {
            return Err(Error::format(what, format!("expected {} moment tensors, found {}", 2 * n, tensors.len())));
        }
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            let (prefix, dst) = if i < n { ("m.", &mut m) } else { ("v.", &mut v) };
            let pname = &model.params.names()[i % n];
            if name != format!("{prefix}{pname}") || t.shape() != model.params.tensors()[i % n].shape() {
                return Err(Error::format(what, format!("moment {name} does not match parameter {pname}")));
            }
            dst.push(t);
        }
        let state = Self {
            step: field("step")?,
            seed: field("seed")?,
            empty_mlm_batches: field("empty_mlm_batches")?,
            params: model.params,
            m,
            v,
        };
        Ok((model.config, state))
    }
}

/// One bias-corrected Adam update followed by decoupled weight decay on
/// the parameters `decays` selects. Fails before touching any parameter if
/// a gradient is not finite.
pub fn adamw_step(state: &mut TrainState, grads: &[Tensor], opt: &OptimizerConfig, lr: f64) -> Result<()> {
    assert_eq!(grads.len(), state.params.len(), "one gradient per parameter");
    for (name, g) in state.params.names().iter().zip(grads) {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone(), step: state.step });
        }
    }
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let names: Vec<bool> = state.params.names().iter().map(|n| decays(n)).collect();
    state
        .params
        .tensors_mut()
        .par_iter_mut()
        .zip(state.m.par_iter_mut())
        .zip(state.v.par_iter_mut())
        .zip(grads.par_iter())
        .zip(names.par_iter())
        .for_each(|((((p, m), v), g), &decay)| {
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + opt.eps);
                if decay {
                    *p -= lr * opt.weight_decay * *p;
                }
            }
        });
    state.step += 1;
    Ok(())
}

/// Batch-level loss and gradients. The batch is cut into fixed-size chunks
/// that run on separate tapes; each chunk's terms are weighted so the sum
/// equals the whole-batch means. Chunking depends only on `chunk_size`, so
/// results do not change with the thread count.
pub fn loss_and_grads(
    params: &ModelParams,
    cfg: &ModelConfig,
    examples: &[PairExample],
    chunk_size: usize,
    dropout_seed: (u64, u64),
    train: bool,
) -> Result<(LossValues, Vec<Tensor>)> {
    if examples.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let chunks: Vec<&[PairExample]> = examples.chunks(chunk_size.max(1)).collect();
    let total_masked: usize = examples.iter().map(|e| e.mlm_positions.len()).sum();
    let rows = examples.len() as f64;
    let results: Vec<Result<(LossValues, Vec<Tensor>)>> = chunks
        .par_iter()
        .enumerate()
        .map(|(c, chunk)| {
            let batch = Batch::from_examples(chunk, cfg.num_order_classes, cfg.max_position)?;
            batch.check_vocab(cfg.vocab_size)?;
            let mut tape = Tape::new();
            let pv = bind_params(&mut tape, params);
            let (seed, step) = dropout_seed;
            let mut rng = rng::stream(seed, Domain::Dropout, step * 4096 + c as u64);
            let vars = loss_tape(&mut tape, &pv, cfg, &batch, &mut rng, train);
            let order_w = batch.batch as f64 / rows;
            let order = tape.scale(vars.order, order_w);
            let objective = match vars.mlm {
                Some(m) => {
                    let m = tape.scale(m, batch.mlm_rows.len() as f64 / total_masked as f64);
                    tape.add(m, order)
                }
                None => order,
            };
            let vals = LossValues::read(&tape, &vars, &batch);
            let mut g = tape.backward(objective);
            let grads = pv
                .vars()
                .iter()
                .zip(params.tensors())
                .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            Ok((vals, grads))
        })
        .collect();

    let mut sum = LossValues { total: 0.0, mlm: 0.0, order: 0.0, order_acc: 0.0, masked: total_masked };
    let mut grads: Option<Vec<Tensor>> = None;
    for (chunk, r) in chunks.iter().zip(results) {
        let (vals, g) = r?;
        let w = chunk.len() as f64 / rows;
        if vals.masked > 0 {
            sum.mlm += vals.mlm * vals.masked as f64 / total_masked as f64;
        }
        sum.order += vals.order * w;
        sum.order_acc += vals.order_acc * w;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    sum.total = sum.mlm + sum.order;
    Ok((sum, grads.expect("at least one chunk")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub metrics_every: u64,
    pub chunk_size: usize,
    pub seed: u64,
    /// Stop after this many updates and checkpoint to `step-<n>`.
    pub stop_at: Option<u64>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self { batch_size: 32, metrics_every: 20, chunk_size: 4, seed, stop_at: None }
    }
}

/// Model and scheme stored in a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, OrderScheme)> {
    let model = Model::load(&dir.join("model.bin"))?;
    let p = dir.join("scheme.txt");
    let scheme = OrderScheme::from_kv(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
    if scheme.num_classes() != model.config.num_order_classes {
        return Err(Error::format(dir.display().to_string(), "scheme and order head disagree on class count"));
    }
    Ok((model, scheme))
}

pub const METRICS_HEADER: &str = "step,lr,mlm_loss,order_loss,order_acc";

/// One metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub mlm_loss: f64,
    pub order_loss: f64,
    pub order_acc: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.lr, self.mlm_loss, self.order_loss, self.order_acc)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::format("metrics", format!("bad row {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            mlm_loss: num(f[2])?,
            order_loss: num(f[3])?,
            order_acc: num(f[4])?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format(path.display().to_string(), "missing metrics header"));
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse).collect()
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub model: Model,
    pub state_step: u64,
    /// Directory holding the last checkpoint written.
    pub checkpoint: PathBuf,
    pub metrics: Vec<MetricsRow>,
    pub empty_mlm_batches: u64,
}

struct MetricsSink {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl MetricsSink {
    /// Starts a fresh file, or keeps the rows up to `resume_step` of an
    /// existing one.
    fn open(path: &Path, resume_step: Option<u64>) -> Result<(Self, Vec<MetricsRow>)> {
        let kept = match resume_step {
            Some(s) if path.exists() => read_metrics(path)?.into_iter().filter(|r| r.step <= s).collect(),
            _ => Vec::new(),
        };
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut sink = Self { path: path.to_path_buf(), out: BufWriter::new(file) };
        sink.line(METRICS_HEADER)?;
        for r in &kept {
            sink.line(&r.to_csv())?;
        }
        Ok((sink, kept))
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs (or resumes) pre-training and writes `metrics.csv` plus
/// checkpoints under `out`: `phase-<i>` at interior phase boundaries,
/// `step-<n>` when stopped early, `final` at the end.
pub fn pretrain(
    sampler: &Sampler,
    model_cfg: &ModelConfig,
    opt: &OptimizerConfig,
    plan: &SchedulePlan,
    tc: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    opt.validate()?;
    plan.validate()?;
    model_cfg.validate()?;
    if tc.batch_size == 0 || tc.metrics_every == 0 {
        return Err(Error::invalid("batch size and metrics cadence must be positive"));
    }
    if model_cfg.vocab_size != sampler.vocab_size() {
        return Err(Error::invalid(format!(
            "model vocab {} differs from sampler vocab {}",
            model_cfg.vocab_size,
            sampler.vocab_size()
        )));
    }
    if model_cfg.num_order_classes != sampler.scheme().num_classes() {
        return Err(Error::invalid(format!(
            "model has {} order classes, scheme {} has {}",
            model_cfg.num_order_classes,
            sampler.scheme().kind,
            sampler.scheme().num_classes()
        )));
    }
    if model_cfg.max_position < plan.max_seq_len() {
        return Err(Error::invalid(format!(
            "max_position {} is shorter than the longest phase ({})",
            model_cfg.max_position,
            plan.max_seq_len()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut state = match resume {
        None => TrainState::new(ModelParams::init(model_cfg, tc.seed)?, tc.seed),
        Some(dir) => {
            let (cfg, st) = TrainState::load(dir)?;
            if &cfg != model_cfg {
                return Err(Error::invalid(format!("checkpoint {} has a different model config", dir.display())));
            }
            if st.seed != tc.seed {
                return Err(Error::invalid(format!("checkpoint seed {} differs from --seed {}", st.seed, tc.seed)));
            }
            if st.step > plan.total_steps {
                return Err(Error::invalid(format!("checkpoint step {} beyond total {}", st.step, plan.total_steps)));
            }
            st
        }
    };
    let (mut sink, mut rows) = MetricsSink::open(&out.join("metrics.csv"), resume.map(|_| state.step))?;

    let end = tc.stop_at.map_or(plan.total_steps, |s| s.min(plan.total_steps));
    let boundaries = plan.boundaries();
    let mut phase_sampler: Option<(usize, Sampler)> = None;
    let result = (|| -> Result<PathBuf> {
        while state.step < end {
            let t = state.step;
            let phase = plan.phase_of(t);
            if phase_sampler.as_ref().map(|(i, _)| *i) != Some(phase) {
                phase_sampler = Some((phase, sampler.with_max_len(plan.phases[phase].max_seq_len)?));
            }
            let s = &phase_sampler.as_ref().expect("phase sampler").1;
            let examples = s.sample_batch(tc.batch_size, &mut rng::stream(tc.seed, Domain::TrainBatch, t))?;
            let (vals, grads) = loss_and_grads(&state.params, model_cfg, &examples, tc.chunk_size, (tc.seed, t), true)?;
            let lr = lr_at(t, plan, opt);
            adamw_step(&mut state, &grads, opt, lr)?;
            if vals.masked == 0 {
                state.empty_mlm_batches += 1;
            }
            if state.step % tc.metrics_every == 0 {
                let row = MetricsRow { step: state.step, lr, mlm_loss: vals.mlm, order_loss: vals.order, order_acc: vals.order_acc };
                sink.line(&row.to_csv())?;
                rows.push(row);
            }
            if let Some(i) = boundaries[..boundaries.len() - 1].iter().position(|&b| b == state.step) {
                state.save_checkpoint(&out.join(format!("phase-{}", i + 1)), model_cfg, sampler.scheme())?;
            }
        }
        let dir = if state.step < plan.total_steps { out.join(format!("step-{}", state.step)) } else { out.join("final") };
        state.save_checkpoint(&dir, model_cfg, sampler.scheme())?;
        Ok(dir)
    })();
    sink.flush()?;
    let checkpoint = result?;
    Ok(TrainSummary {
        state_step: state.step,
        empty_mlm_batches: state.empty_mlm_batches,
        model: Model { config: model_cfg.clone(), params: state.params },
        checkpoint,
        metrics: rows,
    })
}
