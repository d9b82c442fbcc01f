//! Synthetic corpus with order that is recoverable from text alone.
//!
//! The vocabulary is partitioned into `M` steps of equal-sized word pools,
//! arranged in one global cycle `0 -> 1 -> ... -> M-1 -> 0`. A document
//! starts at a random step and advances one step per sentence, and every
//! word of a sentence comes from the pool of its step. The follower of a
//! sentence is the sentence one step further round the cycle, so any token
//! of either sentence identifies the relation. Pairs drawn from different
//! documents land on adjacent steps with probability `2/M`. Word spellings
//! are drawn from the seed, so two seeds produce disjoint vocabularies.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::CorpusStore;
use crate::error::{Error, Result};
use crate::rng::{self, Domain, Rng};
use crate::sampler::OrderLabel;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Pre-training documents.
    pub docs: usize,
    pub sentences: usize,
    /// Documents reserved for held-out order evaluation.
    pub heldout_docs: usize,
    /// Documents the pair task is drawn from (half train, half dev).
    pub pair_docs: usize,
    /// Pair-task examples per split.
    pub pairs_per_split: usize,
    /// Distinct words over all steps.
    pub vocab_size: usize,
    /// Length of the step cycle.
    pub cycle: usize,
    pub words_min: usize,
    pub words_max: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            docs: 200,
            sentences: 12,
            heldout_docs: 50,
            pair_docs: 200,
            pairs_per_split: 1000,
            vocab_size: 96,
            cycle: 24,
            words_min: 3,
            words_max: 8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cycle < 3 {
            return Err(Error::invalid(format!("need a cycle of at least 3 steps, got {}", self.cycle)));
        }
        if self.vocab_size < 2 * self.cycle {
            return Err(Error::invalid(format!(
                "vocab size {} gives fewer than 2 words per step for {} steps",
                self.vocab_size, self.cycle
            )));
        }
        if self.sentences < 3 || self.docs < 2 || self.heldout_docs < 2 {
            return Err(Error::invalid("need >= 3 sentences per document and >= 2 training and held-out documents"));
        }
        if self.pairs_per_split > 0 && self.pair_docs < 4 {
            return Err(Error::invalid("the pair task needs at least 4 documents"));
        }
        if self.words_min == 0 || self.words_min > self.words_max {
            return Err(Error::invalid("sentence length range must be non-empty and start at 1 or more"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairTaskExample {
    pub split: Split,
    pub a: String,
    pub b: String,
    pub label: bool,
}

/// Binary sentence-pair task: positive when `b` directly follows `a` in
/// its document, negative when the two come from different documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairTaskDataset {
    pub examples: Vec<PairTaskExample>,
}

impl PairTaskDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairTaskExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// Label balance within 45-55% per split and no sentence shared across
    /// splits.
    pub fn validate(&self) -> Result<()> {
        for split in [Split::Train, Split::Dev] {
            let n = self.split(split).count();
            if n == 0 {
                return Err(Error::format("pair task", format!("{} split is empty", split.name())));
            }
            let pos = self.split(split).filter(|e| e.label).count() as f64 / n as f64;
            if !(0.45..=0.55).contains(&pos) {
                return Err(Error::format("pair task", format!("{} split has {pos:.3} positives", split.name())));
            }
        }
        let train: HashSet<&str> = self.split(Split::Train).flat_map(|e| [e.a.as_str(), e.b.as_str()]).collect();
        if let Some(e) = self.split(Split::Dev).find(|e| train.contains(e.a.as_str()) || train.contains(e.b.as_str())) {
            return Err(Error::format("pair task", format!("dev sentence also in train: {:?}", e.a)));
        }
        Ok(())
    }

    /// TSV with a header line: `split label sentence_a sentence_b`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("split\tlabel\tsentence_a\tsentence_b\n");
        for e in &self.examples {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.split.name(), u8::from(e.label), e.a, e.b);
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some("split\tlabel\tsentence_a\tsentence_b") {
            return Err(Error::format("pair task", "missing header"));
        }
        let mut examples = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            let bad = |why: &str| Error::format("pair task", format!("line {}: {why}", i + 2));
            if f.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            let split = match f[0] {
                "train" => Split::Train,
                "dev" => Split::Dev,
                _ => return Err(bad("split must be train or dev")),
            };
            let label = match f[1] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label must be 0 or 1")),
            };
            examples.push(PairTaskExample { split, a: f[2].to_string(), b: f[3].to_string(), label });
        }
        let ds = Self { examples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: CorpusStore,
    pub heldout: CorpusStore,
    pub pairs: PairTaskDataset,
    /// Word pools in cycle order.
    pub pools: Vec<Vec<String>>,
}

fn random_word(rng: &mut Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let w: String = (0..7).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

const MAX_ATTEMPTS: usize = 10_000;

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    pools: Vec<Vec<String>>,
    seen: HashSet<String>,
}

impl Generator<'_> {
    fn sentence(&mut self, step: usize, rng: &mut Rng) -> Result<String> {
        let pool = &self.pools[step];
        for _ in 0..MAX_ATTEMPTS {
            let n = rng.random_range(self.spec.words_min..=self.spec.words_max);
            let words: Vec<&str> = (0..n).map(|_| pool[rng.random_range(0..pool.len())].as_str()).collect();
            let s = format!("{} .", words.join(" "));
            if self.seen.insert(s.clone()) {
                return Ok(s);
            }
        }
        Err(Error::invalid("word pools too small to keep sentences distinct; raise vocab size or sentence length"))
    }

    fn document(&mut self, rng: &mut Rng) -> Result<Vec<String>> {
        let start = rng.random_range(0..self.spec.cycle);
        (0..self.spec.sentences).map(|i| self.sentence((start + i) % self.spec.cycle, rng)).collect()
    }

    fn documents(&mut self, n: usize, rng: &mut Rng) -> Result<Vec<Vec<String>>> {
        (0..n).map(|_| self.document(rng)).collect()
    }
}

/// Generates pre-training, held-out and pair-task data from `seed`.
pub fn make_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = rng::stream(seed, Domain::Synthetic, 0);
    let mut taken = HashSet::new();
    let per_step = spec.vocab_size / spec.cycle;
    let pools: Vec<Vec<String>> =
        (0..spec.cycle).map(|_| (0..per_step).map(|_| random_word(&mut rng, &mut taken)).collect()).collect();
    let mut g = Generator { spec, pools, seen: HashSet::new() };

    let train = CorpusStore::from_documents(g.documents(spec.docs, &mut rng)?)?;
    let heldout = CorpusStore::from_documents(g.documents(spec.heldout_docs, &mut rng)?)?;
    let pair_docs = g.documents(spec.pair_docs, &mut rng)?;
    let rule = OrderRule::new(&g.pools);

    let mut examples = Vec::with_capacity(2 * spec.pairs_per_split);
    if spec.pairs_per_split > 0 {
        let (tr, dv) = pair_docs.split_at(pair_docs.len() / 2);
        for (split, docs) in [(Split::Train, tr), (Split::Dev, dv)] {
            let mut part = Vec::with_capacity(spec.pairs_per_split);
            for k in 0..spec.pairs_per_split {
                let d = rng.random_range(0..docs.len());
                let (a, b, label) = if k % 2 == 0 {
                    let i = rng.random_range(0..docs[d].len() - 1);
                    (docs[d][i].clone(), docs[d][i + 1].clone(), true)
                } else {
                    loop {
                        let e = (d + rng.random_range(1..docs.len())) % docs.len();
                        let a = &docs[d][rng.random_range(0..docs[d].len())];
                        let b = &docs[e][rng.random_range(0..docs[e].len())];
                        if rule.relation(a, b).is_none() {
                            break (a.clone(), b.clone(), false);
                        }
                    }
                };
                part.push(PairTaskExample { split, a, b, label });
            }
            part.shuffle(&mut rng);
            examples.extend(part);
        }
    }
    let pairs = PairTaskDataset { examples };
    if spec.pairs_per_split > 0 {
        pairs.validate()?;
    }
    Ok(SyntheticCorpus { train, heldout, pairs, pools: g.pools })
}

impl SyntheticCorpus {
    /// Writes `train.txt`, `heldout.txt`, `pairs.tsv` and `steps.txt` (one
    /// line of pool words per step, in cycle order).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("train.txt", self.train.to_text())?;
        write("heldout.txt", self.heldout.to_text())?;
        write("steps.txt", self.pools.iter().map(|p| p.join(" ") + "\n").collect())?;
        self.pairs.save(&dir.join("pairs.tsv"))
    }
}

/// The generator's own ordering rule, usable as an oracle.
#[derive(Debug, Clone)]
pub struct OrderRule {
    index: HashMap<String, usize>,
    steps: usize,
}

impl OrderRule {
    pub fn new(pools: &[Vec<String>]) -> Self {
        let index = pools.iter().enumerate().flat_map(|(i, p)| p.iter().map(move |w| (w.clone(), i))).collect();
        Self { index, steps: pools.len() }
    }

    /// Step of the sentence's first word.
    pub fn step_of(&self, sentence: &str) -> Option<usize> {
        sentence.split_whitespace().next().and_then(|w| self.index.get(w).copied())
    }

    /// `IsNext` when `b`'s step succeeds `a`'s, `IsPrev` for the reverse.
    pub fn relation(&self, a: &str, b: &str) -> Option<OrderLabel> {
        let (ma, mb) = (self.step_of(a)?, self.step_of(b)?);
        let m = self.steps;
        if mb == (ma + 1) % m {
            Some(OrderLabel::IsNext)
        } else if ma == (mb + 1) % m {
            Some(OrderLabel::IsPrev)
        } else {
            None
        }
    }
}
