//! Deterministic desk-scale datasets: a character-level language-modeling
//! corpus over a bracket/copy grammar, and synthetic sequence-classification
//! tasks with rule-determined labels.
//!
//! Corpora are regenerated from their seed, never stored. Generation draws
//! only integers from the rng, so corpora are bit-stable across platforms.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hard cap on generated sequence length.
pub const MAX_SEQ_LEN: usize = 1024;

pub const PAD_ID: u32 = 0;

const NUM_LETTERS: u32 = 8;
const LETTER_BASE: u32 = 7; // ids 7..15 are 'a'..'h'
const OPEN_IDS: [u32; 3] = [1, 3, 5]; // ( [ {
const CLOSE_IDS: [u32; 3] = [2, 4, 6]; // ) ] }
const SEP_ID: u32 = 15; // '.'

/// Ordered symbol list with id 0 reserved for padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocab {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocab symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::Validation("empty vocab".into()));
        }
        Ok(Vocab { symbols, index })
    }

    /// The 16-symbol character vocabulary shared by the toy tasks:
    /// pad, three bracket pairs, letters a-h, and a separator.
    pub fn toy16() -> Self {
        Vocab::new(vec![
            '_', '(', ')', '[', ']', '{', '}', 'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', '.',
        ])
        .expect("static vocab is valid")
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn decode(&self, id: u32) -> Result<char> {
        self.symbols
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Index(format!("vocab id {id} out of range")))
    }

    pub fn encode(&self, c: char) -> Result<u32> {
        self.index
            .get(&c)
            .copied()
            .ok_or_else(|| Error::Index(format!("symbol {c:?} not in vocab")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    CausalLm,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Stochastic bracket/copy grammar. Elements are either a letter repeated a
/// few times (a copy run) or a bracketed group of nested elements whose
/// closing symbol must match the opener.
#[derive(Debug, Clone)]
pub struct LmGrammar {
    pub max_depth: usize,
    /// Probability of opening a bracket group, in percent.
    pub nest_pct: u32,
    pub max_run: usize,
}

impl Default for LmGrammar {
    fn default() -> Self {
        LmGrammar {
            max_depth: 3,
            nest_pct: 40,
            max_run: 4,
        }
    }
}

impl LmGrammar {
    fn validate(&self) -> Result<()> {
        if self.nest_pct > 100 {
            return Err(Error::Param(format!(
                "nest_pct must be a percentage, got {}",
                self.nest_pct
            )));
        }
        if self.max_run == 0 || self.max_depth == 0 {
            return Err(Error::Param(
                "max_run and max_depth must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn emit_element(&self, rng: &mut ChaCha8Rng, depth: usize, out: &mut Vec<u32>, limit: usize) {
        if out.len() >= limit {
            return;
        }
        if depth < self.max_depth && rng.gen_range(0..100u32) < self.nest_pct {
            let b = rng.gen_range(0..3usize);
            out.push(OPEN_IDS[b]);
            let inner = 1 + rng.gen_range(0..2usize);
            for _ in 0..inner {
                self.emit_element(rng, depth + 1, out, limit);
            }
            out.push(CLOSE_IDS[b]);
        } else {
            let letter = LETTER_BASE + rng.gen_range(0..NUM_LETTERS);
            let run = 1 + rng.gen_range(0..self.max_run);
            for _ in 0..run {
                out.push(letter);
            }
        }
    }

    fn gen_sequence(&self, rng: &mut ChaCha8Rng, seq_len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(seq_len + 8);
        while out.len() < seq_len {
            self.emit_element(rng, 0, &mut out, seq_len);
            out.push(SEP_ID);
        }
        out.truncate(seq_len);
        out
    }
}

/// Label rules for the synthetic classification task. Labels are a pure
/// function of the token content, so the Bayes accuracy is 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsRule {
    /// Label 1 iff the fixed pattern "aba" occurs in the content.
    PatternContainment,
    /// Label = count of 'a' mod 2. Binary only.
    ParityOfSymbol,
    /// Label = class whose letter (a, b, ...) occurs strictly most often.
    MajoritySymbol,
}

impl ClsRule {
    pub fn name(self) -> &'static str {
        match self {
            ClsRule::PatternContainment => "pattern-containment",
            ClsRule::ParityOfSymbol => "parity-of-symbol",
            ClsRule::MajoritySymbol => "majority-symbol",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pattern-containment" => Ok(ClsRule::PatternContainment),
            "parity-of-symbol" => Ok(ClsRule::ParityOfSymbol),
            "majority-symbol" => Ok(ClsRule::MajoritySymbol),
            other => Err(Error::Param(format!(
                "unknown classification rule {other:?}"
            ))),
        }
    }
}

const PATTERN: [u32; 3] = [LETTER_BASE, LETTER_BASE + 1, LETTER_BASE]; // "aba"

/// Independent evaluator of a classification rule over the content prefix.
/// Returns None when the rule does not decide (e.g. tied majority).
pub fn eval_rule(
    rule: ClsRule,
    tokens: &[u32],
    content_len: usize,
    num_classes: usize,
) -> Option<u32> {
    let content = &tokens[..content_len];
    match rule {
        ClsRule::PatternContainment => {
            let hit = content.windows(PATTERN.len()).any(|w| w == PATTERN);
            Some(hit as u32)
        }
        ClsRule::ParityOfSymbol => {
            let count = content.iter().filter(|&&t| t == LETTER_BASE).count();
            Some((count % 2) as u32)
        }
        ClsRule::MajoritySymbol => {
            let counts: Vec<usize> = (0..num_classes)
                .map(|c| {
                    content
                        .iter()
                        .filter(|&&t| t == LETTER_BASE + c as u32)
                        .count()
                })
                .collect();
            let best = *counts.iter().max()?;
            let winners: Vec<usize> = (0..num_classes).filter(|&c| counts[c] == best).collect();
            if winners.len() == 1 {
                Some(winners[0] as u32)
            } else {
                None
            }
        }
    }
}

/// A generated dataset split. Sequences are fixed-length; classification
/// content is padded to `seq_len` with id 0 and remembers its content
/// length for pooled heads.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub kind: TaskKind,
    pub vocab: Vocab,
    pub seq_len: usize,
    pub num_classes: usize,
    pub split: Split,
    pub seed: u64,
    sequences: Vec<Vec<u32>>,
    labels: Option<Vec<u32>>,
    lengths: Option<Vec<usize>>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.sequences[i]
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn content_len(&self, i: usize) -> usize {
        self.lengths.as_ref().map_or(self.seq_len, |l| l[i])
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Replace labels with a seeded permutation of themselves. Used by the
    /// label-leakage check.
    pub fn with_shuffled_labels(&self, seed: u64) -> TaskDataset {
        let mut out = self.clone();
        if let Some(labels) = out.labels.as_mut() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..labels.len()).rev() {
                let j = rng.gen_range(0..=i);
                labels.swap(i, j);
            }
        }
        out
    }

    /// Content digest for determinism checks.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for seq in &self.sequences {
            for &t in seq {
                h.update(t.to_le_bytes());
            }
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                h.update(l.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// One sequence per line; classification lines append "\t<label>".
    pub fn export_text(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for i in 0..self.len() {
            let chars: String = self.sequences[i]
                .iter()
                .map(|&t| self.vocab.decode(t))
                .collect::<Result<String>>()?;
            match self.label(i) {
                Some(l) => writeln!(f, "{chars}\t{l}")?,
                None => writeln!(f, "{chars}")?,
            }
        }
        Ok(())
    }

    /// Inverse of [`TaskDataset::export_text`].
    pub fn import_text(
        path: &Path,
        kind: TaskKind,
        vocab: Vocab,
        num_classes: usize,
    ) -> Result<TaskDataset> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut sequences = Vec::new();
        let mut labels = Vec::new();
        let mut lengths = Vec::new();
        let mut seq_len = 0;
        for (ln, line) in f.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (chars, label) = match line.split_once('\t') {
                Some((c, l)) => (
                    c,
                    Some(l.parse::<u32>().map_err(|_| {
                        Error::Validation(format!("line {}: bad label {l:?}", ln + 1))
                    })?),
                ),
                None => (line.as_str(), None),
            };
            let tokens: Vec<u32> = chars
                .chars()
                .map(|c| vocab.encode(c))
                .collect::<Result<Vec<u32>>>()?;
            if seq_len == 0 {
                seq_len = tokens.len();
            } else if tokens.len() != seq_len {
                return Err(Error::Validation(format!(
                    "line {}: ragged sequence length",
                    ln + 1
                )));
            }
            let content = tokens.iter().take_while(|&&t| t != PAD_ID).count();
            lengths.push(content);
            sequences.push(tokens);
            if let Some(l) = label {
                labels.push(l);
            }
        }
        let has_labels = !labels.is_empty();
        if has_labels && labels.len() != sequences.len() {
            return Err(Error::Validation("labels on some lines only".into()));
        }
        Ok(TaskDataset {
            kind,
            vocab,
            seq_len,
            num_classes,
            split: Split::Train,
            seed: 0,
            lengths: has_labels.then_some(lengths),
            labels: has_labels.then_some(labels),
            sequences,
        })
    }
}

fn split_train_test(
    mut sequences: Vec<Vec<u32>>,
    mut labels: Option<Vec<u32>>,
    mut lengths: Option<Vec<usize>>,
    template: &TaskDataset,
) -> (TaskDataset, TaskDataset) {
    let n = sequences.len();
    let test_n = (n / 20).max(1);
    let train_n = n - test_n;
    let test_seqs = sequences.split_off(train_n);
    let test_labels = labels.as_mut().map(|l| l.split_off(train_n));
    let test_lengths = lengths.as_mut().map(|l| l.split_off(train_n));
    let train = TaskDataset {
        sequences,
        labels,
        lengths,
        split: Split::Train,
        ..template.clone()
    };
    let test = TaskDataset {
        sequences: test_seqs,
        labels: test_labels,
        lengths: test_lengths,
        split: Split::Test,
        ..template.clone()
    };
    (train, test)
}

/// Generate the language-modeling corpus and split it 95/5. Sequences are
/// deduplicated, so the splits are disjoint.
pub fn gen_lm_corpus(
    seed: u64,
    num_sequences: usize,
    seq_len: usize,
    grammar: &LmGrammar,
) -> Result<(TaskDataset, TaskDataset)> {
    grammar.validate()?;
    if seq_len < 4 || seq_len > MAX_SEQ_LEN {
        return Err(Error::Param(format!(
            "seq_len {seq_len} outside 4..={MAX_SEQ_LEN}"
        )));
    }
    if num_sequences < 20 {
        return Err(Error::Param(
            "need at least 20 sequences for a 95/5 split".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut sequences = Vec::with_capacity(num_sequences);
    let mut attempts = 0usize;
    while sequences.len() < num_sequences {
        attempts += 1;
        if attempts > num_sequences * 50 {
            return Err(Error::Param(
                "grammar too narrow to generate enough distinct sequences".into(),
            ));
        }
        let seq = grammar.gen_sequence(&mut rng, seq_len);
        if seen.insert(seq.clone()) {
            sequences.push(seq);
        }
    }
    let template = TaskDataset {
        kind: TaskKind::CausalLm,
        vocab: Vocab::toy16(),
        seq_len,
        num_classes: 0,
        split: Split::Train,
        seed,
        sequences: Vec::new(),
        labels: None,
        lengths: None,
    };
    Ok(split_train_test(sequences, None, None, &template))
}

/// Generate a classification task with class-balanced (within +/- 1),
/// rule-determined labels, split 95/5.
pub fn gen_cls_task(
    seed: u64,
    num_samples: usize,
    seq_len: usize,
    num_classes: usize,
    rule: ClsRule,
) -> Result<(TaskDataset, TaskDataset)> {
    if seq_len < 8 || seq_len > MAX_SEQ_LEN {
        return Err(Error::Param(format!(
            "seq_len {seq_len} outside 8..={MAX_SEQ_LEN}"
        )));
    }
    if num_samples < 20 {
        return Err(Error::Param(
            "need at least 20 samples for a 95/5 split".into(),
        ));
    }
    match rule {
        ClsRule::ParityOfSymbol | ClsRule::PatternContainment if num_classes != 2 => {
            return Err(Error::Param(format!(
                "{} is binary; cannot balance {num_classes} classes",
                rule.name()
            )));
        }
        ClsRule::MajoritySymbol if !(2..=NUM_LETTERS as usize).contains(&num_classes) => {
            return Err(Error::Param(format!(
                "majority-symbol supports 2..={NUM_LETTERS} classes, got {num_classes}"
            )));
        }
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Class-balanced within +/- 1: n / c each, remainder spread from class 0.
    let mut targets = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        targets.push((i % num_classes) as u32);
    }
    // Deterministic order shuffle so classes interleave.
    for i in (1..targets.len()).rev() {
        let j = rng.gen_range(0..=i);
        targets.swap(i, j);
    }

    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut sequences = Vec::with_capacity(num_samples);
    let mut labels = Vec::with_capacity(num_samples);
    let mut lengths = Vec::with_capacity(num_samples);
    for &class in &targets {
        let mut guard = 0usize;
        loop {
            guard += 1;
            if guard > 1000 {
                return Err(Error::Param(
                    "could not generate a distinct sample satisfying the rule".into(),
                ));
            }
            let content_len = rng.gen_range(seq_len / 2..=seq_len).max(8);
            let mut tokens: Vec<u32> = (0..content_len)
                .map(|_| LETTER_BASE + rng.gen_range(0..NUM_LETTERS))
                .collect();
            force_class(rule, &mut tokens, class, num_classes, &mut rng);
            debug_assert_eq!(
                eval_rule(rule, &tokens, content_len, num_classes),
                Some(class)
            );
            tokens.resize(seq_len, PAD_ID);
            if seen.insert(tokens.clone()) {
                sequences.push(tokens);
                labels.push(class);
                lengths.push(content_len);
                break;
            }
        }
    }

    let template = TaskDataset {
        kind: TaskKind::Classification,
        vocab: Vocab::toy16(),
        seq_len,
        num_classes,
        split: Split::Train,
        seed,
        sequences: Vec::new(),
        labels: None,
        lengths: None,
    };
    Ok(split_train_test(
        sequences,
        Some(labels),
        Some(lengths),
        &template,
    ))
}

/// Mutate `content` until the rule assigns `class`.
fn force_class(
    rule: ClsRule,
    content: &mut [u32],
    class: u32,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) {
    match rule {
        ClsRule::MajoritySymbol => {
            let target = LETTER_BASE + class;
            while eval_rule(rule, content, content.len(), num_classes) != Some(class) {
                let pos = rng.gen_range(0..content.len());
                if content[pos] != target {
                    content[pos] = target;
                }
            }
        }
        ClsRule::ParityOfSymbol => {
            let count = content.iter().filter(|&&t| t == LETTER_BASE).count();
            if (count % 2) as u32 != class {
                // Flip parity by adding or removing one 'a'.
                if let Some(pos) = content.iter().position(|&t| t == LETTER_BASE) {
                    content[pos] = LETTER_BASE + 1;
                } else {
                    content[0] = LETTER_BASE;
                }
            }
        }
        ClsRule::PatternContainment => {
            if class == 1 {
                let pos = rng.gen_range(0..=content.len() - PATTERN.len());
                content[pos..pos + PATTERN.len()].copy_from_slice(&PATTERN);
            } else {
                // Break every occurrence of the pattern.
                loop {
                    let hit = content.windows(PATTERN.len()).position(|w| w == PATTERN);
                    match hit {
                        Some(pos) => content[pos + 1] = LETTER_BASE + 2,
                        None => break,
                    }
                }
            }
        }
    }
}

/// One minibatch of encoded sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub labels: Option<Vec<u32>>,
    /// Per-row pooled position for classification heads (last content token).
    pub pool_positions: Option<Vec<usize>>,
    pub sample_indices: Vec<usize>,
}

/// Deterministic batch stream covering every sample exactly once.
pub fn batch_iter(
    dataset: &TaskDataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if dataset.is_empty() {
        return Err(Error::Param("batch_iter over an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Param("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut tokens = Vec::with_capacity(chunk.len() * dataset.seq_len);
        let mut labels = dataset.labels.is_some().then(Vec::new);
        let mut pools = dataset.lengths.is_some().then(Vec::new);
        for &i in chunk {
            tokens.extend_from_slice(dataset.sequence(i));
            if let Some(l) = labels.as_mut() {
                l.push(dataset.label(i).expect("labels present"));
            }
            if let Some(p) = pools.as_mut() {
                p.push(dataset.content_len(i) - 1);
            }
        }
        batches.push(Batch {
            tokens,
            batch_size: chunk.len(),
            seq_len: dataset.seq_len,
            labels,
            pool_positions: pools,
            sample_indices: chunk.to_vec(),
        });
    }
    Ok(batches)
}

/// Perplexity of the add-one-smoothed unigram model fit on `train`,
/// evaluated on the next-token targets of `test` (positions 1..L). An
/// adequately trained sequence model should beat this.
pub fn unigram_perplexity(train: &TaskDataset, test: &TaskDataset) -> f64 {
    let v = train.vocab.size();
    let mut counts = vec![1u64; v];
    let mut total = v as u64;
    for i in 0..train.len() {
        for &t in &train.sequence(i)[1..] {
            counts[t as usize] += 1;
            total += 1;
        }
    }
    let mut nll = 0.0f64;
    let mut n = 0usize;
    for i in 0..test.len() {
        for &t in &test.sequence(i)[1..] {
            nll -= (counts[t as usize] as f64 / total as f64).ln();
            n += 1;
        }
    }
    (nll / n as f64).exp()
}
