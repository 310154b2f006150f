//! Vocabulary, tokenization, JSONL datasets and synthetic stand-in tasks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{TokenId, CLS_ID, NUM_RESERVED, SEP_ID, UNK_ID};
use crate::error::{Error, Result};

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["[pad]", "[cls]", "[unk]", "[sep]"];

/// Token ↔ id map. Ids 0..4 are reserved; file entries start at 4.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    ids: HashMap<String, TokenId>,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::default();
        for tok in tokens {
            let tok = tok.as_ref().trim().to_lowercase();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("invalid vocabulary entry `{tok}`")));
            }
            if RESERVED_NAMES.contains(&tok.as_str()) || v.ids.contains_key(&tok) {
                return Err(Error::Input(format!("duplicate vocabulary entry `{tok}`")));
            }
            let id = (NUM_RESERVED + v.tokens.len()) as TokenId;
            v.ids.insert(tok.clone(), id);
            v.tokens.push(tok);
        }
        Ok(v)
    }

    /// One token per line; id = line index + 4.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Total id space including the reserved ids.
    pub fn size(&self) -> usize {
        NUM_RESERVED + self.tokens.len()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(&token.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        let id = id as usize;
        if id < NUM_RESERVED {
            Some(RESERVED_NAMES[id])
        } else {
            self.tokens.get(id - NUM_RESERVED).map(String::as_str)
        }
    }
}

fn words<'a>(text: &'a str, vocab: &'a Vocab) -> impl Iterator<Item = TokenId> + 'a {
    text.split_whitespace().map(|w| vocab.id(w))
}

/// Whitespace tokenization with `[CLS]` prepended; truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<TokenId> {
    let mut ids = vec![CLS_ID];
    ids.extend(words(text, vocab));
    ids.truncate(max_len.max(1));
    ids
}

/// `[CLS] a [SEP] b`, truncated to `max_len`.
pub fn tokenize_pair(text: &str, pair: &str, vocab: &Vocab, max_len: usize) -> Vec<TokenId> {
    let mut ids = vec![CLS_ID];
    ids.extend(words(text, vocab));
    ids.push(SEP_ID);
    ids.extend(words(pair, vocab));
    ids.truncate(max_len.max(1));
    ids
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Real(f64),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match *self {
            Label::Class(c) => Some(c),
            Label::Real(_) => None,
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Label::Class(c) => c as f64,
            Label::Real(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Starts with `[CLS]`.
    pub tokens: Vec<TokenId>,
    pub label: Label,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn is_regression(&self) -> bool {
        self.examples
            .iter()
            .any(|e| matches!(e.label, Label::Real(_)))
    }

    /// Number of classes implied by the labels (at least 2); 1 for regression.
    pub fn num_classes(&self) -> usize {
        if self.is_regression() {
            return 1;
        }
        self.examples
            .iter()
            .filter_map(|e| e.label.class())
            .max()
            .map_or(2, |m| (m + 1).max(2))
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tokens: Option<Vec<TokenId>>,
    text: Option<String>,
    text_pair: Option<String>,
    label: Option<serde_json::Number>,
}

#[derive(Clone, Copy, PartialEq)]
enum Schema {
    Tokens,
    Text,
}

/// Reads a JSONL dataset. Each line holds either `tokens` (ids without
/// `[CLS]`) or `text`/`text_pair`, plus `label`. A file must use one schema.
pub fn load_jsonl(path: &Path, vocab: Option<&Vocab>, max_len: usize) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let err = |line: usize, message: String| Error::Dataset {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut schema = None;
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| err(lineno, format!("malformed line: {e}")))?;
        let this = match (&rec.tokens, &rec.text) {
            (Some(_), None) if rec.text_pair.is_none() => Schema::Tokens,
            (None, Some(_)) => Schema::Text,
            _ => {
                return Err(err(
                    lineno,
                    "schema error: expected exactly one of `tokens` or `text`".into(),
                ))
            }
        };
        if *schema.get_or_insert(this) != this {
            return Err(err(lineno, "schema error: mixed `tokens` and `text` lines".into()));
        }
        let label = match rec.label {
            None => return Err(err(lineno, "schema error: missing `label`".into())),
            Some(n) => match n.as_u64() {
                Some(c) => Label::Class(c as usize),
                None if n.is_i64() => {
                    return Err(err(lineno, format!("negative class label {n}")))
                }
                None => Label::Real(n.as_f64().expect("JSON number")),
            },
        };
        let tokens = match this {
            Schema::Tokens => {
                let mut t = vec![CLS_ID];
                t.extend(rec.tokens.unwrap());
                t.truncate(max_len.max(1));
                t
            }
            Schema::Text => {
                let vocab = vocab.ok_or_else(|| {
                    err(lineno, "text records need a vocabulary file".into())
                })?;
                let text = rec.text.unwrap();
                match &rec.text_pair {
                    Some(p) => tokenize_pair(&text, p, vocab, max_len),
                    None => tokenize(&text, vocab, max_len),
                }
            }
        };
        examples.push(Example { tokens, label });
    }
    Ok(Dataset { examples })
}

/// Writes the `tokens` schema (ids after `[CLS]`).
pub fn write_jsonl(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for ex in &data.examples {
        let rest = ex.tokens.get(1..).unwrap_or(&[]);
        let line = serde_json::json!({ "tokens": rest, "label": ex.label });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    /// Label 1 iff the two-token motif appears.
    PatternContainment,
    /// Label = which of two marker tokens occurs more often.
    MajorityToken,
    /// Regression on the Jaccard overlap of two token sets split by `[SEP]`.
    PairSimilarity,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::PatternContainment => "pattern",
            TaskKind::MajorityToken => "majority",
            TaskKind::PairSimilarity => "pair",
        }
    }

    pub fn is_regression(&self) -> bool {
        matches!(self, TaskKind::PairSimilarity)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pattern" | "pattern_containment" => Ok(TaskKind::PatternContainment),
            "majority" | "majority_token" => Ok(TaskKind::MajorityToken),
            "pair" | "pair_similarity" => Ok(TaskKind::PairSimilarity),
            other => Err(Error::Config(format!(
                "unknown task `{other}`; valid tasks: pattern, majority, pair"
            ))),
        }
    }
}

/// First motif / marker token; the second is the next id.
pub const MOTIF_FIRST: TokenId = NUM_RESERVED as TokenId;
pub const MOTIF: [TokenId; 2] = [MOTIF_FIRST, MOTIF_FIRST + 1];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Inclusive range of content length (tokens after `[CLS]`).
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// 2000/500 examples, vocabulary 50, 16 content tokens.
    pub fn standard(kind: TaskKind, seed: u64) -> Self {
        SyntheticTaskSpec {
            kind,
            vocab_size: 50,
            min_len: 16,
            max_len: 16,
            train_size: 2000,
            eval_size: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let infeasible = |m: String| Err(Error::Config(format!("infeasible task spec: {m}")));
        if self.train_size == 0 || self.eval_size == 0 {
            return infeasible("dataset sizes must be at least 1".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return infeasible(format!("length range {}..={}", self.min_len, self.max_len));
        }
        let needed = match self.kind {
            TaskKind::PatternContainment | TaskKind::MajorityToken => NUM_RESERVED + 3,
            TaskKind::PairSimilarity => NUM_RESERVED + 2 * self.max_len,
        };
        if self.vocab_size < needed {
            return infeasible(format!(
                "vocab_size {} too small, need {needed}",
                self.vocab_size
            ));
        }
        match self.kind {
            TaskKind::PatternContainment if self.min_len < MOTIF.len() => infeasible(format!(
                "motif of length {} does not fit sequences of length {}",
                MOTIF.len(),
                self.min_len
            )),
            TaskKind::PairSimilarity if self.min_len < 3 => {
                infeasible("pair sequences need at least 3 tokens".into())
            }
            _ => Ok(()),
        }
    }

    /// Longest sequence produced, including `[CLS]`.
    pub fn max_sequence_len(&self) -> usize {
        self.max_len + 1
    }

    /// Sequences must leave two positions spare below `max_seq_len`.
    pub fn check_fits(&self, max_seq_len: usize) -> Result<()> {
        if self.max_len + 2 > max_seq_len {
            return Err(Error::Config(format!(
                "content length {} exceeds max_seq_len {max_seq_len} - 2",
                self.max_len
            )));
        }
        Ok(())
    }
}

struct Generator<'a> {
    spec: &'a SyntheticTaskSpec,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn filler(&mut self) -> TokenId {
        self.rng
            .random_range(MOTIF_FIRST as usize + 2..self.spec.vocab_size) as TokenId
    }

    fn length(&mut self) -> usize {
        self.rng.random_range(self.spec.min_len..=self.spec.max_len)
    }

    fn draw(&mut self, target: usize) -> Example {
        match self.spec.kind {
            TaskKind::PatternContainment => self.pattern(target),
            TaskKind::MajorityToken => self.majority(target),
            TaskKind::PairSimilarity => self.pair(),
        }
    }

    fn pattern(&mut self, positive: usize) -> Example {
        let len = self.length();
        let mut body: Vec<TokenId> = (0..len).map(|_| self.filler()).collect();
        if positive == 1 {
            let at = self.rng.random_range(0..=len - MOTIF.len());
            body[at..at + MOTIF.len()].copy_from_slice(&MOTIF);
        }
        with_cls(body, Label::Class(positive))
    }

    fn majority(&mut self, winner: usize) -> Example {
        let len = self.length();
        let hi = self.rng.random_range(1..=len);
        let lo = self.rng.random_range(0..=(hi - 1).min(len - hi));
        let mut body: Vec<TokenId> = (0..len).map(|_| self.filler()).collect();
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(&mut self.rng);
        let (win_tok, lose_tok) = (MOTIF[winner], MOTIF[1 - winner]);
        for &s in &slots[..hi] {
            body[s] = win_tok;
        }
        for &s in &slots[hi..hi + lo] {
            body[s] = lose_tok;
        }
        with_cls(body, Label::Class(winner))
    }

    fn pair(&mut self) -> Example {
        let len = self.length();
        let sa = self.rng.random_range(1..=(len - 2));
        let sb = self.rng.random_range(1..=(len - 1 - sa));
        let overlap = self.rng.random_range(0..=sa.min(sb));
        let mut pool: Vec<TokenId> = (NUM_RESERVED as TokenId..self.spec.vocab_size as TokenId).collect();
        pool.shuffle(&mut self.rng);
        let distinct = sa + sb - overlap;
        let shared = &pool[..overlap];
        let a_only = &pool[overlap..sa];
        let b_only = &pool[sa..distinct];
        let mut a: Vec<TokenId> = shared.iter().chain(a_only).copied().collect();
        let mut b: Vec<TokenId> = shared.iter().chain(b_only).copied().collect();
        a.shuffle(&mut self.rng);
        b.shuffle(&mut self.rng);
        let mut body = a;
        body.push(SEP_ID);
        body.extend(b);
        let jaccard = overlap as f64 / distinct as f64;
        with_cls(body, Label::Real(jaccard))
    }
}

fn with_cls(body: Vec<TokenId>, label: Label) -> Example {
    let mut tokens = Vec::with_capacity(body.len() + 1);
    tokens.push(CLS_ID);
    tokens.extend(body);
    Example { tokens, label }
}

const MAX_REDRAWS: usize = 1000;

/// Deterministic train/eval split for `spec`. Classification tasks are
/// exactly balanced; no token sequence appears twice across both splits.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut gen = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
    let mut split = |gen: &mut Generator<'_>, n: usize| -> Result<Dataset> {
        let mut examples = Vec::with_capacity(n);
        for i in 0..n {
            let target = i % 2;
            let mut drawn = None;
            for _ in 0..MAX_REDRAWS {
                let ex = gen.draw(target);
                if seen.insert(ex.tokens.clone()) {
                    drawn = Some(ex);
                    break;
                }
            }
            examples.push(drawn.ok_or_else(|| {
                Error::Config("infeasible task spec: too few distinct sequences".into())
            })?);
        }
        examples.shuffle(&mut gen.rng);
        Ok(Dataset { examples })
    };
    let train = split(&mut gen, spec.train_size)?;
    let eval = split(&mut gen, spec.eval_size)?;
    Ok((train, eval))
}

/// Seeded sample of `n` examples without replacement. Class labels are
/// stratified by largest-remainder allocation.
pub fn subsample(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > data.len() {
        return Err(Error::Input(format!(
            "subsample size {n} outside [1, {}]",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if data.is_regression() {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx
    } else {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in data.examples.iter().enumerate() {
            by_class.entry(e.label.class().unwrap()).or_default().push(i);
        }
        let total = data.len() as f64;
        let mut quotas: Vec<(usize, usize, f64)> = by_class
            .iter()
            .map(|(&c, members)| {
                let exact = n as f64 * members.len() as f64 / total;
                (c, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut left = n - quotas.iter().map(|q| q.1).sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if quotas[i].1 < by_class[&quotas[i].0].len() {
                quotas[i].1 += 1;
                left -= 1;
            }
        }
        let mut out = Vec::with_capacity(n);
        for (c, take, _) in quotas {
            let mut members = by_class[&c].clone();
            members.shuffle(&mut rng);
            out.extend_from_slice(&members[..take]);
        }
        out
    };
    picked.shuffle(&mut rng);
    Ok(Dataset {
        examples: picked.into_iter().map(|i| data.examples[i].clone()).collect(),
    })
}

/// Deterministic holdout split: the last `eval_fraction` of a seeded
/// permutation becomes the eval set.
pub fn split_holdout(data: &Dataset, eval_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if data.len() < 2 || !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::Input("cannot split dataset".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((data.len() as f64 * eval_fraction).round() as usize).clamp(1, data.len() - 1);
    let pick = |ids: &[usize]| Dataset {
        examples: ids.iter().map(|&i| data.examples[i].clone()).collect(),
    };
    let cut = data.len() - n_eval;
    Ok((pick(&idx[..cut]), pick(&idx[cut..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_ab() -> Vocab {
        // a→4, b→5 would collide with the examples below, so pad first
        Vocab::from_tokens(["x", "y", "a", "b"]).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab_ab();
        assert_eq!(v.id("a"), 6);
        assert_eq!(tokenize("", &v, 64), vec![CLS_ID]);
        assert_eq!(tokenize("a b", &v, 64), vec![1, 6, 7]);
        assert_eq!(tokenize("zebra", &v, 64), vec![1, UNK_ID]);
        assert_eq!(tokenize("A  B", &v, 64), vec![1, 6, 7]);
        assert_eq!(tokenize("a b a b", &v, 3), vec![1, 6, 7]);
        assert_eq!(tokenize_pair("a", "b", &v, 64), vec![1, 6, SEP_ID, 7]);
    }

    #[test]
    fn vocab_rejects_duplicates() {
        assert!(Vocab::from_tokens(["a", "A"]).is_err());
        assert!(Vocab::from_tokens(["[CLS]"]).is_err());
    }

    #[test]
    fn pattern_labels_match_motif() {
        let spec = SyntheticTaskSpec::standard(TaskKind::PatternContainment, 7);
        let (train, _) = gen_synthetic(&spec).unwrap();
        for ex in &train.examples {
            let has = ex.tokens.windows(2).any(|w| w == MOTIF);
            assert_eq!(has, ex.label == Label::Class(1));
            assert_eq!(ex.tokens.len(), 17);
        }
    }

    #[test]
    fn majority_labels_match_counts() {
        let mut spec = SyntheticTaskSpec::standard(TaskKind::MajorityToken, 3);
        spec.min_len = 4;
        let (train, eval) = gen_synthetic(&spec).unwrap();
        for ex in train.examples.iter().chain(&eval.examples) {
            let a = ex.tokens.iter().filter(|&&t| t == MOTIF[0]).count();
            let b = ex.tokens.iter().filter(|&&t| t == MOTIF[1]).count();
            assert_ne!(a, b);
            assert_eq!(ex.label, Label::Class(usize::from(b > a)));
        }
    }

    #[test]
    fn pair_labels_are_jaccard() {
        let spec = SyntheticTaskSpec::standard(TaskKind::PairSimilarity, 11);
        let (train, _) = gen_synthetic(&spec).unwrap();
        for ex in &train.examples {
            let sep = ex.tokens.iter().position(|&t| t == SEP_ID).unwrap();
            let a: HashSet<_> = ex.tokens[1..sep].iter().collect();
            let b: HashSet<_> = ex.tokens[sep + 1..].iter().collect();
            let j = a.intersection(&b).count() as f64 / a.union(&b).count() as f64;
            let Label::Real(v) = ex.label else { panic!() };
            assert_eq!(v, j);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut spec = SyntheticTaskSpec::standard(TaskKind::PatternContainment, 1);
        spec.min_len = 1;
        spec.max_len = 1;
        assert!(matches!(gen_synthetic(&spec), Err(Error::Config(_))));
        let mut spec = SyntheticTaskSpec::standard(TaskKind::PatternContainment, 1);
        spec.train_size = 0;
        assert!(gen_synthetic(&spec).is_err());
        assert!(SyntheticTaskSpec::standard(TaskKind::PatternContainment, 1)
            .check_fits(17)
            .is_err());
    }

    #[test]
    fn subsample_bounds() {
        let spec = SyntheticTaskSpec {
            train_size: 40,
            eval_size: 4,
            ..SyntheticTaskSpec::standard(TaskKind::PatternContainment, 5)
        };
        let (train, _) = gen_synthetic(&spec).unwrap();
        assert_eq!(subsample(&train, 1, 0).unwrap().len(), 1);
        assert!(subsample(&train, 41, 0).is_err());
        assert!(subsample(&train, 0, 0).is_err());
    }

    #[test]
    fn split_holdout_partitions() {
        let spec = SyntheticTaskSpec {
            train_size: 50,
            eval_size: 2,
            ..SyntheticTaskSpec::standard(TaskKind::MajorityToken, 5)
        };
        let (train, _) = gen_synthetic(&spec).unwrap();
        let (a, b) = split_holdout(&train, 0.2, 9).unwrap();
        assert_eq!((a.len(), b.len()), (40, 10));
    }
}
