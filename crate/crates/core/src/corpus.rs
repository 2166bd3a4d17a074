//! Annotated corpora: reading, writing, label statistics and the derived
//! views used by the taggers and the detector.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

/// Bare entity type of a tag: BIO prefix stripped, lowercased.
pub fn tag_type(tag: &str) -> String {
    let bare = tag
        .strip_prefix("B-")
        .or_else(|| tag.strip_prefix("I-"))
        .unwrap_or(tag);
    if bare == OUTSIDE {
        OUTSIDE.to_string()
    } else {
        bare.to_lowercase()
    }
}

/// Display form used in reports: `geo` → `Geo`.
pub fn display_type(ty: &str) -> String {
    let mut chars = ty.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub gold_tag: String,
}

impl Token {
    pub fn new(surface: impl Into<String>, gold_tag: impl Into<String>) -> Self {
        Token {
            surface: surface.into(),
            gold_tag: gold_tag.into(),
        }
    }

    pub fn tag_type(&self) -> String {
        tag_type(&self.gold_tag)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub detector_label: Option<u8>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Sentence {
            tokens,
            detector_label: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    pub fn tags(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.gold_tag.as_str()).collect()
    }
}

/// Which entity group a derived corpus or tagger retains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Keep {
    Strong,
    Weak,
    All,
}

impl FromStr for Keep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(Keep::Strong),
            "weak" => Ok(Keep::Weak),
            "all" => Ok(Keep::All),
            other => Err(Error::Config(format!("unknown keep value {other:?}"))),
        }
    }
}

impl fmt::Display for Keep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Keep::Strong => "strong",
            Keep::Weak => "weak",
            Keep::All => "all",
        })
    }
}

/// Label inventory plus the Strong/Weak partition of entity types.
///
/// `labels` holds the full (possibly BIO-prefixed) tags with `O` at index 0;
/// the CRF sentinels START and END sit at `K` and `K+1` where `K` is the
/// number of labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSet {
    labels: Vec<String>,
    type_names: Vec<String>,
    strong: BTreeSet<String>,
    weak: BTreeSet<String>,
    frozen: bool,
}

pub const DEFAULT_STRONG: [&str; 5] = ["geo", "tim", "org", "per", "gpe"];
pub const DEFAULT_WEAK: [&str; 3] = ["art", "eve", "nat"];

impl Default for TagSet {
    fn default() -> Self {
        TagSet::with_partition(&DEFAULT_STRONG, &DEFAULT_WEAK).expect("default partition is disjoint")
    }
}

impl TagSet {
    pub fn with_partition<S: AsRef<str>>(strong: &[S], weak: &[S]) -> Result<Self> {
        let strong: Vec<String> = strong.iter().map(|s| tag_type(s.as_ref())).collect();
        let weak: Vec<String> = weak.iter().map(|s| tag_type(s.as_ref())).collect();
        if let Some(both) = strong.iter().find(|s| weak.contains(s)) {
            return Err(Error::Config(format!("type {both} is both strong and weak")));
        }
        if strong.iter().chain(&weak).any(|t| t == OUTSIDE) {
            return Err(Error::Config("O cannot be an entity type".into()));
        }
        let mut type_names = vec![OUTSIDE.to_string()];
        for t in strong.iter().chain(&weak) {
            if !type_names.contains(t) {
                type_names.push(t.clone());
            }
        }
        Ok(TagSet {
            labels: vec![OUTSIDE.to_string()],
            type_names,
            strong: strong.into_iter().collect(),
            weak: weak.into_iter().collect(),
            frozen: false,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn type_names(&self) -> &[String] {
        &self.type_names
    }

    pub fn strong(&self) -> &BTreeSet<String> {
        &self.strong
    }

    pub fn weak(&self) -> &BTreeSet<String> {
        &self.weak
    }

    /// Number of emit-able labels (sentinels excluded).
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn start_index(&self) -> usize {
        self.labels.len()
    }

    pub fn end_index(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn label_index(&self, tag: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == tag)
    }

    pub fn is_weak(&self, ty: &str) -> bool {
        self.weak.contains(ty)
    }

    pub fn is_strong(&self, ty: &str) -> bool {
        self.strong.contains(ty)
    }

    fn keeps(&self, keep: Keep, ty: &str) -> bool {
        match keep {
            Keep::All => true,
            Keep::Strong => ty == OUTSIDE || self.is_strong(ty),
            Keep::Weak => ty == OUTSIDE || self.is_weak(ty),
        }
    }

    /// Registers `tag`, or checks it against a frozen inventory.
    pub fn register(&mut self, tag: &str) -> Result<usize> {
        if let Some(i) = self.label_index(tag) {
            return Ok(i);
        }
        if self.frozen {
            return Err(Error::Vocabulary { tag: tag.to_string() });
        }
        let ty = tag_type(tag);
        if !self.type_names.contains(&ty) {
            log::warn!("entity type {ty:?} is not in the partition; treating it as strong");
            self.strong.insert(ty.clone());
            self.type_names.push(ty);
        }
        self.labels.push(tag.to_string());
        Ok(self.labels.len() - 1)
    }

    /// Inventory restricted to the types retained by `keep`.
    pub fn restricted(&self, keep: Keep) -> TagSet {
        let labels = self
            .labels
            .iter()
            .filter(|l| self.keeps(keep, &tag_type(l)))
            .cloned()
            .collect();
        let type_names = self
            .type_names
            .iter()
            .filter(|t| self.keeps(keep, t))
            .cloned()
            .collect();
        let pick = |set: &BTreeSet<String>, group: Keep| {
            if keep == Keep::All || keep == group {
                set.clone()
            } else {
                BTreeSet::new()
            }
        };
        TagSet {
            labels,
            type_names,
            strong: pick(&self.strong, Keep::Strong),
            weak: pick(&self.weak, Keep::Weak),
            frozen: self.frozen,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub tagset: TagSet,
    pub split: Split,
}

/// Accepted input layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// `surface<TAB>tag`, blank line between sentences.
    Conll2,
    /// `surface<TAB>gold<TAB>predicted`; the predicted column is read as the tag.
    Conll3,
    /// Same layout as [`Format::Conll3`] with the gold column read as the tag.
    Conll3Gold,
    /// Header row naming the sentence, word and tag columns, e.g.
    /// `Sentence #,Word,POS,Tag` or `sentence_id,surface,tag`.
    CsvSentence,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conll" | "conll-2col" => Ok(Format::Conll2),
            "conll-3col" => Ok(Format::Conll3),
            "conll-3col-gold" => Ok(Format::Conll3Gold),
            "csv" | "csv-sentence" => Ok(Format::CsvSentence),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>, tagset: TagSet, split: Split) -> Self {
        Corpus {
            sentences,
            tagset,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    /// Builds a corpus from sentences, registering every tag.
    pub fn from_sentences(sentences: Vec<Sentence>, mut tagset: TagSet, split: Split) -> Result<Self> {
        for s in &sentences {
            for t in &s.tokens {
                tagset.register(&t.gold_tag)?;
            }
        }
        Ok(Corpus::new(sentences, tagset, split))
    }
}

/// Reads a corpus file. Pass a frozen `tagset` to reject unseen tags.
pub fn load_corpus(path: impl AsRef<Path>, format: Format, tagset: TagSet, split: Split) -> Result<Corpus> {
    let file = File::open(path.as_ref())?;
    read_corpus(BufReader::new(file), format, tagset, split)
}

pub fn read_corpus<R: Read>(reader: R, format: Format, tagset: TagSet, split: Split) -> Result<Corpus> {
    match format {
        Format::Conll2 | Format::Conll3 | Format::Conll3Gold => read_conll(BufReader::new(reader), format, tagset, split),
        Format::CsvSentence => read_csv(reader, tagset, split),
    }
}

/// Lines starting with `#` that contain no tab are header comments.
fn is_comment(line: &str) -> bool {
    line.starts_with('#') && !line.contains('\t')
}

fn read_conll<R: BufRead>(reader: R, format: Format, mut tagset: TagSet, split: Split) -> Result<Corpus> {
    let (want, tag_col) = match format {
        Format::Conll3 => (3, 2),
        Format::Conll3Gold => (3, 1),
        _ => (2, 1),
    };
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            if !current.is_empty() {
                sentences.push(Sentence::new(std::mem::take(&mut current)));
            }
            continue;
        }
        if is_comment(line) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != want {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {want} tab-separated columns, found {}", fields.len()),
            });
        }
        let (surface, tag) = (fields[0], fields[tag_col]);
        if surface.is_empty() || tag.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty surface or tag".into(),
            });
        }
        tagset.register(tag)?;
        current.push(Token::new(surface, tag));
    }
    if !current.is_empty() {
        sentences.push(Sentence::new(current));
    }
    Ok(Corpus::new(sentences, tagset, split))
}

fn read_csv<R: Read>(reader: R, mut tagset: TagSet, split: Split) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_lowercase())
        .collect();
    let find = |names: &[&str], fallback: usize| {
        header
            .iter()
            .position(|h| names.contains(&h.as_str()))
            .unwrap_or(fallback)
    };
    if header.len() < 3 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected at least 3 columns, found {}", header.len()),
        });
    }
    let id_col = find(&["sentence_id", "sentence #", "sentence"], 0);
    let surface_col = find(&["surface", "word", "token"], 1);
    let tag_col = find(&["tag", "label"], header.len() - 1);

    let mut sentences = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut current_id: Option<String> = None;
    for (i, record) in rdr.records().enumerate() {
        let lineno = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let field = |c: usize| {
            record.get(c).ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("missing column {}", c + 1),
            })
        };
        let (id, surface, tag) = (field(id_col)?.trim(), field(surface_col)?, field(tag_col)?.trim());
        if surface.is_empty() || tag.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty surface or tag".into(),
            });
        }
        // An empty id continues the current sentence.
        if !id.is_empty() && current_id.as_deref() != Some(id) {
            if !current.is_empty() {
                sentences.push(Sentence::new(std::mem::take(&mut current)));
            }
            current_id = Some(id.to_string());
        }
        tagset.register(tag)?;
        current.push(Token::new(surface, tag));
    }
    if !current.is_empty() {
        sentences.push(Sentence::new(current));
    }
    Ok(Corpus::new(sentences, tagset, split))
}

/// Writes `surface<TAB>tag` lines with a blank line after every sentence.
pub fn write_conll<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    for s in &corpus.sentences {
        for t in &s.tokens {
            writeln!(out, "{}\t{}", t.surface, t.gold_tag)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Writes `surface<TAB>gold<TAB>predicted`.
pub fn write_conll_predictions<W: Write>(corpus: &Corpus, predicted: &[Vec<String>], mut out: W) -> Result<()> {
    if predicted.len() != corpus.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} sentences",
            predicted.len(),
            corpus.len()
        )));
    }
    for (s, tags) in corpus.sentences.iter().zip(predicted) {
        if tags.len() != s.len() {
            return Err(Error::Contract("prediction length differs from sentence length".into()));
        }
        for (t, p) in s.tokens.iter().zip(tags) {
            writeln!(out, "{}\t{}\t{}", t.surface, t.gold_tag, p)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Token counts per entity type, in tag-set type order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelHistogram {
    counts: Vec<(String, usize)>,
}

impl LabelHistogram {
    pub fn get(&self, ty: &str) -> usize {
        let ty = tag_type(ty);
        self.counts.iter().find(|(t, _)| *t == ty).map_or(0, |(_, c)| *c)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|(_, c)| c).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.counts.iter().map(|(t, c)| (t.as_str(), *c))
    }

    /// Types with a nonzero count only.
    pub fn nonzero(&self) -> Vec<(&str, usize)> {
        self.iter().filter(|(_, c)| *c > 0).collect()
    }

    /// Total Strong-type tokens over total Weak-type tokens.
    pub fn strong_weak_ratio(&self, tagset: &TagSet) -> Option<f64> {
        let strong: usize = self.iter().filter(|(t, _)| tagset.is_strong(t)).map(|(_, c)| c).sum();
        let weak: usize = self.iter().filter(|(t, _)| tagset.is_weak(t)).map(|(_, c)| c).sum();
        (weak > 0).then(|| strong as f64 / weak as f64)
    }

    /// Two label/count pairs per row, largest counts first.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, usize)> = self
            .nonzero()
            .into_iter()
            .map(|(t, c)| (display_type(t), c))
            .collect();
        rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut out = format!("{:<8}{:>10}  {:<8}{:>10}\n", "Label", "Count", "Label", "Count");
        for pair in rows.chunks(2) {
            let left = format!("{:<8}{:>10}", pair[0].0, pair[0].1);
            match pair.get(1) {
                Some((t, c)) => out.push_str(&format!("{left}  {t:<8}{c:>10}\n")),
                None => out.push_str(&format!("{}\n", left.trim_end())),
            }
        }
        out
    }
}

pub fn label_histogram(corpus: &Corpus) -> LabelHistogram {
    let mut counts: Vec<(String, usize)> = corpus.tagset.type_names.iter().map(|t| (t.clone(), 0)).collect();
    for s in &corpus.sentences {
        for tok in &s.tokens {
            let ty = tok.tag_type();
            match counts.iter_mut().find(|(t, _)| *t == ty) {
                Some((_, c)) => *c += 1,
                None => counts.push((ty, 1)),
            }
        }
    }
    LabelHistogram { counts }
}

/// Relabels every token whose type is outside `keep` as `O`.
pub fn mask_labels(corpus: &Corpus, keep: Keep) -> Corpus {
    let sentences = corpus
        .sentences
        .iter()
        .map(|s| Sentence {
            tokens: s
                .tokens
                .iter()
                .map(|t| {
                    if corpus.tagset.keeps(keep, &t.tag_type()) {
                        t.clone()
                    } else {
                        Token::new(t.surface.clone(), OUTSIDE)
                    }
                })
                .collect(),
            detector_label: s.detector_label,
        })
        .collect();
    Corpus::new(sentences, corpus.tagset.restricted(keep), corpus.split)
}

/// Whether any token of `s` carries a Weak type.
pub fn has_weak(s: &Sentence, tagset: &TagSet) -> bool {
    s.tokens.iter().any(|t| tagset.is_weak(&t.tag_type()))
}

/// Sets `detector_label` to 1 on sentences containing a Weak-type token.
pub fn detector_labels(corpus: &Corpus) -> Corpus {
    let mut out = corpus.clone();
    for s in &mut out.sentences {
        s.detector_label = Some(u8::from(has_weak(s, &corpus.tagset)));
    }
    out
}

/// `(negatives, positives)` among labelled sentences.
pub fn detector_counts(corpus: &Corpus) -> (usize, usize) {
    corpus.sentences.iter().fold((0, 0), |(n0, n1), s| match s.detector_label {
        Some(1) => (n0, n1 + 1),
        Some(_) => (n0 + 1, n1),
        None => (n0, n1),
    })
}

/// Keeps every positive and an equally sized, seeded uniform sample of the
/// negatives. Sentence order is preserved.
pub fn balanced_subsample(corpus: &Corpus, seed: u64) -> Result<Corpus> {
    if corpus.sentences.iter().any(|s| s.detector_label.is_none()) {
        return Err(Error::Contract("balanced_subsample needs detector labels".into()));
    }
    let negatives: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus.sentences[i].detector_label == Some(0))
        .collect();
    let n_pos = corpus.len() - negatives.len();
    if n_pos == 0 {
        return Err(Error::Domain("no positive sentences to balance against".into()));
    }
    let take = n_pos.min(negatives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; corpus.len()];
    for i in sample(&mut rng, negatives.len(), take) {
        chosen[negatives[i]] = true;
    }
    log::info!("balanced subsample (seed {seed}): {n_pos} positives, {take} of {} negatives", negatives.len());
    let sentences = corpus
        .sentences
        .iter()
        .enumerate()
        .filter(|(i, s)| s.detector_label == Some(1) || chosen[*i])
        .map(|(_, s)| s.clone())
        .collect();
    Ok(Corpus::new(sentences, corpus.tagset.clone(), corpus.split))
}

/// Sentences the detector labels positive.
pub fn positives_only(corpus: &Corpus) -> Corpus {
    let sentences = corpus
        .sentences
        .iter()
        .filter(|s| has_weak(s, &corpus.tagset))
        .cloned()
        .collect();
    Corpus::new(sentences, corpus.tagset.clone(), corpus.split)
}

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const UNK_INDEX: usize = 0;
pub const PAD_INDEX: usize = 1;

/// Lowercased word inventory with `<unk>` at 0 and `<pad>` at 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> usize {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK_INDEX)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }

    pub fn count(&self, word: &str) -> usize {
        self.index
            .get(&word.to_lowercase())
            .map_or(0, |&i| self.counts[i])
    }
}

/// Words seen at least `min_freq` times, most frequent first (ties
/// alphabetical).
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Vocabulary {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for s in &corpus.sentences {
        for t in &s.tokens {
            *freq.entry(t.surface.to_lowercase()).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = freq.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut words = vec![UNK.to_string(), PAD.to_string()];
    let mut counts = vec![0, 0];
    for (w, c) in kept {
        words.push(w);
        counts.push(c);
    }
    let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    Vocabulary { words, counts, index }
}
