//! Combines a Strong-type tagger, a Weak-type tagger and the detector into a
//! single prediction.
//!
//! The detector gates each sentence: a negative sentence takes the Strong
//! tagger's decode unchanged; a positive one takes the positionwise merge of
//! both decodes. At each position a non-O tag beats O, and two competing
//! entity tags are settled by which tagger gives its own tag the higher
//! posterior marginal (Strong wins exact ties).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::corpus::{Corpus, OUTSIDE};
use crate::detector::Detector;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tagger::Tagger;

/// Decoded tags with the posterior marginals of the CRF that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub tags: Vec<String>,
    pub tag_ids: Vec<usize>,
    pub marginals: Tensor,
}

impl Prediction {
    pub fn new(tags: Vec<String>, tag_ids: Vec<usize>, marginals: Tensor) -> Result<Self> {
        if tags.len() != tag_ids.len() || marginals.rows() != tags.len() {
            return Err(Error::Contract(format!(
                "prediction with {} tags, {} ids and {} marginal rows",
                tags.len(),
                tag_ids.len(),
                marginals.rows()
            )));
        }
        if let Some(&bad) = tag_ids.iter().find(|&&i| i >= marginals.cols()) {
            return Err(Error::Domain(format!("tag id {bad} outside marginal columns")));
        }
        Ok(Prediction {
            tags,
            tag_ids,
            marginals,
        })
    }

    /// Builds a prediction whose only information is one confidence per
    /// position, as a two-column marginal table `[p, 1−p]`.
    pub fn from_confidences<S: AsRef<str>>(tags: &[S], confidence: &[f64]) -> Result<Self> {
        let values = confidence.iter().flat_map(|&p| [p, 1.0 - p]).collect();
        let marginals = Tensor::matrix(tags.len(), 2, values)?;
        Self::new(
            tags.iter().map(|t| t.as_ref().to_string()).collect(),
            vec![0; tags.len()],
            marginals,
        )
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Posterior probability of the predicted tag at `i`.
    pub fn confidence(&self, i: usize) -> f64 {
        self.marginals.at(i, self.tag_ids[i])
    }
}

static TIES: AtomicU64 = AtomicU64::new(0);

/// Conflicts resolved in favour of Strong because both confidences were equal.
pub fn merge_tie_count() -> u64 {
    TIES.load(Ordering::Relaxed)
}

/// Positionwise vote between the two taggers.
pub fn merge_positionwise(strong: &Prediction, weak: &Prediction) -> Result<Vec<String>> {
    if strong.len() != weak.len() {
        return Err(Error::Contract(format!(
            "strong prediction has {} tokens, weak has {}",
            strong.len(),
            weak.len()
        )));
    }
    let merged = (0..strong.len())
        .map(|i| {
            let (s, w) = (&strong.tags[i], &weak.tags[i]);
            if s == OUTSIDE {
                w.clone()
            } else if w == OUTSIDE {
                s.clone()
            } else {
                let (ps, pw) = (strong.confidence(i), weak.confidence(i));
                if pw > ps {
                    w.clone()
                } else {
                    if pw == ps {
                        TIES.fetch_add(1, Ordering::Relaxed);
                        log::info!("merge tie at position {i}: {s} ({ps}) vs {w} ({pw}); keeping strong");
                    }
                    s.clone()
                }
            }
        })
        .collect();
    Ok(merged)
}

/// Detector gate: 0 keeps the Strong decode, 1 merges.
pub fn apply_gate(gate: u8, strong: &Prediction, weak: &Prediction) -> Result<Vec<String>> {
    if gate == 0 {
        Ok(strong.tags.clone())
    } else {
        merge_positionwise(strong, weak)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// One tagger over all types.
    Single,
    /// Strong and Weak taggers merged on every sentence.
    Double,
    /// Strong and Weak taggers merged only where the detector fires.
    Adaptive,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Mode::Single),
            "double" => Ok(Mode::Double),
            "adaptive" => Ok(Mode::Adaptive),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Single => "single",
            Mode::Double => "double",
            Mode::Adaptive => "adaptive",
        })
    }
}

/// Per-sentence output with the gate decision that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceOutput {
    pub tags: Vec<String>,
    /// Detector decision in adaptive mode, the constant 1 in double mode.
    pub gate: Option<u8>,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    mode: Mode,
    single: Option<Tagger>,
    strong: Option<Tagger>,
    weak: Option<Tagger>,
    detector: Option<Detector>,
    threshold: f64,
}

impl Pipeline {
    pub fn single(tagger: Tagger) -> Self {
        Pipeline {
            mode: Mode::Single,
            single: Some(tagger),
            strong: None,
            weak: None,
            detector: None,
            threshold: 0.5,
        }
    }

    pub fn double(strong: Tagger, weak: Tagger) -> Self {
        Pipeline {
            mode: Mode::Double,
            single: None,
            strong: Some(strong),
            weak: Some(weak),
            detector: None,
            threshold: 0.5,
        }
    }

    pub fn adaptive(strong: Tagger, weak: Tagger, detector: Detector, threshold: f64) -> Self {
        Pipeline {
            mode: Mode::Adaptive,
            single: None,
            strong: Some(strong),
            weak: Some(weak),
            detector: Some(detector),
            threshold,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn need<'a, T>(slot: &'a Option<T>, what: &str) -> Result<&'a T> {
        slot.as_ref()
            .ok_or_else(|| Error::Config(format!("pipeline is missing its {what} model")))
    }

    pub fn predict_detailed<S: AsRef<str>>(&self, emb: &EmbeddingMatrix, tokens: &[S]) -> Result<SentenceOutput> {
        match self.mode {
            Mode::Single => {
                let p = Self::need(&self.single, "single")?.decode(emb, tokens)?;
                Ok(SentenceOutput { tags: p.tags, gate: None })
            }
            Mode::Double => {
                let s = Self::need(&self.strong, "strong")?.decode(emb, tokens)?;
                let w = Self::need(&self.weak, "weak")?.decode(emb, tokens)?;
                Ok(SentenceOutput {
                    tags: apply_gate(1, &s, &w)?,
                    gate: Some(1),
                })
            }
            Mode::Adaptive => {
                let det = Self::need(&self.detector, "detector")?;
                let gate = det.predict(emb, tokens, self.threshold)?;
                let s = Self::need(&self.strong, "strong")?.decode(emb, tokens)?;
                let tags = if gate == 0 {
                    s.tags
                } else {
                    let w = Self::need(&self.weak, "weak")?.decode(emb, tokens)?;
                    merge_positionwise(&s, &w)?
                };
                Ok(SentenceOutput { tags, gate: Some(gate) })
            }
        }
    }

    pub fn predict<S: AsRef<str>>(&self, emb: &EmbeddingMatrix, tokens: &[S]) -> Result<Vec<String>> {
        Ok(self.predict_detailed(emb, tokens)?.tags)
    }

    /// Predicts every sentence, fanning out across threads; output order
    /// follows the corpus.
    pub fn predict_corpus(&self, emb: &EmbeddingMatrix, corpus: &Corpus) -> Result<Vec<SentenceOutput>> {
        crate::parallel::try_map(&corpus.sentences, |s| self.predict_detailed(emb, &s.surfaces()))
    }

    /// Builds a pipeline from checkpoints named in `config`.
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let tagger = |p: &Option<PathBuf>| -> Result<Tagger> {
            let p = p.as_ref().expect("validated");
            Tagger::from_checkpoint(&Checkpoint::load(p).map_err(|e| missing(p, e))?)
        };
        Ok(match config.mode {
            Mode::Single => Pipeline::single(tagger(&config.single)?),
            Mode::Double => Pipeline::double(tagger(&config.strong)?, tagger(&config.weak)?),
            Mode::Adaptive => {
                let p = config.detector.as_ref().expect("validated");
                let det = Detector::from_checkpoint(&Checkpoint::load(p).map_err(|e| missing(p, e))?)?;
                Pipeline::adaptive(tagger(&config.strong)?, tagger(&config.weak)?, det, config.threshold)
            }
        })
    }
}

fn missing(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    }
}

/// Key-value pipeline description.
///
/// ```text
/// mode = adaptive
/// checkpoint.strong = strong.ckpt
/// checkpoint.weak = weak.ckpt
/// checkpoint.detector = detector.ckpt
/// embeddings = vectors.txt
/// threshold = 0.5
/// strong_types = geo,tim,org,per,gpe
/// weak_types = art,eve,nat
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub single: Option<PathBuf>,
    pub strong: Option<PathBuf>,
    pub weak: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub threshold: f64,
    pub strong_types: Vec<String>,
    pub weak_types: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::Adaptive,
            single: None,
            strong: None,
            weak: None,
            detector: None,
            embeddings: None,
            threshold: 0.5,
            strong_types: crate::corpus::DEFAULT_STRONG.iter().map(|s| s.to_string()).collect(),
            weak_types: crate::corpus::DEFAULT_WEAK.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PipelineConfig {
    /// Parses `key = value` lines. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        let list = |v: &str| v.split(',').map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "mode" => cfg.mode = v.parse()?,
                "checkpoint.single" => cfg.single = Some(resolve(v)),
                "checkpoint.strong" => cfg.strong = Some(resolve(v)),
                "checkpoint.weak" => cfg.weak = Some(resolve(v)),
                "checkpoint.detector" => cfg.detector = Some(resolve(v)),
                "embeddings" => cfg.embeddings = Some(resolve(v)),
                "threshold" => {
                    cfg.threshold = v.parse().map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("threshold {v:?} is not a number"),
                    })?
                }
                "strong_types" => cfg.strong_types = list(v),
                "weak_types" => cfg.weak_types = list(v),
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let need = |slot: &Option<PathBuf>, key: &str| {
            slot.as_ref()
                .map(|_| ())
                .ok_or_else(|| Error::Config(format!("mode {} requires checkpoint.{key}", self.mode)))
        };
        match self.mode {
            Mode::Single => need(&self.single, "single")?,
            Mode::Double => {
                need(&self.strong, "strong")?;
                need(&self.weak, "weak")?;
            }
            Mode::Adaptive => {
                need(&self.strong, "strong")?;
                need(&self.weak, "weak")?;
                need(&self.detector, "detector")?;
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("mode = {}\n", self.mode);
        for (key, slot) in [
            ("checkpoint.single", &self.single),
            ("checkpoint.strong", &self.strong),
            ("checkpoint.weak", &self.weak),
            ("checkpoint.detector", &self.detector),
            ("embeddings", &self.embeddings),
        ] {
            if let Some(p) = slot {
                out.push_str(&format!("{key} = {}\n", p.display()));
            }
        }
        out.push_str(&format!("threshold = {}\n", self.threshold));
        out.push_str(&format!("strong_types = {}\n", self.strong_types.join(",")));
        out.push_str(&format!("weak_types = {}\n", self.weak_types.join(",")));
        out
    }
}
