//! Seeded synthetic corpora with a controllable Strong:Weak imbalance.
//!
//! A sentence is a run of segments. Each segment is either a single `O`
//! token or an entity span of 1 to `max_span` tokens tagged `B-x I-x …`.
//! Segment types are drawn i.i.d. with probabilities proportional to
//! `frequency / mean segment length`, and segments are appended until the
//! sentence reaches its drawn target length. Because that stopping rule
//! only looks at past segments, expected token shares equal the configured
//! frequencies exactly; the last span may overshoot the target length.
//!
//! Every type draws surfaces from its own lexicon. A small pool of words is
//! shared by all entity lexicons, so those tokens can only be resolved from
//! context.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::corpus::{Corpus, Sentence, Split, TagSet, Token, DEFAULT_STRONG, DEFAULT_WEAK, OUTSIDE};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Table-1 shaped token shares: O ≈ 45 %, Strong types in their Table-1
/// proportions, Weak types likewise, Strong:Weak = `ratio`:1.
pub fn default_frequencies(ratio: f64) -> Vec<(String, f64)> {
    let strong_counts = [("geo", 37644.0), ("tim", 20333.0), ("org", 20143.0), ("per", 16990.0), ("gpe", 15869.0)];
    let weak_counts = [("art", 402.0), ("eve", 308.0), ("nat", 201.0)];
    let outside = 0.45;
    let entity = 1.0 - outside;
    let strong_mass = entity * ratio / (ratio + 1.0);
    let weak_mass = entity / (ratio + 1.0);
    let st: f64 = strong_counts.iter().map(|(_, c)| c).sum();
    let wt: f64 = weak_counts.iter().map(|(_, c)| c).sum();
    let mut out = vec![(OUTSIDE.to_string(), outside)];
    out.extend(strong_counts.iter().map(|(t, c)| (t.to_string(), strong_mass * c / st)));
    out.extend(weak_counts.iter().map(|(t, c)| (t.to_string(), weak_mass * c / wt)));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub train_sentences: usize,
    pub val_sentences: usize,
    pub test_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_span: usize,
    /// Token share per type, `O` included; must sum to 1.
    pub frequencies: Vec<(String, f64)>,
    pub strong: Vec<String>,
    pub weak: Vec<String>,
    pub outside_vocab: usize,
    pub entity_vocab: usize,
    /// Fraction of each entity lexicon drawn from the shared pool.
    pub shared_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            train_sentences: 5000,
            val_sentences: 1000,
            test_sentences: 1000,
            min_len: 6,
            max_len: 20,
            max_span: 3,
            frequencies: default_frequencies(50.0),
            strong: DEFAULT_STRONG.iter().map(|s| s.to_string()).collect(),
            weak: DEFAULT_WEAK.iter().map(|s| s.to_string()).collect(),
            outside_vocab: 400,
            entity_vocab: 150,
            shared_fraction: 0.05,
        }
    }
}

/// Generated splits together with the lexicons behind them.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
    pub lexicons: Vec<(String, Vec<String>)>,
    pub shared: Vec<String>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.min_len == 0 || self.max_len < self.min_len {
            return bad(format!("length range {}..={} is empty", self.min_len, self.max_len));
        }
        if self.max_span == 0 || self.entity_vocab == 0 || self.outside_vocab == 0 {
            return bad("span length and lexicon sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.shared_fraction) {
            return bad(format!("shared fraction {} outside [0, 1)", self.shared_fraction));
        }
        if self.frequencies.iter().any(|(_, f)| !(f.is_finite() && *f >= 0.0)) {
            return bad("frequencies must be finite and non-negative".into());
        }
        let total: f64 = self.frequencies.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("frequencies sum to {total}, not 1"));
        }
        if !self.frequencies.iter().any(|(t, f)| t == OUTSIDE && *f > 0.0) {
            return bad("O must have positive frequency".into());
        }
        for (t, _) in &self.frequencies {
            if t != OUTSIDE && !self.strong.contains(t) && !self.weak.contains(t) {
                return bad(format!("type {t} is neither strong nor weak"));
            }
        }
        TagSet::with_partition(&self.strong, &self.weak)?;
        Ok(())
    }

    /// Mean tokens per segment of `ty`.
    pub fn mean_segment_len(&self, ty: &str) -> f64 {
        if ty == OUTSIDE {
            1.0
        } else {
            (1 + self.max_span) as f64 / 2.0
        }
    }

    /// Probability that a segment has type `ty`.
    pub fn segment_probabilities(&self) -> Vec<(String, f64)> {
        let raw: Vec<(String, f64)> = self
            .frequencies
            .iter()
            .map(|(t, f)| (t.clone(), f / self.mean_segment_len(t)))
            .collect();
        let z: f64 = raw.iter().map(|(_, w)| w).sum();
        raw.into_iter().map(|(t, w)| (t, w / z)).collect()
    }

    pub fn tagset(&self) -> Result<TagSet> {
        TagSet::with_partition(&self.strong, &self.weak)
    }

    pub fn generate(&self) -> Result<SynthCorpus> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lexicons, shared) = self.lexicons(&mut rng);
        let seg = self.segment_probabilities();
        let dist = WeightedIndex::new(seg.iter().map(|(_, p)| *p))
            .map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;

        let mut make = |n: usize, split: Split| -> Result<Corpus> {
            let sentences = (0..n)
                .map(|_| self.sentence(&mut rng, &seg, &dist, &lexicons))
                .collect();
            Corpus::from_sentences(sentences, self.tagset()?, split)
        };
        let train = make(self.train_sentences, Split::Train)?;
        let val = make(self.val_sentences, Split::Val)?;
        let test = make(self.test_sentences, Split::Test)?;
        Ok(SynthCorpus {
            train,
            val,
            test,
            lexicons,
            shared,
        })
    }

    fn lexicons(&self, rng: &mut ChaCha8Rng) -> (Vec<(String, Vec<String>)>, Vec<String>) {
        let mut used = std::collections::HashSet::new();
        let mut fresh = |rng: &mut ChaCha8Rng, capital: bool| loop {
            let w = pseudo_word(rng, capital);
            // Embedding lookup folds case, so "Maiza" and "maiza" would collide.
            if used.insert(w.to_lowercase()) {
                break w;
            }
        };
        let n_shared = (self.entity_vocab as f64 * self.shared_fraction).round() as usize;
        let shared: Vec<String> = (0..n_shared).map(|_| fresh(rng, true)).collect();
        let lexicons = self
            .frequencies
            .iter()
            .map(|(t, _)| {
                let words = if t == OUTSIDE {
                    (0..self.outside_vocab).map(|_| fresh(rng, false)).collect()
                } else {
                    let mut w: Vec<String> = (0..self.entity_vocab - n_shared).map(|_| fresh(rng, true)).collect();
                    w.extend(shared.iter().cloned());
                    w
                };
                (t.clone(), words)
            })
            .collect();
        (lexicons, shared)
    }

    fn sentence(
        &self,
        rng: &mut ChaCha8Rng,
        seg: &[(String, f64)],
        dist: &WeightedIndex<f64>,
        lexicons: &[(String, Vec<String>)],
    ) -> Sentence {
        let target = rng.gen_range(self.min_len..=self.max_len);
        let mut tokens = Vec::with_capacity(target + self.max_span);
        while tokens.len() < target {
            let k = dist.sample(rng);
            let ty = &seg[k].0;
            let lex = &lexicons[k].1;
            if ty == OUTSIDE {
                tokens.push(Token::new(lex.choose(rng).expect("non-empty lexicon").clone(), OUTSIDE));
                continue;
            }
            let span = rng.gen_range(1..=self.max_span);
            for i in 0..span {
                let prefix = if i == 0 { "B" } else { "I" };
                let word = lex.choose(rng).expect("non-empty lexicon").clone();
                tokens.push(Token::new(word, format!("{prefix}-{ty}")));
            }
        }
        Sentence::new(tokens)
    }
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

fn pseudo_word(rng: &mut ChaCha8Rng, capital: bool) -> String {
    let syllables = rng.gen_range(2..=4);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).expect("non-empty"));
        w.push_str(VOWELS.choose(rng).expect("non-empty"));
    }
    if capital {
        let mut c = w.chars();
        let first = c.next().expect("non-empty").to_ascii_uppercase();
        w = std::iter::once(first).chain(c).collect();
    }
    w
}

/// Settings for type-clustered word vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorSpec {
    pub dim: usize,
    /// Norm of each independent type centroid.
    pub centroid_scale: f64,
    /// Per-component Gaussian noise around the centroid.
    pub noise: f64,
    /// When set, the i-th Weak type is centred this far from the centroid
    /// of the i-th Strong type (cyclically) instead of at its own random
    /// point, so rare words overlap a frequent type.
    pub weak_offset: Option<f64>,
    pub seed: u64,
}

impl Default for VectorSpec {
    fn default() -> Self {
        VectorSpec {
            dim: 16,
            centroid_scale: 1.0,
            noise: 0.4,
            weak_offset: None,
            seed: 0,
        }
    }
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut v: Vec<f64> = (0..dim).map(|_| unit.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v.iter_mut() {
        *x *= scale / norm;
    }
    v
}

/// Word vectors in which every lexicon clusters around its own centroid;
/// words of the shared pool sit around the origin.
pub fn clustered_vectors(corpus: &SynthCorpus, spec: &VectorSpec) -> Result<EmbeddingMatrix> {
    if spec.dim == 0 || !(spec.noise >= 0.0) || spec.weak_offset.is_some_and(|o| !(o >= 0.0)) {
        return Err(Error::Config(
            "vector dim must be positive, noise and weak offset non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let tagset = &corpus.train.tagset;

    let mut centroids: Vec<Vec<f64>> = corpus
        .lexicons
        .iter()
        .map(|_| random_direction(&mut rng, spec.dim, spec.centroid_scale))
        .collect();
    if let Some(offset) = spec.weak_offset {
        let strong: Vec<usize> = (0..corpus.lexicons.len())
            .filter(|&i| tagset.is_strong(&corpus.lexicons[i].0))
            .collect();
        let weak = (0..corpus.lexicons.len()).filter(|&i| tagset.is_weak(&corpus.lexicons[i].0));
        for (n, i) in weak.enumerate() {
            if strong.is_empty() {
                break;
            }
            let base = &centroids[strong[n % strong.len()]];
            let shift = random_direction(&mut rng, spec.dim, offset);
            centroids[i] = base.iter().zip(&shift).map(|(b, d)| b + d).collect();
        }
    }

    let mut emb = EmbeddingMatrix::empty(spec.dim);
    let mut v = vec![0.0; spec.dim];
    let shared: std::collections::HashSet<&str> = corpus.shared.iter().map(String::as_str).collect();
    for ((_, words), centroid) in corpus.lexicons.iter().zip(&centroids) {
        for w in words {
            if shared.contains(w.as_str()) {
                continue;
            }
            for (x, c) in v.iter_mut().zip(centroid) {
                *x = c + noise.sample(&mut rng);
            }
            emb.insert(w, &v)?;
        }
    }
    for w in &corpus.shared {
        for x in v.iter_mut() {
            *x = noise.sample(&mut rng);
        }
        emb.insert(w, &v)?;
    }
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{detector_counts, detector_labels, label_histogram};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            train_sentences: 300,
            val_sentences: 50,
            test_sentences: 50,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn default_frequencies_sum_to_one_at_fifty_to_one() {
        let f = default_frequencies(50.0);
        let total: f64 = f.iter().map(|(_, x)| x).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let strong: f64 = f.iter().filter(|(t, _)| DEFAULT_STRONG.contains(&t.as_str())).map(|(_, x)| x).sum();
        let weak: f64 = f.iter().filter(|(t, _)| DEFAULT_WEAK.contains(&t.as_str())).map(|(_, x)| x).sum();
        assert!((strong / weak - 50.0).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = small(4).generate().unwrap();
        let b = small(4).generate().unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_ne!(a.train, small(5).generate().unwrap().train);
    }

    #[test]
    fn zero_weak_frequency_means_no_positives() {
        let mut spec = small(1);
        let mut freqs = default_frequencies(50.0);
        let weak_mass: f64 = freqs.iter().filter(|(t, _)| DEFAULT_WEAK.contains(&t.as_str())).map(|(_, x)| x).sum();
        for (t, f) in freqs.iter_mut() {
            if DEFAULT_WEAK.contains(&t.as_str()) {
                *f = 0.0;
            } else if t == OUTSIDE {
                *f += weak_mass;
            }
        }
        spec.frequencies = freqs;
        let c = spec.generate().unwrap();
        assert_eq!(detector_counts(&detector_labels(&c.train)), (300, 0));
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut spec = small(0);
        spec.frequencies[0].1 += 0.1;
        assert!(matches!(spec.generate(), Err(Error::Config(_))));
        let mut spec = small(0);
        spec.min_len = 0;
        assert!(spec.validate().is_err());
        let mut spec = small(0);
        spec.frequencies.push(("zzz".into(), 0.0));
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tags_are_bio_valid() {
        let c = small(2).generate().unwrap();
        for s in c.train.sentences.iter().chain(&c.val.sentences) {
            let mut prev: Option<&str> = None;
            for t in &s.tokens {
                if let Some(ty) = t.gold_tag.strip_prefix("I-") {
                    let ok = prev.is_some_and(|p| p == format!("B-{ty}") || p == format!("I-{ty}"));
                    assert!(ok, "{:?}", s.tags());
                }
                prev = Some(&t.gold_tag);
            }
        }
    }

    #[test]
    fn histogram_types_follow_partition() {
        let c = small(3).generate().unwrap();
        let h = label_histogram(&c.train);
        assert!(h.get("O") > 0 && h.get("geo") > 0);
        assert_eq!(h.total(), c.train.num_tokens());
    }

    #[test]
    fn clustered_vectors_cover_every_word() {
        let c = small(3).generate().unwrap();
        let emb = clustered_vectors(&c, &VectorSpec::default()).unwrap();
        for s in &c.train.sentences {
            for t in &s.tokens {
                assert_ne!(emb.index_of(&t.surface), crate::corpus::UNK_INDEX, "{}", t.surface);
            }
        }
        let distinct: std::collections::HashSet<String> = c
            .lexicons
            .iter()
            .flat_map(|(_, w)| w.iter().map(|x| x.to_lowercase()))
            .collect();
        assert_eq!(emb.vocab_size(), distinct.len() + 2);
    }
}
