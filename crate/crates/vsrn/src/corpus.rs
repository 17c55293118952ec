//! Synthetic retrieval corpus: concept prototypes rendered as noisy region
//! features paired with concept-list captions, plus a length-prefixed
//! binary file format with a UTF-8 vocabulary sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io_util::{Frame, FrameReader};
use crate::region::RegionSet;
use crate::text::{TokenSequence, Vocabulary};

const CORPUS_MAGIC: &[u8; 4] = b"VSRC";
const CORPUS_VERSION: u32 = 1;
/// Standard deviation of the per-coordinate region noise.
const REGION_NOISE_SIGMA: f64 = 0.1;

/// One image/caption pair.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub regions: RegionSet,
    pub caption: TokenSequence,
}

/// Generated dataset with contiguous train/val/test splits and an identity
/// ground-truth pairing.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub items: Vec<CorpusItem>,
    pub vocab: Vocabulary,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub canvas_width: u32,
    pub canvas_height: u32,
}

impl SyntheticCorpus {
    pub fn train_items(&self) -> &[CorpusItem] {
        &self.items[..self.n_train]
    }

    pub fn val_items(&self) -> &[CorpusItem] {
        &self.items[self.n_train..self.n_train + self.n_val]
    }

    pub fn test_items(&self) -> &[CorpusItem] {
        &self.items[self.n_train + self.n_val..]
    }

    pub fn split_items(&self, split: Split) -> &[CorpusItem] {
        match split {
            Split::Train => self.train_items(),
            Split::Val => self.val_items(),
            Split::Test => self.test_items(),
        }
    }
}

/// Which contiguous slice of the corpus to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!(
                "unknown split {other:?} (expected train, val, or test)"
            ))),
        }
    }
}

/// Generation parameters.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_concepts: usize,
    /// Concepts sampled per item; all items get distinct concept sets.
    pub concepts_per_item: usize,
    pub k_regions: usize,
    pub feature_dim: usize,
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_train: 64,
            n_val: 16,
            n_test: 16,
            n_concepts: 12,
            concepts_per_item: 3,
            k_regions: 6,
            feature_dim: 64,
            canvas_width: 64,
            canvas_height: 64,
            seed: 0,
        }
    }
}

/// Deterministic pseudo-word for concept `index`.
fn concept_name(index: usize) -> String {
    const CONSONANTS: [char; 12] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't'];
    const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
    let syllable = |i: usize| {
        let mut s = String::new();
        s.push(CONSONANTS[(i / VOWELS.len()) % CONSONANTS.len()]);
        s.push(VOWELS[i % VOWELS.len()]);
        s
    };
    let first = index % (CONSONANTS.len() * VOWELS.len());
    let second = index / (CONSONANTS.len() * VOWELS.len());
    format!("{}{}", syllable(first), syllable(second))
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut result = 1.0;
    for i in 0..k {
        result *= (n - i) as f64 / (i + 1) as f64;
    }
    result
}

/// Probability that two distinct items share at least one concept, given
/// that concept sets are sampled uniformly without replacement among all
/// size-c subsets.
pub fn expected_overlap_probability(spec: &CorpusSpec) -> f64 {
    let total = binomial(spec.n_concepts, spec.concepts_per_item);
    let disjoint = binomial(
        spec.n_concepts - spec.concepts_per_item,
        spec.concepts_per_item,
    );
    1.0 - disjoint / (total - 1.0)
}

/// Draw a deterministic corpus: per-concept prototype vectors, per-item
/// concept subsets (all distinct), one noisy prototype per region, random
/// boxes and confidences, and captions listing the concept names in random
/// order. Ground truth is the identity pairing.
pub fn generate_synthetic_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    let n_items = spec.n_train + spec.n_val + spec.n_test;
    if n_items == 0 {
        return Err(Error::Parameter("corpus needs at least one item".into()));
    }
    if spec.n_concepts < 2 {
        return Err(Error::Parameter("need at least two concepts".into()));
    }
    if spec.concepts_per_item == 0 || spec.concepts_per_item > spec.n_concepts {
        return Err(Error::Parameter(format!(
            "concepts_per_item {} out of range for {} concepts",
            spec.concepts_per_item, spec.n_concepts
        )));
    }
    if spec.k_regions < spec.concepts_per_item {
        return Err(Error::Parameter(format!(
            "{} regions cannot cover {} concepts per item",
            spec.k_regions, spec.concepts_per_item
        )));
    }
    if spec.feature_dim == 0 || spec.canvas_width == 0 || spec.canvas_height == 0 {
        return Err(Error::Parameter(
            "feature dimension and canvas must be positive".into(),
        ));
    }
    let distinct_sets = binomial(spec.n_concepts, spec.concepts_per_item);
    if (n_items as f64) > distinct_sets {
        return Err(Error::Parameter(format!(
            "cannot draw {n_items} distinct concept sets from {distinct_sets} possibilities"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("valid parameters");
    let noise = Normal::new(0.0, REGION_NOISE_SIGMA).expect("valid parameters");

    let prototypes: Vec<Vec<f64>> = (0..spec.n_concepts)
        .map(|_| (0..spec.feature_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();

    let mut seen_sets = std::collections::HashSet::new();
    let mut raw_items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let concepts = loop {
            let mut picked: Vec<usize> =
                sample(&mut rng, spec.n_concepts, spec.concepts_per_item).into_vec();
            picked.sort_unstable();
            if seen_sets.insert(picked.clone()) {
                break picked;
            }
        };

        let mut features = Vec::with_capacity(spec.k_regions * spec.feature_dim);
        let mut boxes = Vec::with_capacity(spec.k_regions);
        let mut confidences = Vec::with_capacity(spec.k_regions);
        for region in 0..spec.k_regions {
            let prototype = &prototypes[concepts[region % concepts.len()]];
            features.extend(prototype.iter().map(|p| p + noise.sample(&mut rng)));
            let max_w = (spec.canvas_width as f64 / 2.0).max(2.0);
            let max_h = (spec.canvas_height as f64 / 2.0).max(2.0);
            let w = rng.random_range(1.0..=max_w);
            let h = rng.random_range(1.0..=max_h);
            let x = rng.random_range(0.0..=(spec.canvas_width as f64 - w).max(0.0));
            let y = rng.random_range(0.0..=(spec.canvas_height as f64 - h).max(0.0));
            boxes.push([x, y, w, h]);
            confidences.push(rng.random_range(0.0..=1.0));
        }
        let regions = RegionSet::new(spec.feature_dim, features, boxes, confidences)?;

        let mut names: Vec<String> = concepts.iter().map(|&c| concept_name(c)).collect();
        names.shuffle(&mut rng);
        raw_items.push((regions, names.join(" ")));
    }

    let train_texts: Vec<&str> = raw_items[..spec.n_train]
        .iter()
        .map(|(_, text)| text.as_str())
        .collect();
    let vocab = Vocabulary::from_texts(&train_texts);

    let items = raw_items
        .into_iter()
        .map(|(regions, text)| CorpusItem {
            regions,
            caption: vocab.encode(&text),
        })
        .collect();

    Ok(SyntheticCorpus {
        items,
        vocab,
        n_train: spec.n_train,
        n_val: spec.n_val,
        n_test: spec.n_test,
        feature_dim: spec.feature_dim,
        canvas_width: spec.canvas_width,
        canvas_height: spec.canvas_height,
    })
}

/// Sidecar path holding the vocabulary, one token per line.
pub fn vocab_sidecar_path(corpus_path: &Path) -> PathBuf {
    let mut name = corpus_path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".vocab");
    corpus_path.with_file_name(name)
}

/// Write the corpus binary plus its vocabulary sidecar.
pub fn save_corpus(corpus: &SyntheticCorpus, path: &Path) -> Result<()> {
    let mut frame = Frame::new(CORPUS_MAGIC, CORPUS_VERSION);
    frame.put_u32(corpus.n_train as u32);
    frame.put_u32(corpus.n_val as u32);
    frame.put_u32(corpus.n_test as u32);
    frame.put_u32(corpus.feature_dim as u32);
    frame.put_u32(corpus.canvas_width);
    frame.put_u32(corpus.canvas_height);
    for item in &corpus.items {
        let regions = &item.regions;
        frame.put_u32(regions.k() as u32);
        frame.put_f64s(regions.features());
        for b in regions.boxes() {
            frame.put_f64s(b);
        }
        frame.put_f64s(regions.confidences());
        frame.put_u32(item.caption.len() as u32);
        for &id in item.caption.ids() {
            frame.put_u32(id);
        }
    }
    fs::write(path, frame.finish())?;

    let mut sidecar = String::new();
    for token in corpus.vocab.tokens() {
        sidecar.push_str(token);
        sidecar.push('\n');
    }
    fs::write(vocab_sidecar_path(path), sidecar)?;
    Ok(())
}

/// Load a corpus binary and its vocabulary sidecar.
pub fn load_corpus(path: &Path) -> Result<SyntheticCorpus> {
    let sidecar = fs::read_to_string(vocab_sidecar_path(path))?;
    let tokens: Vec<String> = sidecar.lines().map(str::to_string).collect();
    let vocab = Vocabulary::from_token_list(tokens)?;

    let data = fs::read(path)?;
    let mut reader = FrameReader::open(&data, CORPUS_MAGIC, CORPUS_VERSION)?;
    let n_train = reader.get_u32()? as usize;
    let n_val = reader.get_u32()? as usize;
    let n_test = reader.get_u32()? as usize;
    let feature_dim = reader.get_u32()? as usize;
    let canvas_width = reader.get_u32()?;
    let canvas_height = reader.get_u32()?;
    let n_items = n_train + n_val + n_test;

    let mut items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let k = reader.get_u32()? as usize;
        let features = reader.get_f64s(k * feature_dim)?;
        let mut boxes = Vec::with_capacity(k);
        for _ in 0..k {
            let b = reader.get_f64s(4)?;
            boxes.push([b[0], b[1], b[2], b[3]]);
        }
        let confidences = reader.get_f64s(k)?;
        let caption_len = reader.get_u32()? as usize;
        let mut ids = Vec::with_capacity(caption_len);
        for _ in 0..caption_len {
            ids.push(reader.get_u32()?);
        }
        items.push(CorpusItem {
            regions: RegionSet::new(feature_dim, features, boxes, confidences)?,
            caption: TokenSequence::new(ids, vocab.size())?,
        });
    }
    reader.expect_end()?;

    Ok(SyntheticCorpus {
        items,
        vocab,
        n_train,
        n_val,
        n_test,
        feature_dim,
        canvas_width,
        canvas_height,
    })
}
