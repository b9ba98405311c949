//! Procedurally generated two-domain emotion corpus.
//!
//! The source domain renders emotion-cued images in a "realistic" style
//! (smooth gradients plus Gaussian blobs); the target domain interpolates
//! toward a "sticker" style (flat tints, crisp geometric outlines). Three
//! knobs control the domain gap: `style_shift` (rendering divergence),
//! `prior_shift` (total-variation distance of the target label prior from
//! uniform), and `vocab_shift` (fraction of domain-exclusive caption
//! vocabulary). At zero shift the two domains are distributionally
//! identical by construction.
//!
//! Every sample is generated from a seed derived as
//! `derive_seed(spec.seed, split_tag · 2³² + index)`, so generation is a
//! pure per-sample function and parallel generation yields identical
//! datasets in any execution order.

mod captions;
mod io;
mod render;

pub use captions::{generate_caption, grammar_vocabulary, CaptionTables};
pub use io::{load_dataset, save_dataset};
pub use render::render_image;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::map_indexed;
use crate::rng::{derive_seed, stream_rng};

/// Fixed label list; `K` may select a prefix of it.
pub const LABEL_NAMES: [&str; 6] = ["joy", "sadness", "anger", "fear", "surprise", "disgust"];

/// One emotion class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionLabel {
    pub index: usize,
}

impl EmotionLabel {
    pub fn new(index: usize, num_classes: usize) -> Result<Self> {
        if index >= num_classes || num_classes > LABEL_NAMES.len() {
            return Err(Error::InvalidLabel {
                index,
                num_classes,
            });
        }
        Ok(Self { index })
    }

    pub fn name(&self) -> &'static str {
        LABEL_NAMES[self.index]
    }
}

/// Which domain a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One sample: image, caption, domain tag, optional label.
#[derive(Debug, Clone)]
pub struct CaptionedImage {
    pub id: String,
    pub pixels: Array3<f32>,
    pub caption: String,
    pub domain: Domain,
    pub label: Option<EmotionLabel>,
}

/// Generation parameters for a two-domain corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_source: usize,
    pub n_target: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    pub style_shift: f64,
    pub prior_shift: f64,
    pub vocab_shift: f64,
    pub seed: u64,
}

fn default_k() -> usize {
    6
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_source: 6000,
            n_target: 6000,
            k: 6,
            style_shift: 0.8,
            prior_shift: 0.4,
            vocab_shift: 0.5,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.k < 2 || self.k > LABEL_NAMES.len() {
            return Err(Error::Config(format!(
                "k must be in [2, {}], got {}",
                LABEL_NAMES.len(),
                self.k
            )));
        }
        if self.k > self.n_source || self.k > self.n_target {
            return Err(Error::Config(format!(
                "impossible counts: k = {} exceeds a split size",
                self.k
            )));
        }
        for (name, v) in [
            ("style_shift", self.style_shift),
            ("prior_shift", self.prior_shift),
            ("vocab_shift", self.vocab_shift),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Held-out test-split size for a train-split size.
    pub fn test_size(n: usize) -> usize {
        (n / 5).max(1)
    }
}

/// An immutable list of samples.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<CaptionedImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generated corpus: train/test splits per domain.
///
/// Target training labels are withheld from the samples themselves; they are
/// kept in a private side table reachable only through the explicitly
/// evaluation-scoped accessor.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: DatasetSpec,
    pub source_train: Dataset,
    pub target_train: Dataset,
    pub source_test: Dataset,
    pub target_test: Dataset,
    target_train_labels: Vec<usize>,
}

impl Corpus {
    /// Hidden target-train labels, for evaluation metrics only (never for
    /// training signal).
    pub fn eval_only_target_train_labels(&self) -> &[usize] {
        &self.target_train_labels
    }
}

// Split tags for per-sample seed streams.
const TAG_SOURCE_TRAIN: u64 = 1;
const TAG_TARGET_TRAIN: u64 = 2;
const TAG_SOURCE_TEST: u64 = 3;
const TAG_TARGET_TEST: u64 = 4;
const TAG_TARGET_PRIOR: u64 = 5;

fn sample_seed(spec_seed: u64, split_tag: u64, index: usize) -> u64 {
    derive_seed(spec_seed, split_tag * (1 << 32) + index as u64)
}

/// Target label prior: a seeded Dirichlet direction scaled so that its
/// total-variation distance from uniform is `prior_shift` (capped just
/// below the maximum achievable (k−1)/k).
fn target_prior(spec: &DatasetSpec) -> Vec<f64> {
    let k = spec.k;
    let uniform = 1.0 / k as f64;
    let max_tv = 1.0 - uniform;
    let tv_goal = spec.prior_shift.min(0.999 * max_tv);
    if tv_goal <= 0.0 {
        return vec![uniform; k];
    }
    let mut rng = stream_rng(spec.seed, TAG_TARGET_PRIOR);
    for _ in 0..256 {
        // Dirichlet(1,…,1) via normalized exponentials
        let mut d: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().ln()).collect();
        let s: f64 = d.iter().sum();
        d.iter_mut().for_each(|x| *x /= s);
        let tv: f64 = 0.5 * d.iter().map(|x| (x - uniform).abs()).sum::<f64>();
        if tv < 1e-9 {
            continue;
        }
        let scale = tv_goal / tv;
        let p: Vec<f64> = d.iter().map(|x| uniform + scale * (x - uniform)).collect();
        if p.iter().all(|&x| x > 1e-6) {
            return p;
        }
    }
    // extreme shifts: fall back to a single-class spike of the right TV
    let mut p = vec![(1.0 - (uniform + tv_goal)) / (k - 1) as f64; k];
    p[0] = uniform + tv_goal;
    p
}

fn draw_from_prior(rng: &mut impl Rng, prior: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    prior.len() - 1
}

fn make_sample(
    spec: &DatasetSpec,
    split: &str,
    split_tag: u64,
    index: usize,
    domain: Domain,
    label_index: usize,
    with_label: bool,
) -> CaptionedImage {
    let seed = sample_seed(spec.seed, split_tag, index);
    let label = EmotionLabel { index: label_index };
    let pixels = render_image(label, domain, spec.style_shift, seed).expect("valid label");
    let caption = generate_caption(label, domain, spec.vocab_shift, seed).expect("valid label");
    CaptionedImage {
        id: format!("{split}-{index:06}"),
        pixels,
        caption,
        domain,
        label: with_label.then_some(label),
    }
}

/// Generate the full corpus described by `spec`.
///
/// Source labels are drawn uniformly; target labels from the shifted prior.
/// Target-train samples carry no label (hidden labels are stored for
/// evaluation only). All splits are disjoint by construction of their seed
/// streams.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Corpus> {
    spec.validate()?;
    let k = spec.k;
    let prior = target_prior(spec);

    let uniform_label = |seed: u64| {
        let mut rng = stream_rng(seed, 0xA);
        rng.gen_range(0..k)
    };
    let prior_label = |seed: u64| {
        let mut rng = stream_rng(seed, 0xA);
        draw_from_prior(&mut rng, &prior)
    };

    let source_train = Dataset {
        samples: map_indexed(spec.n_source, |i| {
            let seed = sample_seed(spec.seed, TAG_SOURCE_TRAIN, i);
            let li = uniform_label(seed);
            make_sample(spec, "source-train", TAG_SOURCE_TRAIN, i, Domain::Source, li, true)
        }),
    };
    let source_test = Dataset {
        samples: map_indexed(DatasetSpec::test_size(spec.n_source), |i| {
            let seed = sample_seed(spec.seed, TAG_SOURCE_TEST, i);
            let li = uniform_label(seed);
            make_sample(spec, "source-test", TAG_SOURCE_TEST, i, Domain::Source, li, true)
        }),
    };
    let target_labels: Vec<usize> = map_indexed(spec.n_target, |i| {
        let seed = sample_seed(spec.seed, TAG_TARGET_TRAIN, i);
        prior_label(seed)
    });
    let target_train = Dataset {
        samples: map_indexed(spec.n_target, |i| {
            make_sample(
                spec,
                "target-train",
                TAG_TARGET_TRAIN,
                i,
                Domain::Target,
                target_labels[i],
                false,
            )
        }),
    };
    let target_test = Dataset {
        samples: map_indexed(DatasetSpec::test_size(spec.n_target), |i| {
            let seed = sample_seed(spec.seed, TAG_TARGET_TEST, i);
            let li = prior_label(seed);
            make_sample(spec, "target-test", TAG_TARGET_TEST, i, Domain::Target, li, true)
        }),
    };

    Ok(Corpus {
        spec: spec.clone(),
        source_train,
        target_train,
        source_test,
        target_test,
        target_train_labels: target_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        let mut spec = DatasetSpec::default();
        spec.n_source = 0;
        assert!(spec.validate().is_err());
        let mut spec = DatasetSpec::default();
        spec.k = 1;
        assert!(spec.validate().is_err());
        let mut spec = DatasetSpec::default();
        spec.k = 7;
        assert!(spec.validate().is_err());
        let mut spec = DatasetSpec {
            n_source: 3,
            n_target: 3,
            ..DatasetSpec::default()
        };
        spec.k = 6;
        assert!(spec.validate().is_err());
        let mut spec = DatasetSpec::default();
        spec.style_shift = 1.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec {
            n_source: 20,
            n_target: 20,
            seed: 7,
            ..DatasetSpec::default()
        };
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        for (x, y) in a.source_train.samples.iter().zip(&b.source_train.samples) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.caption, y.caption);
            assert_eq!(x.label, y.label);
        }
        for (x, y) in a.target_train.samples.iter().zip(&b.target_train.samples) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.caption, y.caption);
        }
    }

    #[test]
    fn target_train_exposes_no_labels() {
        let spec = DatasetSpec {
            n_source: 12,
            n_target: 12,
            ..DatasetSpec::default()
        };
        let corpus = generate_dataset(&spec).unwrap();
        assert!(corpus.target_train.samples.iter().all(|s| s.label.is_none()));
        assert!(corpus.source_train.samples.iter().all(|s| s.label.is_some()));
        assert_eq!(
            corpus.eval_only_target_train_labels().len(),
            corpus.target_train.len()
        );
    }

    #[test]
    fn zero_prior_shift_is_uniform() {
        let spec = DatasetSpec {
            prior_shift: 0.0,
            ..DatasetSpec::default()
        };
        assert_eq!(target_prior(&spec), vec![1.0 / 6.0; 6]);
    }

    #[test]
    fn prior_shift_hits_requested_tv() {
        for shift in [0.1, 0.25, 0.4, 0.6] {
            let spec = DatasetSpec {
                prior_shift: shift,
                ..DatasetSpec::default()
            };
            let p = target_prior(&spec);
            let tv: f64 = 0.5 * p.iter().map(|x| (x - 1.0 / 6.0).abs()).sum::<f64>();
            assert!((tv - shift).abs() < 1e-9, "tv {tv} vs shift {shift}");
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
