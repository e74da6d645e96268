//! Seeded synthetic stand-in for the text encoder, image backbone and a
//! multi-label dataset with a seen/unseen split.
//!
//! Every class gets a unit prototype in text space. A class's text embedding
//! is its prototype plus noise, re-normalized. An image labelled `S` has `N`
//! tokens, each the mean of the prototypes in `S` pushed through a fixed
//! random linear map into image space, plus noise. All generated values are
//! rounded to `f32` so datasets survive the container format bit-exactly.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::encoder::{BankTextEncoder, TextEncoder};
use super::vocab::{split_seen_unseen, ClassVocabulary};
use super::{Provenance, QueryBankSource, SampleRecord, SampleSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::prompt::{builtin_template, render_prompt};
use crate::scalar::Scalar;

/// The 81 NUS-WIDE concept names, used to label synthetic classes.
pub const NUS_WIDE_CONCEPTS: [&str; 81] = [
    "airport", "animal", "beach", "bear", "birds", "boats", "book", "bridge", "buildings", "cars",
    "castle", "cat", "cityscape", "clouds", "computer", "coral", "cow", "dancing", "dog", "earthquake",
    "elk", "fire", "fish", "flags", "flowers", "food", "fox", "frost", "garden", "glacier", "grass",
    "harbor", "horses", "house", "lake", "leaf", "map", "military", "moon", "mountain", "nighttime",
    "ocean", "person", "plane", "plants", "police", "protest", "railroad", "rainbow", "reflection",
    "road", "rocks", "running", "sand", "sign", "sky", "snow", "soccer", "sports", "statue", "street",
    "sun", "sunset", "surf", "swimmers", "tattoo", "temple", "tiger", "tower", "town", "toy", "train",
    "tree", "valley", "vehicle", "water", "waterfall", "wedding", "whales", "window", "zebra",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub seen_fraction: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub tokens_per_image: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub sigma_image: f64,
    pub sigma_text: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 40,
            seen_fraction: 0.8,
            train_samples: 800,
            test_samples: 200,
            tokens_per_image: 9,
            image_dim: 64,
            text_dim: 32,
            min_labels: 1,
            max_labels: 3,
            sigma_image: 0.05,
            sigma_text: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn seen_count(&self) -> usize {
        ((self.classes as f64 * self.seen_fraction).round() as usize).clamp(1, self.classes.saturating_sub(1).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("train_samples", self.train_samples),
            ("test_samples", self.test_samples),
            ("tokens_per_image", self.tokens_per_image),
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
            ("min_labels", self.min_labels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes for a seen/unseen split".into()));
        }
        if !(self.seen_fraction > 0.0 && self.seen_fraction < 1.0) {
            return Err(Error::Config("seen_fraction must lie strictly between 0 and 1".into()));
        }
        if !(self.sigma_image >= 0.0 && self.sigma_text >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if self.min_labels > self.max_labels {
            return Err(Error::Config("min_labels exceeds max_labels".into()));
        }
        let seen = self.seen_count();
        let unseen = self.classes - seen;
        if self.max_labels > seen.min(unseen) {
            return Err(Error::Config(format!(
                "max_labels {} exceeds the {seen} seen or {unseen} unseen classes",
                self.max_labels
            )));
        }
        Ok(())
    }
}

/// Everything the generator produces.
#[derive(Debug, Clone)]
pub struct SyntheticDataset<T> {
    pub vocab: ClassVocabulary,
    /// Seen-label records only.
    pub train: SampleSet<T>,
    /// Unseen-only label sets.
    pub test_zsl: SampleSet<T>,
    /// Label sets drawn from all classes.
    pub test_gzsl: SampleSet<T>,
    pub query_bank: QueryBankSource<T>,
    /// Image-level prompt embedding per record, one matrix per split.
    pub train_prompts: Matrix<T>,
    pub test_zsl_prompts: Matrix<T>,
    pub test_gzsl_prompts: Matrix<T>,
    /// Noise-free class prototypes (`C x d_text`).
    pub prototypes: Matrix<T>,
    /// Text-to-image linear map (`d_text x d_in`).
    pub image_map: Matrix<T>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn quantize<T: Scalar>(v: f64) -> T {
    T::of(v as f32 as f64)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

pub fn class_name(i: usize) -> String {
    NUS_WIDE_CONCEPTS
        .get(i)
        .map_or_else(|| format!("concept_{i}"), |s| s.to_string())
}

pub fn generate_synthetic_dataset<T: Scalar>(cfg: &SynthConfig) -> Result<SyntheticDataset<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, dt, di) = (cfg.classes, cfg.text_dim, cfg.image_dim);

    let prototypes: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let mut p: Vec<f64> = (0..dt).map(|_| gaussian(&mut rng)).collect();
            normalize(&mut p);
            p
        })
        .collect();
    let text: Vec<Vec<f64>> = prototypes
        .iter()
        .map(|p| {
            let mut t: Vec<f64> = p.iter().map(|&x| x + cfg.sigma_text * gaussian(&mut rng)).collect();
            normalize(&mut t);
            t
        })
        .collect();
    let scale = 1.0 / (dt as f64).sqrt();
    let map: Vec<f64> = (0..dt * di).map(|_| gaussian(&mut rng) * scale).collect();

    let unseen_count = c - cfg.seen_count();
    let mut seen = vec![true; c];
    for i in index::sample(&mut rng, c, unseen_count) {
        seen[i] = false;
    }
    let vocab = ClassVocabulary::new((0..c).map(|i| (class_name(i), seen[i])))?;
    let (seen_idx, unseen_idx) = split_seen_unseen(&vocab);
    let all_idx: Vec<usize> = (0..c).collect();

    let draw_split = |pool: &[usize], count: usize, rng: &mut ChaCha8Rng| -> Vec<SampleRecord<T>> {
        (0..count)
            .map(|_| {
                let k = rng.random_range(cfg.min_labels..=cfg.max_labels);
                let labels: Vec<usize> = index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
                let mut mean = vec![0.0; dt];
                for &l in &labels {
                    for (m, &p) in mean.iter_mut().zip(&prototypes[l]) {
                        *m += p / k as f64;
                    }
                }
                let mut base = vec![0.0; di];
                for (r, &m) in mean.iter().enumerate() {
                    for (b, &w) in base.iter_mut().zip(&map[r * di..(r + 1) * di]) {
                        *b += m * w;
                    }
                }
                let tokens = Matrix::from_fn(cfg.tokens_per_image, di, |_, j| {
                    quantize(base[j] + cfg.sigma_image * gaussian(rng))
                });
                SampleRecord::new(tokens, labels)
            })
            .collect()
    };
    let train = draw_split(&seen_idx, cfg.train_samples, &mut rng);
    let test_zsl = draw_split(&unseen_idx, cfg.test_samples, &mut rng);
    let test_gzsl = draw_split(&all_idx, cfg.test_samples, &mut rng);

    let to_matrix = |rows: &[Vec<f64>]| Matrix::from_fn(rows.len(), rows[0].len(), |r, k| quantize::<T>(rows[r][k]));
    let embeddings = to_matrix(&text);
    let prompts = |records: &[SampleRecord<T>]| -> Result<Matrix<T>> {
        let encoder = BankTextEncoder::new(&vocab, &embeddings, &all_idx)?;
        let template = builtin_template("photo")?;
        let rows = records
            .iter()
            .map(|r| {
                let names: Vec<&str> = r.labels.iter().map(|&l| vocab.name(l)).collect();
                encoder.encode(&render_prompt(&names, &template)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    };
    let set = |records| SampleSet {
        vocab: vocab.clone(),
        records,
        synth: Some(cfg.clone()),
    };
    let train_prompts = prompts(&train)?;
    let test_zsl_prompts = prompts(&test_zsl)?;
    let test_gzsl_prompts = prompts(&test_gzsl)?;

    Ok(SyntheticDataset {
        query_bank: QueryBankSource {
            vocab: vocab.clone(),
            embeddings: embeddings.clone(),
            provenance: Provenance::Synthetic,
            synth: Some(cfg.clone()),
        },
        train: set(train),
        test_zsl: set(test_zsl),
        test_gzsl: set(test_gzsl),
        train_prompts,
        test_zsl_prompts,
        test_gzsl_prompts,
        prototypes: to_matrix(&prototypes),
        image_map: Matrix::new(dt, di, map.iter().map(|&v| quantize(v)).collect())?,
        vocab,
    })
}
