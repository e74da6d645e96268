//! Training on seen classes and evaluation under the zero-shot protocols.

mod checkpoint;
mod config;
mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decoder::{DecoderConfig, DecoderParams, Head, HeadVars, QueryBank};
use crate::error::{Error, Result};
use crate::io::{split_seen_unseen, BankTextEncoder, ClassVocabulary, QueryBankSource, SampleRecord, SampleSet, TextEncoder};
use crate::linalg::Matrix;
use crate::losses::{alignment_on_tape, combined_loss, LossReport, LossWeights};
use crate::metrics::{MetricsReport, ScoreTable};
use crate::prompt::{builtin_template, render_prompt};
use crate::scalar::Scalar;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use config::{AdamConfig, TrainConfig, CONFIG_KEYS};
pub use optim::{optimizer_step, AdamState};

/// One optimization batch: image tokens, multi-hot targets over the bank's
/// classes, and the image-level prompt embedding of each record.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub tokens: Vec<Matrix<T>>,
    pub targets: Matrix<T>,
    pub prompts: Matrix<T>,
}

/// Handles to the three scalar loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub clip: Var,
    pub classification: Var,
}

/// Records the full objective of one batch on `tape`.
pub fn batch_objective<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &HeadVars,
    cfg: &DecoderConfig,
    weights: &LossWeights,
    bank: &QueryBank<T>,
    batch: &Batch<T>,
) -> Result<LossVars> {
    let b = batch.tokens.len();
    if b == 0 || batch.targets.shape() != (b, bank.len()) || batch.prompts.rows() != b {
        return Err(Error::Argument(format!(
            "batch of {b} images with {:?} targets and {} prompts for {} classes",
            batch.targets.shape(),
            batch.prompts.rows(),
            bank.len()
        )));
    }
    let mut head = Head { tape, vars, cfg };
    let queries = head.project_queries(bank)?;
    let logits = head.images_logits(queries, &batch.tokens, bank.len())?;
    let classification = head.tape.bce_with_logits(logits, batch.targets.clone())?;

    let pooled: Vec<Matrix<T>> = batch.tokens.iter().map(Matrix::mean_rows).collect();
    let pooled = Matrix::concat_rows(&pooled.iter().collect::<Vec<_>>())?;
    let pooled = head.tape.constant(pooled);
    let image = head.project_pooled(pooled)?;
    let prompts = head.tape.constant(batch.prompts.clone());
    let text = head.project_text(prompts)?;
    let clip = alignment_on_tape(head.tape, image, text, weights)?;

    let a = tape_scale(head.tape, clip, weights.alpha)?;
    let c = tape_scale(head.tape, classification, weights.beta)?;
    let total = head.tape.add(a, c)?;
    Ok(LossVars {
        total,
        clip,
        classification,
    })
}

fn tape_scale<T: Scalar>(tape: &mut Tape<T>, v: Var, s: f64) -> Result<Var> {
    tape.scale(v, T::of(s))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub wall_seconds: f64,
}

fn check_vocab(a: &ClassVocabulary, b: &ClassVocabulary, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Protocol(format!("{what} uses a different class vocabulary")));
    }
    Ok(())
}

/// Everything train needs that does not change between epochs.
struct Prepared<T> {
    bank: QueryBank<T>,
    targets: Vec<Vec<usize>>,
    prompts: Matrix<T>,
}

fn prepare<T: Scalar>(train: &SampleSet<T>, source: &QueryBankSource<T>, cfg: &TrainConfig) -> Result<Prepared<T>> {
    train.validate()?;
    source.validate()?;
    check_vocab(&train.vocab, &source.vocab, "query bank")?;
    let vocab = &train.vocab;
    for (i, r) in train.records.iter().enumerate() {
        if let Some(&l) = r.labels.iter().find(|&&l| !vocab.is_seen(l)) {
            return Err(Error::Protocol(format!(
                "training record {i} carries unseen class {:?}",
                vocab.name(l)
            )));
        }
    }
    let (seen, _) = split_seen_unseen(vocab);
    let bank = QueryBank::from_source(source, &seen)?;
    let mut column = vec![usize::MAX; vocab.len()];
    for (j, &c) in seen.iter().enumerate() {
        column[c] = j;
    }
    let template = builtin_template(&cfg.template)?;
    let encoder = BankTextEncoder::new(vocab, bank.text(), &seen)?;
    let mut prompts = Matrix::zeros(train.records.len(), encoder.dim());
    let mut targets = Vec::with_capacity(train.records.len());
    for (i, r) in train.records.iter().enumerate() {
        targets.push(r.labels.iter().map(|&l| column[l]).collect());
        if r.labels.is_empty() {
            continue;
        }
        let names: Vec<&str> = r.labels.iter().map(|&l| vocab.name(l)).collect();
        let e = encoder.encode(&render_prompt(&names, &template)?)?;
        prompts.row_mut(i).copy_from_slice(&e);
    }
    Ok(Prepared { bank, targets, prompts })
}

/// Trains a fresh head on the seen classes of `train`.
pub fn train<T: Scalar>(train: &SampleSet<T>, bank: &QueryBankSource<T>, cfg: &TrainConfig) -> Result<Checkpoint<T>> {
    train_with_log(train, bank, cfg, |_| Ok(()))
}

/// [`train`], reporting every optimizer step to `log`.
pub fn train_with_log<T: Scalar>(
    train: &SampleSet<T>,
    source: &QueryBankSource<T>,
    cfg: &TrainConfig,
    mut log: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    let prep = prepare(train, source, cfg)?;
    let (_, image_dim) = train
        .token_shape()
        .ok_or_else(|| Error::Argument("training set has no records".into()))?;
    let mut params = DecoderParams::init(&cfg.decoder, source.embeddings.cols(), image_dim, cfg.seed)?;
    let mut state = AdamState::new(params.tensors());
    let started = Instant::now();
    let mut order: Vec<usize> = (0..train.records.len()).collect();
    let mut final_loss = None;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut targets = Matrix::zeros(chunk.len(), prep.bank.len());
            for (row, &i) in chunk.iter().enumerate() {
                for &c in &prep.targets[i] {
                    targets.set(row, c, T::one());
                }
            }
            let batch = Batch {
                tokens: chunk.iter().map(|&i| train.records[i].tokens.clone()).collect(),
                targets,
                prompts: prep.prompts.select_rows(chunk)?,
            };
            let mut tape = Tape::new();
            let vars = HeadVars::register(&mut tape, &params);
            let out = batch_objective(&mut tape, &vars, &cfg.decoder, &cfg.loss, &prep.bank, &batch)?;
            let grads = tape.backward(out.total)?;
            let report = combined_loss(
                tape.value(out.clip)?.item().as_f64(),
                tape.value(out.classification)?.item().as_f64(),
                &cfg.loss,
            )?;
            if !report.total.is_finite() {
                return Err(Error::Evaluation(format!("loss diverged at epoch {epoch}")));
            }
            optimizer_step(params.tensors_mut(), &grads, &mut state, cfg.learning_rate, &cfg.adam)?;
            sums[0] += report.total;
            sums[1] += report.clip;
            sums[2] += report.classification;
            batches += 1;
            log(&StepLog {
                step: state.step,
                epoch,
                loss: report,
                wall_seconds: started.elapsed().as_secs_f64(),
            })?;
        }
        let n = batches as f64;
        final_loss = Some(LossReport {
            total: sums[0] / n,
            clip: sums[1] / n,
            classification: sums[2] / n,
        });
    }
    Ok(Checkpoint {
        config: cfg.clone(),
        vocab: train.vocab.clone(),
        params,
        final_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Unseen classes only; test labels must all be unseen.
    Zsl,
    /// All classes, seen scores scaled by gamma.
    Gzsl,
    /// Seen classes only; unseen labels are ignored.
    Seen,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(Self::Zsl),
            "gzsl" => Ok(Self::Gzsl),
            "seen" => Ok(Self::Seen),
            other => Err(Error::Argument(format!("unknown mode {other:?} (expected zsl, gzsl or seen)"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Zsl => "zsl",
            Self::Gzsl => "gzsl",
            Self::Seen => "seen",
        })
    }
}

/// Vocabulary indices scored under `mode`, in vocabulary order.
pub fn mode_classes(vocab: &ClassVocabulary, mode: EvalMode) -> Vec<usize> {
    let (seen, unseen) = split_seen_unseen(vocab);
    match mode {
        EvalMode::Zsl => unseen,
        EvalMode::Seen => seen,
        EvalMode::Gzsl => (0..vocab.len()).collect(),
    }
}

/// Sigmoid scores (`records x classes`) of a trained head.
pub fn score_records<T: Scalar>(
    ckpt: &Checkpoint<T>,
    records: &[SampleRecord<T>],
    source: &QueryBankSource<T>,
    classes: &[usize],
) -> Result<Matrix<T>> {
    check_vocab(&ckpt.vocab, &source.vocab, "query bank")?;
    let bank = QueryBank::from_source(source, classes)?;
    let images: Vec<&Matrix<T>> = records.iter().map(|r| &r.tokens).collect();
    let scores = crate::decoder::predict_batch(&images, &bank, &ckpt.params, ckpt.decoder())?;
    let mut out = Matrix::zeros(records.len(), classes.len());
    for (r, row) in scores.into_iter().enumerate() {
        out.row_mut(r).copy_from_slice(&row);
    }
    Ok(out)
}

/// Multiplies the scores of seen classes by `gamma`.
pub fn calibrate<T: Scalar>(scores: &mut Matrix<T>, vocab: &ClassVocabulary, classes: &[usize], gamma: f64) {
    let g = T::of(gamma);
    for r in 0..scores.rows() {
        for (j, &c) in classes.iter().enumerate() {
            if vocab.is_seen(c) {
                let v = scores.get(r, j);
                scores.set(r, j, v * g);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub gamma: f64,
    pub ks: Vec<usize>,
}

impl EvalOptions {
    /// Calibration and cut-offs taken from the checkpoint's training config.
    pub fn from_config(cfg: &TrainConfig, mode: EvalMode) -> Self {
        Self {
            mode,
            gamma: cfg.gamma,
            ks: cfg.ks.clone(),
        }
    }
}

/// Scores `test` under the protocol of `opts.mode` and computes its metrics.
pub fn evaluate<T: Scalar>(
    ckpt: &Checkpoint<T>,
    test: &SampleSet<T>,
    source: &QueryBankSource<T>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    test.validate()?;
    check_vocab(&ckpt.vocab, &test.vocab, "test set")?;
    if !(opts.gamma > 0.0 && opts.gamma <= 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", opts.gamma)));
    }
    let vocab = &ckpt.vocab;
    if test.records.is_empty() {
        return Err(Error::Argument("test set has no records".into()));
    }
    if opts.mode == EvalMode::Zsl {
        for (i, r) in test.records.iter().enumerate() {
            if let Some(&l) = r.labels.iter().find(|&&l| vocab.is_seen(l)) {
                return Err(Error::Protocol(format!(
                    "zsl evaluation but test record {i} carries seen class {:?}",
                    vocab.name(l)
                )));
            }
        }
    }
    let classes = mode_classes(vocab, opts.mode);
    if classes.is_empty() {
        return Err(Error::Protocol(format!("vocabulary has no classes for {} evaluation", opts.mode)));
    }
    let mut scores = score_records(ckpt, &test.records, source, &classes)?;
    if opts.mode == EvalMode::Gzsl {
        calibrate(&mut scores, vocab, &classes, opts.gamma);
    }
    let mut column = vec![usize::MAX; vocab.len()];
    for (j, &c) in classes.iter().enumerate() {
        column[c] = j;
    }
    let labels: Vec<Vec<usize>> = test
        .records
        .iter()
        .map(|r| r.labels.iter().filter(|&&l| column[l] != usize::MAX).map(|&l| column[l]).collect())
        .collect();
    let table = ScoreTable::from_label_sets(scores, &labels)?;
    let names: Vec<String> = classes.iter().map(|&c| vocab.name(c).to_string()).collect();
    MetricsReport::compute(&table, &names, &opts.ks)
}

/// Paired runs with and without the alignment term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub joint: MetricsReport,
    pub classification_only: MetricsReport,
    /// `joint.map - classification_only.map`.
    pub delta_map: f64,
}

/// Trains twice from the same seed, once with `cfg.loss.alpha` and once with
/// alpha = 0, and evaluates both on `test` under `mode`.
pub fn ablation_run<T: Scalar>(
    train_set: &SampleSet<T>,
    test: &SampleSet<T>,
    source: &QueryBankSource<T>,
    cfg: &TrainConfig,
    mode: EvalMode,
) -> Result<AblationReport> {
    let mut plain = cfg.clone();
    plain.loss.alpha = 0.0;
    let opts = EvalOptions::from_config(cfg, mode);
    let joint = evaluate(&train(train_set, source, cfg)?, test, source, &opts)?;
    let classification_only = evaluate(&train(train_set, source, &plain)?, test, source, &opts)?;
    Ok(AblationReport {
        seed: cfg.seed,
        delta_map: joint.map - classification_only.map,
        joint,
        classification_only,
    })
}

/// Classes of `classes` ranked by score for one image, best first.
pub fn rank_classes<T: Scalar>(
    ckpt: &Checkpoint<T>,
    tokens: &Matrix<T>,
    source: &QueryBankSource<T>,
    classes: &[usize],
    gamma: f64,
) -> Result<Vec<(usize, f64)>> {
    let record = SampleRecord::new(tokens.clone(), vec![]);
    let mut scores = score_records(ckpt, std::slice::from_ref(&record), source, classes)?;
    calibrate(&mut scores, &ckpt.vocab, classes, gamma);
    let order = crate::metrics::top_k(scores.row(0), classes.len());
    Ok(order.into_iter().map(|j| (classes[j], scores.get(0, j).as_f64())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic_dataset, SynthConfig};

    fn small() -> (SynthConfig, TrainConfig) {
        let synth = SynthConfig {
            classes: 10,
            train_samples: 60,
            test_samples: 30,
            tokens_per_image: 4,
            image_dim: 12,
            text_dim: 8,
            max_labels: 2,
            ..SynthConfig::default()
        };
        let mut cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        cfg.decoder.d_model = 8;
        cfg.decoder.n_heads = 2;
        (synth, cfg)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (s, mut cfg) = small();
        cfg.epochs = 0;
        let d = generate_synthetic_dataset::<f64>(&s).unwrap();
        let ckpt = train(&d.train, &d.query_bank, &cfg).unwrap();
        let init = DecoderParams::init(&cfg.decoder, s.text_dim, s.image_dim, cfg.seed).unwrap();
        assert_eq!(ckpt.params, init);
        assert_eq!(ckpt.final_loss, None);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let (s, cfg) = small();
        let d = generate_synthetic_dataset::<f64>(&s).unwrap();
        let a = encode_checkpoint(&train(&d.train, &d.query_bank, &cfg).unwrap()).unwrap();
        let b = encode_checkpoint(&train(&d.train, &d.query_bank, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = TrainConfig { seed: 1, ..cfg };
        let c = encode_checkpoint(&train(&d.train, &d.query_bank, &other).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unseen_training_label_is_rejected() {
        let (s, cfg) = small();
        let mut d = generate_synthetic_dataset::<f64>(&s).unwrap();
        let (_, unseen) = split_seen_unseen(&d.vocab);
        d.train.records[3].labels.push(unseen[0]);
        assert!(matches!(train(&d.train, &d.query_bank, &cfg), Err(Error::Protocol(_))));
    }

    #[test]
    fn unseen_embeddings_do_not_influence_training() {
        let (s, cfg) = small();
        let d = generate_synthetic_dataset::<f64>(&s).unwrap();
        let mut corrupted = d.query_bank.clone();
        let (_, unseen) = split_seen_unseen(&d.vocab);
        for &c in &unseen {
            corrupted.embeddings.row_mut(c).iter_mut().for_each(|v| *v = 1e6);
        }
        let a = train(&d.train, &d.query_bank, &cfg).unwrap();
        let b = train(&d.train, &corrupted, &cfg).unwrap();
        assert_eq!(encode_checkpoint(&a).unwrap(), encode_checkpoint(&b).unwrap());
    }

    #[test]
    fn log_has_one_line_per_step() {
        let (s, cfg) = small();
        let d = generate_synthetic_dataset::<f64>(&s).unwrap();
        let mut steps = Vec::new();
        train_with_log(&d.train, &d.query_bank, &cfg, |l| {
            steps.push(l.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(steps.len(), 2 * 60usize.div_ceil(16));
        assert!(steps.iter().all(|l| (l.loss.total - (l.loss.clip + l.loss.classification)).abs() < 1e-12));
        let line = serde_json::to_string(&steps[0]).unwrap();
        for key in ["step", "epoch", "total", "clip", "classification", "wall_seconds"] {
            assert!(line.contains(&format!("\"{key}\"")), "{line}");
        }
    }

    #[test]
    fn zsl_rejects_seen_labels() {
        let (s, cfg) = small();
        let d = generate_synthetic_dataset::<f64>(&s).unwrap();
        let ckpt = train(&d.train, &d.query_bank, &TrainConfig { epochs: 0, ..cfg.clone() }).unwrap();
        let zsl = EvalOptions::from_config(&cfg, EvalMode::Zsl);
        assert!(evaluate(&ckpt, &d.test_zsl, &d.query_bank, &zsl).is_ok());
        assert!(matches!(
            evaluate(&ckpt, &d.test_gzsl, &d.query_bank, &zsl),
            Err(Error::Protocol(_))
        ));
        let gzsl = EvalOptions::from_config(&cfg, EvalMode::Gzsl);
        let r = evaluate(&ckpt, &d.test_gzsl, &d.query_bank, &gzsl).unwrap();
        assert_eq!(r.classes, 10);
    }

    #[test]
    fn gzsl_recall_never_exceeds_zsl_on_unseen_records() {
        let (s, cfg) = small();
        let d = generate_synthetic_dataset::<f64>(&s).unwrap();
        let ckpt = train(&d.train, &d.query_bank, &cfg).unwrap();
        let zsl = evaluate(&ckpt, &d.test_zsl, &d.query_bank, &EvalOptions::from_config(&cfg, EvalMode::Zsl)).unwrap();
        let gzsl = evaluate(&ckpt, &d.test_zsl, &d.query_bank, &EvalOptions::from_config(&cfg, EvalMode::Gzsl)).unwrap();
        for (a, b) in zsl.top_k.iter().zip(&gzsl.top_k) {
            assert_eq!(a.k, b.k);
            assert!(b.recall <= a.recall);
        }
    }

    #[test]
    fn gamma_only_moves_seen_classes() {
        let (s, cfg) = small();
        let d = generate_synthetic_dataset::<f64>(&s).unwrap();
        let ckpt = train(&d.train, &d.query_bank, &cfg).unwrap();
        let classes = mode_classes(&d.vocab, EvalMode::Gzsl);
        let base = score_records(&ckpt, &d.test_gzsl.records, &d.query_bank, &classes).unwrap();
        let mut half = base.clone();
        calibrate(&mut half, &d.vocab, &classes, 0.5);
        for r in 0..base.rows() {
            for (j, &c) in classes.iter().enumerate() {
                if d.vocab.is_seen(c) {
                    assert_eq!(half.get(r, j), 0.5 * base.get(r, j));
                } else {
                    assert_eq!(half.get(r, j), base.get(r, j));
                }
            }
        }
    }

    #[test]
    fn ablation_has_two_reports() {
        let (s, cfg) = small();
        let d = generate_synthetic_dataset::<f64>(&s).unwrap();
        let r = ablation_run(&d.train, &d.test_zsl, &d.query_bank, &cfg, EvalMode::Zsl).unwrap();
        assert_eq!(r.delta_map, r.joint.map - r.classification_only.map);
        // Same seed: the untrained heads coincide, so with zero epochs the delta is zero.
        let r0 = ablation_run(&d.train, &d.test_zsl, &d.query_bank, &TrainConfig { epochs: 0, ..cfg }, EvalMode::Zsl).unwrap();
        assert_eq!(r0.joint, r0.classification_only);
        assert_eq!(r0.delta_map, 0.0);
    }

    #[test]
    fn ranking_is_sorted() {
        let (s, cfg) = small();
        let d = generate_synthetic_dataset::<f64>(&s).unwrap();
        let ckpt = train(&d.train, &d.query_bank, &cfg).unwrap();
        let classes = mode_classes(&d.vocab, EvalMode::Zsl);
        let ranked = rank_classes(&ckpt, &d.test_zsl.records[0].tokens, &d.query_bank, &classes, 1.0).unwrap();
        assert_eq!(ranked.len(), classes.len());
        assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}
