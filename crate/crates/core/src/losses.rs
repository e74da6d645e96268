//! Classification loss, image-text alignment loss and their weighted sum
//! `L = α·L_clip + β·L_c`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Row-norm floor used when normalizing embeddings for cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentMode {
    /// Symmetric contrastive loss over the batch similarity matrix.
    #[default]
    InfoNce,
    /// Mean `1 - cos` over matched pairs only.
    Cosine,
}

impl std::str::FromStr for AlignmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(Self::InfoNce),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown alignment mode {other:?} (expected infonce or cosine)"))),
        }
    }
}

impl std::fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::InfoNce => "infonce",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the alignment term.
    pub alpha: f64,
    /// Weight on the classification term.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    #[serde(default)]
    pub alignment: AlignmentMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            tau: 0.07,
            alignment: AlignmentMode::InfoNce,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub clip: f64,
    pub classification: f64,
}

/// Weighted total of the two components.
pub fn combined_loss(clip: f64, classification: f64, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    if !(clip >= 0.0 && classification >= 0.0) {
        return Err(Error::Argument(format!(
            "loss components must be non-negative (clip {clip}, classification {classification})"
        )));
    }
    Ok(LossReport {
        total: weights.alpha * clip + weights.beta * classification,
        clip,
        classification,
    })
}

/// Mean binary cross-entropy with logits over every record and class.
pub fn classification_loss<T: Scalar>(logits: &Matrix<T>, targets: &Matrix<T>) -> Result<T> {
    check_targets(targets)?;
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let out = tape.bce_with_logits(x, targets.clone())?;
    Ok(tape.value(out)?.item())
}

fn check_targets<T: Scalar>(targets: &Matrix<T>) -> Result<()> {
    if targets.as_slice().iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::Argument("classification targets must be 0 or 1".into()));
    }
    Ok(())
}

fn check_pair<T: Scalar>(tape: &Tape<T>, image: Var, text: Var) -> Result<()> {
    let (a, b) = (tape.value(image)?, tape.value(text)?);
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Argument("alignment loss needs at least one pair".into()));
    }
    if a.shape() != b.shape() {
        return Err(Error::dim("clip_alignment_loss", a.shape(), b.shape()));
    }
    Ok(())
}

/// Symmetric InfoNCE over cosine similarities scaled by `1/tau`, recorded on `tape`.
pub fn clip_alignment_on_tape<T: Scalar>(tape: &mut Tape<T>, image: Var, text: Var, tau: T) -> Result<Var> {
    check_pair(tape, image, text)?;
    if !(tau > T::zero()) {
        return Err(Error::Argument("temperature must be positive".into()));
    }
    let ni = tape.l2_normalize_rows(image, T::of(NORM_EPS))?;
    let nt = tape.l2_normalize_rows(text, T::of(NORM_EPS))?;
    let sim = tape.matmul_nt(ni, nt)?;
    let sim = tape.scale(sim, T::one() / tau)?;
    let forward = tape.diagonal_cross_entropy(sim)?;
    let sim_t = tape.transpose(sim)?;
    let backward = tape.diagonal_cross_entropy(sim_t)?;
    let both = tape.add(forward, backward)?;
    tape.scale(both, T::of(0.5))
}

/// Mean `1 - cos(image_i, text_i)` over matched pairs, recorded on `tape`.
pub fn cosine_alignment_on_tape<T: Scalar>(tape: &mut Tape<T>, image: Var, text: Var) -> Result<Var> {
    check_pair(tape, image, text)?;
    let rows = tape.value(image)?.rows();
    let ni = tape.l2_normalize_rows(image, T::of(NORM_EPS))?;
    let nt = tape.l2_normalize_rows(text, T::of(NORM_EPS))?;
    let cos = tape.row_dot(ni, nt)?;
    let ones = tape.constant(Matrix::filled(rows, 1, T::one()));
    let dist = tape.sub(ones, cos)?;
    tape.mean(dist)
}

/// Alignment term selected by `weights.alignment`.
pub fn alignment_on_tape<T: Scalar>(tape: &mut Tape<T>, image: Var, text: Var, weights: &LossWeights) -> Result<Var> {
    match weights.alignment {
        AlignmentMode::InfoNce => clip_alignment_on_tape(tape, image, text, T::of(weights.tau)),
        AlignmentMode::Cosine => cosine_alignment_on_tape(tape, image, text),
    }
}

fn on_constants<T: Scalar>(
    image: &Matrix<T>,
    text: &Matrix<T>,
    f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>,
) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.constant(image.clone());
    let b = tape.constant(text.clone());
    let out = f(&mut tape, a, b)?;
    Ok(tape.value(out)?.item())
}

/// Symmetric InfoNCE between matched rows of `image` and `text`.
pub fn clip_alignment_loss<T: Scalar>(image: &Matrix<T>, text: &Matrix<T>, tau: T) -> Result<T> {
    on_constants(image, text, |t, a, b| clip_alignment_on_tape(t, a, b, tau))
}

/// Per-pair cosine distance between matched rows.
pub fn cosine_alignment_loss<T: Scalar>(image: &Matrix<T>, text: &Matrix<T>) -> Result<T> {
    on_constants(image, text, cosine_alignment_on_tape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M = Matrix<f64>;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> M {
        M::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    fn naive_bce(x: &M, y: &M) -> f64 {
        let mut total = 0.0;
        for (&x, &y) in x.as_slice().iter().zip(y.as_slice()) {
            let p = 1.0 / (1.0 + (-x).exp());
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        total / x.len() as f64
    }

    // Written out from the definition: cosine matrix, both cross-entropies.
    fn naive_infonce(a: &M, b: &M, tau: f64) -> f64 {
        let n = a.rows();
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let d: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                s[i][j] = d / (norm(a.row(i)) * norm(b.row(j))) / tau;
            }
        }
        let mut rows = 0.0;
        let mut cols = 0.0;
        for i in 0..n {
            let zr: f64 = (0..n).map(|j| s[i][j].exp()).sum();
            let zc: f64 = (0..n).map(|j| s[j][i].exp()).sum();
            rows += zr.ln() - s[i][i];
            cols += zc.ln() - s[i][i];
        }
        0.5 * (rows / n as f64 + cols / n as f64)
    }

    #[test]
    fn saturated_correct_logits() {
        let x = M::from_rows(&[[50.0, -50.0], [-50.0, 50.0]]).unwrap();
        let y = M::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(classification_loss(&x, &y).unwrap() < 1e-20);
    }

    #[test]
    fn zero_logits_cost_ln2() {
        let y = M::from_rows(&[[1.0, 0.0, 1.0]]).unwrap();
        let l = classification_loss(&M::zeros(1, 3), &y).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 6);
        let y = M::from_fn(3, 6, |_, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        assert!((classification_loss(&x, &y).unwrap() - naive_bce(&x, &y)).abs() < 1e-10);
    }

    #[test]
    fn bce_rejects_bad_targets_and_shapes() {
        assert!(classification_loss(&M::zeros(1, 2), &M::filled(1, 2, 0.5)).is_err());
        assert!(classification_loss(&M::zeros(1, 2), &M::zeros(2, 1)).is_err());
    }

    #[test]
    fn single_pair_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = clip_alignment_loss(&random(&mut rng, 1, 4), &random(&mut rng, 1, 4), 0.07).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn identical_rows_give_ln_b() {
        let row = M::from_rows(&[[0.3, -1.0, 2.0]]).unwrap();
        let a = row.select_rows(&[0; 5]).unwrap();
        let l = clip_alignment_loss(&a, &a.scale(2.0), 0.07).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_pairs_analytic() {
        let e = M::identity(2);
        let l = clip_alignment_loss(&e, &e, 1.0).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn infonce_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random(&mut rng, 6, 5), random(&mut rng, 6, 5));
        let l = clip_alignment_loss(&a, &b, 0.2).unwrap();
        assert!((l - naive_infonce(&a, &b, 0.2)).abs() < 1e-10);
    }

    #[test]
    fn alignment_errors() {
        assert!(clip_alignment_loss(&M::zeros(0, 3), &M::zeros(0, 3), 0.07).is_err());
        assert!(clip_alignment_loss(&M::zeros(2, 3), &M::zeros(2, 4), 0.07).is_err());
        assert!(clip_alignment_loss(&M::zeros(2, 3), &M::zeros(2, 3), 0.0).is_err());
    }

    #[test]
    fn decreases_with_diagonal_dominance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = random(&mut rng, 4, 4);
        let mut last = f64::INFINITY;
        for step in 0..8 {
            let boost = step as f64;
            let text = noise.add(&M::identity(4).scale(boost)).unwrap();
            let l = clip_alignment_loss(&M::identity(4), &text, 0.5).unwrap();
            assert!(l >= 0.0 && l < last, "step {step}: {l} vs {last}");
            last = l;
        }
    }

    #[test]
    fn cosine_variant() {
        let e = M::identity(3);
        assert!(cosine_alignment_loss(&e, &e).unwrap().abs() < 1e-15);
        let l = cosine_alignment_loss(&e, &e.scale(-1.0)).unwrap();
        assert!((l - 2.0).abs() < 1e-15);
    }

    #[test]
    fn combined_examples() {
        let w = LossWeights::default();
        assert!((combined_loss(0.5, 0.3, &w).unwrap().total - 0.8).abs() < 1e-15);
        let w = LossWeights { alpha: 2.0, beta: 0.0, ..w };
        assert!((combined_loss(0.7, 0.9, &w).unwrap().total - 1.4).abs() < 1e-15);
        let w = LossWeights { alpha: 0.0, beta: 1.5, ..w };
        assert_eq!(combined_loss(0.7, 0.4, &w).unwrap().total, 1.5 * 0.4);
    }

    #[test]
    fn weight_validation() {
        let ok = LossWeights::default();
        assert!(ok.validate().is_ok());
        for bad in [
            LossWeights { alpha: 0.0, beta: 0.0, ..ok },
            LossWeights { alpha: -1.0, ..ok },
            LossWeights { tau: 0.0, ..ok },
            LossWeights { beta: f64::NAN, ..ok },
        ] {
            assert!(matches!(combined_loss(0.1, 0.1, &bad), Err(Error::Config(_))));
        }
        assert_eq!("cosine".parse::<AlignmentMode>().unwrap(), AlignmentMode::Cosine);
        assert!("dot".parse::<AlignmentMode>().is_err());
    }

    proptest! {
        #[test]
        fn infonce_is_symmetric(seed in any::<u64>(), b in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = (random(&mut rng, b, 4), random(&mut rng, b, 4));
            let l1 = clip_alignment_loss(&x, &y, 0.07).unwrap();
            let l2 = clip_alignment_loss(&y, &x, 0.07).unwrap();
            prop_assert!((l1 - l2).abs() <= 1e-12 * l1.abs().max(1.0));
            prop_assert!(l1 >= 0.0);
        }

        #[test]
        fn infonce_ignores_row_scale(seed in any::<u64>(), row in 0usize..4, s in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = (random(&mut rng, 4, 3), random(&mut rng, 4, 3));
            let mut xs = x.clone();
            for v in xs.row_mut(row) {
                *v *= s;
            }
            let l1 = clip_alignment_loss(&x, &y, 0.07).unwrap();
            let l2 = clip_alignment_loss(&xs, &y, 0.07).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-9);
        }

        #[test]
        fn combined_is_linear(a in 0.0f64..5.0, b in 0.01f64..5.0, clip in 0.0f64..10.0, c in 0.0f64..10.0) {
            let w = LossWeights { alpha: a, beta: b, ..LossWeights::default() };
            let r = combined_loss(clip, c, &w).unwrap();
            prop_assert!((r.total - (a * clip + b * c)).abs() <= 1e-12);
            prop_assert_eq!((r.clip, r.classification), (clip, c));
        }
    }
}
