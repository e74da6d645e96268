//! Zero-shot multi-label classification head.
//!
//! Class-name prompts become decoder queries that cross-attend over frozen
//! image tokens; a shared group projection turns each decoded query into
//! class logits, so classes never seen in training can be scored by adding
//! their queries at inference time. Training combines binary cross-entropy
//! with a contrastive image/text alignment term.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the working precision used by the trainer and CLI.

pub mod autodiff;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod prompt;
pub mod scalar;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;

/// Working precision for training, evaluation and gradient checks.
pub type Real = f64;
pub type Mat = linalg::Matrix<Real>;
pub type Params = decoder::DecoderParams<Real>;
pub type Bank = io::QueryBankSource<Real>;
pub type Samples = io::SampleSet<Real>;
pub type Dataset = io::SyntheticDataset<Real>;
pub type TrainedHead = trainer::Checkpoint<Real>;
