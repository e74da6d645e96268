//! Central finite-difference gradients, used as an independent oracle for
//! the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NamedTensors, Tape};
use crate::decoder::{DecoderConfig, DecoderParams, HeadVars, QueryBank};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::LossWeights;
use crate::scalar::Scalar;
use crate::trainer::{batch_objective, Batch};

/// `(f(p + h·eᵢ) - f(p - h·eᵢ)) / 2h` for every coordinate of every tensor.
pub fn finite_difference_gradient<T, F>(f: F, params: &NamedTensors<T>, h: T) -> Result<NamedTensors<T>>
where
    T: Scalar,
    F: Fn(&NamedTensors<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    let mut probe = params.clone();
    let mut grads = NamedTensors::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let len = params[&name].len();
        let mut g = params[&name].clone();
        for i in 0..len {
            let orig = params[&name].as_slice()[i];
            probe.get_mut(&name).unwrap().as_mut_slice()[i] = orig + h;
            let plus = f(&probe)?;
            probe.get_mut(&name).unwrap().as_mut_slice()[i] = orig - h;
            let minus = f(&probe)?;
            probe.get_mut(&name).unwrap().as_mut_slice()[i] = orig;
            g.as_mut_slice()[i] = (plus - minus) / (h + h);
        }
        grads.insert(name, g);
    }
    Ok(grads)
}

/// Denominator floor for [`max_relative_error`]; coordinates whose gradients
/// are both below it are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Largest `|a - b| / max(|a|, |b|, floor)` over all coordinates of two
/// gradient sets with identical names and shapes.
pub fn max_relative_error<T: Scalar>(a: &NamedTensors<T>, b: &NamedTensors<T>) -> Result<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::Argument("gradient sets name different parameters".into()));
    }
    let mut worst = 0.0f64;
    for (name, ga) in a {
        let gb = &b[name];
        if ga.shape() != gb.shape() {
            return Err(Error::dim("max_relative_error", ga.shape(), gb.shape()));
        }
        for (&x, &y) in ga.as_slice().iter().zip(gb.as_slice()) {
            let (x, y) = (x.as_f64(), y.as_f64());
            let denom = x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    Ok(worst)
}

/// Finite-difference step used by [`head_gradient_check`].
pub const HEAD_CHECK_STEP: f64 = 1e-5;

/// Small random instance of the full head and combined loss for one seed.
///
/// Seeds cycle through one and two layers, full and group decoding, and
/// both alignment modes. Every parameter is perturbed away from its
/// initial value so biases and norm gains carry non-trivial gradients.
pub fn head_check_instance(seed: u64) -> Result<(DecoderConfig, LossWeights, DecoderParams<f64>, QueryBank<f64>, Batch<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let cfg = DecoderConfig {
        d_model: 8,
        n_heads: 2,
        ffn_multiplier: 2,
        group_size: if seed % 3 == 2 { 2 } else { 1 },
        layers: 1 + (seed % 2) as usize,
        layer_norm_eps: 1e-5,
    };
    let weights = LossWeights {
        alpha: rng.random_range(0.2..1.5),
        beta: rng.random_range(0.2..1.5),
        alignment: if seed % 4 == 3 {
            crate::losses::AlignmentMode::Cosine
        } else {
            crate::losses::AlignmentMode::InfoNce
        },
        ..LossWeights::default()
    };
    let (text_dim, image_dim, tokens, classes, images) = (5, 6, 3, 4, 3);
    let mut params = DecoderParams::init(&cfg, text_dim, image_dim, seed)?;
    for m in params.tensors_mut().values_mut() {
        for v in m.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let mut rand = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let bank = QueryBank::new(rand(classes, text_dim), (0..classes).collect())?;
    let batch = Batch {
        tokens: (0..images).map(|_| rand(tokens, image_dim)).collect(),
        targets: rand(images, classes).map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        prompts: rand(images, text_dim),
    };
    Ok((cfg, weights, params, bank, batch))
}

/// Largest relative error between tape and central-difference gradients of
/// the combined loss on [`head_check_instance`]`(seed)`.
pub fn head_gradient_check(seed: u64) -> Result<f64> {
    let (cfg, weights, params, bank, batch) = head_check_instance(seed)?;
    let objective = |tensors: &NamedTensors<f64>, record: bool| -> Result<(f64, Option<NamedTensors<f64>>)> {
        let p = DecoderParams::from_tensors(&cfg, tensors.clone())?;
        let mut tape = Tape::new();
        let vars = if record {
            HeadVars::register(&mut tape, &p)
        } else {
            HeadVars::constants(&mut tape, &p)
        };
        let out = batch_objective(&mut tape, &vars, &cfg, &weights, &bank, &batch)?;
        let value = tape.value(out.total)?.item();
        let grads = if record { Some(tape.backward(out.total)?) } else { None };
        Ok((value, grads))
    };
    let (_, tape_grads) = objective(params.tensors(), true)?;
    let numeric = finite_difference_gradient(|p| Ok(objective(p, false)?.0), params.tensors(), HEAD_CHECK_STEP)?;
    max_relative_error(&tape_grads.expect("recorded"), &numeric)
}
