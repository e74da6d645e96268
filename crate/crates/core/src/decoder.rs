//! Cross-attention decoder head with a group fully-connected shared projection.
//!
//! Fixed per-class text embeddings enter through a trainable input projection
//! and act as queries. Each layer cross-attends the queries against projected
//! image tokens (multi-head scaled dot-product attention), then applies a ReLU
//! feed-forward block, each sub-block followed by residual + post-layer-norm.
//! Queries never attend to each other, so every class is decoded
//! independently and the number of queries may change between training and
//! inference.
//!
//! The output layer is a single `g x d_model` matrix shared by all decoded
//! tokens: class `c` reads token `c / g` through row `c % g`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, NamedTensors, Tape, Var};
use crate::error::{Error, Result};
use crate::io::QueryBankSource;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_multiplier: usize,
    /// Classes per decoded token; 1 is full decoding.
    pub group_size: usize,
    pub layers: usize,
    pub layer_norm_eps: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            ffn_multiplier: 4,
            group_size: 1,
            layers: 1,
            layer_norm_eps: 1e-5,
        }
    }
}

impl DecoderConfig {
    /// Narrow head for the synthetic desk-scale experiments.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            ..Self::default()
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_width(&self) -> usize {
        self.d_model * self.ffn_multiplier
    }

    /// Decoded tokens needed for `classes` classes.
    pub fn token_count(&self, classes: usize) -> usize {
        classes.div_ceil(self.group_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_multiplier == 0 || self.layers == 0 {
            return Err(Error::Config("decoder widths, heads and layers must be at least 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group size must be at least 1".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter names, shared by the tape, the optimizer and checkpoints.
pub mod names {
    pub const QUERY_W: &str = "query_proj.weight";
    pub const QUERY_B: &str = "query_proj.bias";
    pub const IMAGE_W: &str = "image_proj.weight";
    pub const IMAGE_B: &str = "image_proj.bias";
    pub const GROUP_W: &str = "group_fc.weight";
    pub const GROUP_B: &str = "group_fc.bias";

    pub fn layer(l: usize, suffix: &str) -> String {
        format!("layers.{l}.{suffix}")
    }

    pub const W_Q: &str = "attn.w_q";
    pub const W_K: &str = "attn.w_k";
    pub const W_V: &str = "attn.w_v";
    pub const W_O: &str = "attn.w_o";
    pub const B_O: &str = "attn.b_o";
    pub const NORM1_GAIN: &str = "norm1.gain";
    pub const NORM1_OFFSET: &str = "norm1.offset";
    pub const FFN_W1: &str = "ffn.w1";
    pub const FFN_B1: &str = "ffn.b1";
    pub const FFN_W2: &str = "ffn.w2";
    pub const FFN_B2: &str = "ffn.b2";
    pub const NORM2_GAIN: &str = "norm2.gain";
    pub const NORM2_OFFSET: &str = "norm2.offset";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zeros,
    Ones,
}

/// Every `(name, rows, cols, init)` the head owns.
fn layout(cfg: &DecoderConfig, text_dim: usize, image_dim: usize) -> Vec<(String, usize, usize, Init)> {
    use names::*;
    let (d, f, g) = (cfg.d_model, cfg.ffn_width(), cfg.group_size);
    let mut out = vec![
        (QUERY_W.to_string(), text_dim, d, Init::FanIn),
        (QUERY_B.to_string(), 1, d, Init::Zeros),
        (IMAGE_W.to_string(), image_dim, d, Init::FanIn),
        (IMAGE_B.to_string(), 1, d, Init::Zeros),
        (GROUP_W.to_string(), g, d, Init::FanIn),
        (GROUP_B.to_string(), 1, g, Init::Zeros),
    ];
    for l in 0..cfg.layers {
        for (suffix, rows, cols, init) in [
            (W_Q, d, d, Init::FanIn),
            (W_K, d, d, Init::FanIn),
            (W_V, d, d, Init::FanIn),
            (W_O, d, d, Init::FanIn),
            (B_O, 1, d, Init::Zeros),
            (NORM1_GAIN, 1, d, Init::Ones),
            (NORM1_OFFSET, 1, d, Init::Zeros),
            (FFN_W1, d, f, Init::FanIn),
            (FFN_B1, 1, f, Init::Zeros),
            (FFN_W2, f, d, Init::FanIn),
            (FFN_B2, 1, d, Init::Zeros),
            (NORM2_GAIN, 1, d, Init::Ones),
            (NORM2_OFFSET, 1, d, Init::Zeros),
        ] {
            out.push((layer(l, suffix), rows, cols, init));
        }
    }
    out
}

/// All trainable tensors of the head, keyed by [`names`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    tensors: NamedTensors<T>,
}

impl<T: Scalar> DecoderParams<T> {
    /// Seeded fan-in uniform weights, zero biases and offsets, unit gains.
    pub fn init(cfg: &DecoderConfig, text_dim: usize, image_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = NamedTensors::new();
        for (name, rows, cols, init) in layout(cfg, text_dim, image_dim) {
            let m = match init {
                Init::Zeros => Matrix::zeros(rows, cols),
                Init::Ones => Matrix::filled(rows, cols, T::one()),
                Init::FanIn => {
                    // group_fc rows are output units over d_model inputs
                    let fan_in = if name == names::GROUP_W { cols } else { rows };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Matrix::from_fn(rows, cols, |_, _| T::of(rng.random_range(-bound..bound)))
                }
            };
            tensors.insert(name, m);
        }
        Ok(Self { tensors })
    }

    /// All weights and biases zero, layer-norm gains one.
    pub fn zeroed(cfg: &DecoderConfig, text_dim: usize, image_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let tensors = layout(cfg, text_dim, image_dim)
            .into_iter()
            .map(|(name, rows, cols, init)| {
                let fill = if init == Init::Ones { T::one() } else { T::zero() };
                (name, Matrix::filled(rows, cols, fill))
            })
            .collect();
        Ok(Self { tensors })
    }

    /// Wraps a tensor map after checking it against the layout for `cfg`.
    pub fn from_tensors(cfg: &DecoderConfig, tensors: NamedTensors<T>) -> Result<Self> {
        cfg.validate()?;
        let text_dim = tensors.get(names::QUERY_W).map(|m| m.rows()).unwrap_or(0);
        let image_dim = tensors.get(names::IMAGE_W).map(|m| m.rows()).unwrap_or(0);
        let want = layout(cfg, text_dim, image_dim);
        if want.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                tensors.len()
            )));
        }
        for (name, rows, cols, _) in want {
            match tensors.get(&name) {
                Some(m) if m.shape() == (rows, cols) => {}
                Some(m) => return Err(Error::dim("decoder params", (rows, cols), m.shape())),
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &NamedTensors<T> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut NamedTensors<T> {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> NamedTensors<T> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> &Matrix<T> {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix<T> {
        self.tensors.get_mut(name).expect("known parameter name")
    }

    pub fn text_dim(&self) -> usize {
        self.get(names::QUERY_W).rows()
    }

    pub fn image_dim(&self) -> usize {
        self.get(names::IMAGE_W).rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }
}

/// Frozen text embeddings of the classes a head scores, in output order.
///
/// The embeddings are never trained; only the query projection applied to
/// them is.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBank<T> {
    text: Matrix<T>,
    classes: Vec<usize>,
}

impl<T: Scalar> QueryBank<T> {
    pub fn new(text: Matrix<T>, classes: Vec<usize>) -> Result<Self> {
        if text.rows() == 0 {
            return Err(Error::Argument("query bank must hold at least one class".into()));
        }
        if text.rows() != classes.len() {
            return Err(Error::Argument(format!(
                "{} query rows for {} class indices",
                text.rows(),
                classes.len()
            )));
        }
        Ok(Self { text, classes })
    }

    /// The rows of `source` for `classes`, in that order.
    pub fn from_source(source: &QueryBankSource<T>, classes: &[usize]) -> Result<Self> {
        Self::new(source.rows_for(classes)?, classes.to_vec())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn text(&self) -> &Matrix<T> {
        &self.text
    }

    /// Vocabulary index of each query row.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Inputs to the query projection: the class embeddings for full
    /// decoding, otherwise the mean embedding of each group of `g` classes.
    pub fn query_inputs(&self, group_size: usize) -> Matrix<T> {
        if group_size == 1 {
            return self.text.clone();
        }
        let tokens = self.len().div_ceil(group_size);
        let mut out = Matrix::zeros(tokens, self.text.cols());
        for t in 0..tokens {
            let members = (t * group_size..((t + 1) * group_size).min(self.len())).collect::<Vec<_>>();
            let n = T::of_usize(members.len());
            for &c in &members {
                for (o, &v) in out.row_mut(t).iter_mut().zip(self.text.row(c)) {
                    *o = *o + v / n;
                }
            }
        }
        out
    }
}

/// Tape handles for every head parameter.
#[derive(Debug, Clone)]
pub struct HeadVars {
    vars: BTreeMap<String, Var>,
}

impl HeadVars {
    /// Registers every tensor of `params` as a trainable leaf.
    pub fn register<T: Scalar>(tape: &mut Tape<T>, params: &DecoderParams<T>) -> Self {
        Self {
            vars: tape.params(params.tensors()),
        }
    }

    /// Records every tensor as a constant; gradients are not tracked.
    pub fn constants<T: Scalar>(tape: &mut Tape<T>, params: &DecoderParams<T>) -> Self {
        Self {
            vars: params
                .tensors()
                .iter()
                .map(|(k, m)| (k.clone(), tape.constant(m.clone())))
                .collect(),
        }
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    fn layer(&self, l: usize, suffix: &str) -> Result<Var> {
        self.get(&names::layer(l, suffix))
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head scaled dot-product attention recorded on `tape`.
pub fn attention_on_tape<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let width = tape.value(q)?.cols();
    let d_k = width / heads;
    let scale = T::one() / T::of_usize(d_k).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * d_k, d_k)?,
                tape.slice_cols(k, h * d_k, d_k)?,
                tape.slice_cols(v, h * d_k, d_k)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// `softmax(Q·Kᵀ / sqrt(d_k))·V` for a single head.
pub fn cross_attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, d_k: usize) -> Result<Matrix<T>> {
    if q.cols() != d_k || k.cols() != d_k {
        return Err(Error::dim("cross_attention", q.shape(), k.shape()));
    }
    if v.rows() != k.rows() {
        return Err(Error::dim("cross_attention", k.shape(), v.shape()));
    }
    let scale = T::one() / T::of_usize(d_k).sqrt();
    q.matmul_nt(k)?.scale(scale).softmax_rows().matmul(v)
}

/// The head's forward graph, bound to one tape and one parameter set.
pub struct Head<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a HeadVars,
    pub cfg: &'a DecoderConfig,
}

impl<T: Scalar> Head<'_, T> {
    /// Projected queries (`ceil(C/g) x d_model`) for a bank.
    pub fn project_queries(&mut self, bank: &QueryBank<T>) -> Result<Var> {
        let inputs = bank.query_inputs(self.cfg.group_size);
        if inputs.cols() != self.tape.value(self.vars.get(names::QUERY_W)?)?.rows() {
            return Err(Error::dim(
                "project_queries",
                inputs.shape(),
                self.tape.value(self.vars.get(names::QUERY_W)?)?.shape(),
            ));
        }
        let x = self.tape.constant(inputs);
        linear(self.tape, x, self.vars.get(names::QUERY_W)?, self.vars.get(names::QUERY_B)?)
    }

    /// Projects a `1 x d_text` text embedding through the query projection.
    pub fn project_text(&mut self, text: Var) -> Result<Var> {
        linear(self.tape, text, self.vars.get(names::QUERY_W)?, self.vars.get(names::QUERY_B)?)
    }

    /// Mean-pooled image tokens (one row per image) through the image
    /// projection.
    pub fn project_pooled(&mut self, pooled: Var) -> Result<Var> {
        linear(self.tape, pooled, self.vars.get(names::IMAGE_W)?, self.vars.get(names::IMAGE_B)?)
    }

    /// Decodes projected queries against one image's tokens.
    pub fn decode(&mut self, queries: Var, tokens: Var) -> Result<Var> {
        self.decode_batch(queries, &[tokens])
    }

    /// Decodes the same projected queries against several images and stacks
    /// the decoded tokens image by image. Attention runs per image; the
    /// position-wise blocks run on the stacked rows.
    pub fn decode_batch(&mut self, queries: Var, images: &[Var]) -> Result<Var> {
        let cfg = self.cfg;
        let n = images.len();
        if n == 0 {
            return Err(Error::Argument("decoding needs at least one image".into()));
        }
        let eps = T::of(cfg.layer_norm_eps);
        let t = self.tape.value(queries)?.rows();
        let (w_img, b_img) = (self.vars.get(names::IMAGE_W)?, self.vars.get(names::IMAGE_B)?);
        let memories = images
            .iter()
            .map(|&m| linear(self.tape, m, w_img, b_img))
            .collect::<Result<Vec<_>>>()?;
        let stack = |tape: &mut Tape<T>, parts: &[Var]| if parts.len() == 1 { Ok(parts[0]) } else { tape.concat_rows(parts) };
        let mut x = stack(self.tape, &vec![queries; n])?;
        for l in 0..cfg.layers {
            let v = |s: &str| self.vars.layer(l, s);
            // Every image starts from the same queries, so the first layer
            // projects them once.
            let q_all = self.tape.matmul(if l == 0 { queries } else { x }, v(names::W_Q)?)?;
            let shared = l == 0 || n == 1;
            let mut heads = Vec::with_capacity(n);
            for (b, &memory) in memories.iter().enumerate() {
                let q = if shared { q_all } else { self.tape.slice_rows(q_all, b * t, t)? };
                let k = self.tape.matmul(memory, v(names::W_K)?)?;
                let val = self.tape.matmul(memory, v(names::W_V)?)?;
                heads.push(attention_on_tape(self.tape, q, k, val, cfg.n_heads)?);
            }
            let attn = stack(self.tape, &heads)?;
            let attn = linear(self.tape, attn, v(names::W_O)?, v(names::B_O)?)?;
            let h = self.tape.add(x, attn)?;
            let h = self.tape.layer_norm_rows(h, v(names::NORM1_GAIN)?, v(names::NORM1_OFFSET)?, eps)?;
            let f = linear(self.tape, h, v(names::FFN_W1)?, v(names::FFN_B1)?)?;
            let f = self.tape.relu(f)?;
            let f = linear(self.tape, f, v(names::FFN_W2)?, v(names::FFN_B2)?)?;
            let out = self.tape.add(h, f)?;
            x = self.tape.layer_norm_rows(out, v(names::NORM2_GAIN)?, v(names::NORM2_OFFSET)?, eps)?;
        }
        Ok(x)
    }

    /// Per-class logits (`1 x C`) from one image's decoded tokens.
    pub fn logits(&mut self, decoded: Var, classes: usize) -> Result<Var> {
        self.batch_logits(decoded, 1, classes)
    }

    /// Per-class logits (`images x C`) from stacked decoded tokens.
    pub fn batch_logits(&mut self, decoded: Var, images: usize, classes: usize) -> Result<Var> {
        let rows = self.tape.value(decoded)?.rows();
        let tokens = self.cfg.token_count(classes);
        if rows != tokens * images {
            return Err(Error::dim("group_fc", (rows, 0), (classes, self.cfg.group_size)));
        }
        let g = self.cfg.group_size;
        let per_token = self.tape.matmul_nt(decoded, self.vars.get(names::GROUP_W)?)?;
        let per_token = self.tape.add_row(per_token, self.vars.get(names::GROUP_B)?)?;
        let flat = self.tape.reshape(per_token, images, tokens * g)?;
        if tokens * g == classes {
            Ok(flat)
        } else {
            self.tape.slice_cols(flat, 0, classes)
        }
    }

    /// Logits for one image against a bank whose queries were already projected.
    pub fn record_logits(&mut self, queries: Var, tokens: Matrix<T>, classes: usize) -> Result<Var> {
        self.images_logits(queries, std::slice::from_ref(&tokens), classes)
    }

    /// Logits (`images x C`) for several images against projected queries.
    pub fn images_logits(&mut self, queries: Var, images: &[Matrix<T>], classes: usize) -> Result<Var> {
        let image_dim = self.tape.value(self.vars.get(names::IMAGE_W)?)?.rows();
        let mut vars = Vec::with_capacity(images.len());
        for tokens in images {
            if tokens.cols() != image_dim || tokens.rows() == 0 {
                return Err(Error::dim("decoder_forward", tokens.shape(), (1, image_dim)));
            }
            vars.push(self.tape.constant(tokens.clone()));
        }
        let decoded = self.decode_batch(queries, &vars)?;
        self.batch_logits(decoded, images.len(), classes)
    }
}

fn with_constants<T: Scalar, R>(
    params: &DecoderParams<T>,
    cfg: &DecoderConfig,
    f: impl FnOnce(&mut Head<'_, T>) -> Result<R>,
) -> Result<R> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let vars = HeadVars::constants(&mut tape, params);
    let mut head = Head {
        tape: &mut tape,
        vars: &vars,
        cfg,
    };
    f(&mut head)
}

/// Decoded tokens (`ceil(C/g) x d_model`) for one image.
pub fn decoder_forward<T: Scalar>(
    tokens: &Matrix<T>,
    bank: &QueryBank<T>,
    params: &DecoderParams<T>,
    cfg: &DecoderConfig,
) -> Result<Matrix<T>> {
    with_constants(params, cfg, |head| {
        if tokens.cols() != params.image_dim() || tokens.rows() == 0 {
            return Err(Error::dim("decoder_forward", tokens.shape(), (1, params.image_dim())));
        }
        let q = head.project_queries(bank)?;
        let x = head.tape.constant(tokens.clone());
        let out = head.decode(q, x)?;
        Ok(head.tape.value(out)?.clone())
    })
}

/// Per-class logits from decoded tokens through the shared group projection.
pub fn group_fc<T: Scalar>(
    decoded: &Matrix<T>,
    params: &DecoderParams<T>,
    cfg: &DecoderConfig,
    classes: usize,
) -> Result<Vec<T>> {
    with_constants(params, cfg, |head| {
        let d = head.tape.constant(decoded.clone());
        let out = head.logits(d, classes)?;
        Ok(head.tape.value(out)?.as_slice().to_vec())
    })
}

/// Sigmoid class scores for one image, in bank order.
pub fn predict<T: Scalar>(
    tokens: &Matrix<T>,
    bank: &QueryBank<T>,
    params: &DecoderParams<T>,
    cfg: &DecoderConfig,
) -> Result<Vec<T>> {
    Ok(predict_logits(tokens, bank, params, cfg)?.into_iter().map(sigmoid).collect())
}

pub fn predict_logits<T: Scalar>(
    tokens: &Matrix<T>,
    bank: &QueryBank<T>,
    params: &DecoderParams<T>,
    cfg: &DecoderConfig,
) -> Result<Vec<T>> {
    with_constants(params, cfg, |head| {
        let q = head.project_queries(bank)?;
        let out = head.record_logits(q, tokens.clone(), bank.len())?;
        Ok(head.tape.value(out)?.as_slice().to_vec())
    })
}

/// Scores for many images against one bank; queries are projected once.
pub fn predict_batch<T: Scalar>(
    images: &[&Matrix<T>],
    bank: &QueryBank<T>,
    params: &DecoderParams<T>,
    cfg: &DecoderConfig,
) -> Result<Vec<Vec<T>>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let owned: Vec<Matrix<T>> = chunk.iter().map(|m| (*m).clone()).collect();
        let scores = with_constants(params, cfg, |head| {
            let q = head.project_queries(bank)?;
            let logits = head.images_logits(q, &owned, bank.len())?;
            Ok(head.tape.value(logits)?.map(sigmoid))
        })?;
        out.extend((0..scores.rows()).map(|r| scores.row(r).to_vec()));
    }
    Ok(out)
}
