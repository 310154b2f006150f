//! Token/position embeddings and a stack of post-norm transformer encoder
//! layers that keeps every layer's output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arraycore::{Array, Scalar, Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const CLS_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

/// Additive attention score for masked keys.
pub const MASK_SCORE: f64 = -1e9;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale default: 4 layers of width 32.
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 4,
            d_model: 32,
            num_heads: 4,
            d_ff: 128,
            vocab_size,
            max_seq_len: 64,
            dropout: 0.1,
        }
    }

    /// Twelve layers, matching the depth of BERT-base.
    pub fn base_shaped(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 12,
            ..Self::toy(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.num_heads == 0 {
            return bad("encoder extents must be positive");
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.d_model < 2 {
            return bad("d_model must be at least 2");
        }
        if self.vocab_size <= NUM_RESERVED {
            return bad("vocab_size must exceed the reserved ids");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Weights of one encoder layer. `P` is an owned [`Array`] or a tape [`Var`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub ffn1_weight: P,
    pub ffn1_bias: P,
    pub ffn2_weight: P,
    pub ffn2_bias: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
}

impl<P> LayerParams<P> {
    fn fields(&self) -> [(&'static str, &P); 12] {
        [
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("ffn1.weight", &self.ffn1_weight),
            ("ffn1.bias", &self.ffn1_bias),
            ("ffn2.weight", &self.ffn2_weight),
            ("ffn2.bias", &self.ffn2_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut P); 12] {
        [
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wo", &mut self.wo),
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("ffn1.weight", &mut self.ffn1_weight),
            ("ffn1.bias", &mut self.ffn1_bias),
            ("ffn2.weight", &mut self.ffn2_weight),
            ("ffn2.bias", &mut self.ffn2_bias),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
        ]
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LayerParams<Q> {
        LayerParams {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            ffn1_weight: f(&self.ffn1_weight),
            ffn1_bias: f(&self.ffn1_bias),
            ffn2_weight: f(&self.ffn2_weight),
            ffn2_bias: f(&self.ffn2_bias),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub tok_emb: P,
    pub pos_emb: P,
    pub layers: Vec<LayerParams<P>>,
}

impl<P> EncoderParams<P> {
    /// Visits every parameter with its dotted name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        f("encoder.tok_emb".into(), &self.tok_emb);
        f("encoder.pos_emb".into(), &self.pos_emb);
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in layer.fields() {
                f(format!("encoder.layer{i}.{name}"), p);
            }
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut P)) {
        f("encoder.tok_emb".into(), &mut self.tok_emb);
        f("encoder.pos_emb".into(), &mut self.pos_emb);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, p) in layer.fields_mut() {
                f(format!("encoder.layer{i}.{name}"), p);
            }
        }
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> EncoderParams<Q> {
        EncoderParams {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }
}

impl<T: Scalar> EncoderParams<Array<T>> {
    /// Normal(0, 0.02) weights, unit layer-norm gains, zero biases.
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut w = |rows: usize, cols: usize| -> Array<T> {
            let v: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Array::from_f64(&[rows, cols], &v).expect("positive extents")
        };
        let tok_emb = w(cfg.vocab_size, d);
        let pos_emb = w(cfg.max_seq_len, d);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            layers.push(LayerParams {
                wq: w(d, d),
                wk: w(d, d),
                wv: w(d, d),
                wo: w(d, d),
                ln1_gain: Array::full(&[d], T::one()),
                ln1_bias: Array::zeros(&[d]),
                ffn1_weight: w(d, ff),
                ffn1_bias: Array::zeros(&[ff]),
                ffn2_weight: w(ff, d),
                ffn2_bias: Array::zeros(&[d]),
                ln2_gain: Array::full(&[d], T::one()),
                ln2_bias: Array::zeros(&[d]),
            });
        }
        Ok(EncoderParams {
            tok_emb,
            pos_emb,
            layers,
        })
    }

    /// Registers every weight as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> EncoderParams<Var> {
        self.map(&mut |a| tape.leaf(a.clone()))
    }
}

/// Per-layer activations `y(1) .. y(N)`, each `T×d`, on a tape.
#[derive(Clone, Debug)]
pub struct LayerStack {
    pub activations: Vec<Var>,
    pub mask: Vec<bool>,
}

impl LayerStack {
    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn seq_len(&self) -> usize {
        self.mask.len()
    }

    pub fn last(&self) -> Var {
        *self.activations.last().expect("non-empty stack")
    }

    /// Wraps plain arrays as constant activations (for exercising heads
    /// without an encoder).
    pub fn from_arrays<T: Scalar>(
        tape: &mut Tape<T>,
        layers: &[Array<T>],
        mask: Option<&[bool]>,
        differentiable: bool,
    ) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Input("empty layer stack".into()))?;
        if first.rank() != 2 || layers.iter().any(|l| l.shape() != first.shape()) {
            return Err(Error::Input("stack layers must share one T×d shape".into()));
        }
        let t = first.shape()[0];
        let mask = match mask {
            Some(m) if m.len() != t => {
                return Err(Error::Input(format!("mask length {} != {t}", m.len())))
            }
            Some(m) => m.to_vec(),
            None => vec![true; t],
        };
        let activations = layers
            .iter()
            .map(|a| {
                if differentiable {
                    tape.leaf(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect();
        Ok(LayerStack { activations, mask })
    }
}

/// Seeded inverted dropout for training mode.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate));
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        tape.mul_const(x, mask)
    }
}

/// Multi-head scaled dot-product attention of `query` rows over `context`
/// rows, with keys at invalid positions pushed to [`MASK_SCORE`].
///
/// Returns the projected output and the per-head attention weights.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    query: Var,
    context: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    num_heads: usize,
    key_mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(query).last_dim();
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d} is not divisible by {num_heads} heads"
        )));
    }
    let tq = tape.shape(query)[0];
    let tk = tape.shape(context)[0];
    if key_mask.len() != tk {
        return Err(Error::Input(format!(
            "key mask length {} != context length {tk}",
            key_mask.len()
        )));
    }
    let dh = d / num_heads;
    let q = tape.matmul(query, wq)?;
    let k = tape.matmul(context, wk)?;
    let v = tape.matmul(context, wv)?;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let bias = if key_mask.iter().all(|&m| m) {
        None
    } else {
        let row: Vec<f64> = key_mask
            .iter()
            .map(|&m| if m { 0.0 } else { MASK_SCORE })
            .collect();
        let full: Vec<f64> = (0..tq).flat_map(|_| row.iter().copied()).collect();
        Some(Array::from_f64(&[tq, tk], &full)?)
    };

    let mut heads = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for s in 0..num_heads {
        let qh = tape.slice_last(q, s * dh, dh)?;
        let kh = tape.slice_last(k, s * dh, dh)?;
        let vh = tape.slice_last(v, s * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(raw, scale)?;
        if let Some(b) = &bias {
            scores = tape.add_const(scores, b)?;
        }
        let p = tape.softmax_last(scores)?;
        weights.push(p);
        heads.push(tape.matmul(p, vh)?);
    }
    let joined = tape.concat_last(&heads)?;
    let out = tape.matmul(joined, wo)?;
    Ok((out, weights))
}

/// Encoder self-attention: every position attends over the valid positions.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &LayerParams<Var>,
    num_heads: usize,
    mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    multi_head_attention(
        tape, x, x, layer.wq, layer.wk, layer.wv, layer.wo, num_heads, mask,
    )
}

fn zero_padding<T: Scalar>(tape: &mut Tape<T>, x: Var, mask: &[bool]) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let d = tape.value(x).last_dim();
    let keep = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, d))
        .collect();
    tape.mul_const(x, keep)
}

/// Runs the encoder and returns every layer's output.
///
/// `mask` marks valid positions (all valid when `None`). Padded positions
/// are excluded as attention keys and zeroed in every returned activation.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    params: &EncoderParams<Var>,
    cfg: &EncoderConfig,
    tokens: &[TokenId],
    mask: Option<&[bool]>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<LayerStack> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if tokens[0] != CLS_ID {
        return Err(Error::Input(format!(
            "sequence must start with [CLS] ({CLS_ID}), got {}",
            tokens[0]
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Vocabulary {
            id: bad,
            vocab_size: cfg.vocab_size,
        });
    }
    let mask: Vec<bool> = match mask {
        Some(m) if m.len() != tokens.len() => {
            return Err(Error::Input(format!(
                "mask length {} != sequence length {}",
                m.len(),
                tokens.len()
            )))
        }
        Some(m) => m.to_vec(),
        None => vec![true; tokens.len()],
    };
    if !mask[0] {
        return Err(Error::Input("[CLS] position must be valid".into()));
    }

    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = tape.gather_rows(params.tok_emb, &ids)?;
    let pos = tape.gather_rows(params.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    if let Some(dr) = dropout.as_deref_mut() {
        x = dr.apply(tape, x)?;
    }
    x = zero_padding(tape, x, &mask)?;

    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let mut activations = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (mut attn, _) = self_attention(tape, x, layer, cfg.num_heads, &mask)?;
        if let Some(dr) = dropout.as_deref_mut() {
            attn = dr.apply(tape, attn)?;
        }
        let res = tape.add(x, attn)?;
        let h = tape.layer_norm(res, layer.ln1_gain, layer.ln1_bias, eps)?;

        let f1 = tape.matmul(h, layer.ffn1_weight)?;
        let f1 = tape.add_row(f1, layer.ffn1_bias)?;
        let act = tape.gelu(f1)?;
        let f2 = tape.matmul(act, layer.ffn2_weight)?;
        let mut f2 = tape.add_row(f2, layer.ffn2_bias)?;
        if let Some(dr) = dropout.as_deref_mut() {
            f2 = dr.apply(tape, f2)?;
        }
        let res = tape.add(h, f2)?;
        let y = tape.layer_norm(res, layer.ln2_gain, layer.ln2_bias, eps)?;
        x = zero_padding(tape, y, &mask)?;
        activations.push(x);
    }
    Ok(LayerStack { activations, mask })
}

/// Row 0 of layer `i` (1-based), shape `1×d`.
pub fn cls_of<T: Scalar>(tape: &mut Tape<T>, stack: &LayerStack, i: usize) -> Result<Var> {
    if i == 0 || i > stack.num_layers() {
        return Err(Error::Slice(format!(
            "layer {i} of a {}-layer stack",
            stack.num_layers()
        )));
    }
    tape.slice_axis0(stack.activations[i - 1], 0, 1)
}
