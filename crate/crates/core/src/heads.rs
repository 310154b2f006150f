//! [CLS]-refinement heads: each maps a layer stack to class logits.
//!
//! | kind                | representation fed to the classifier                       |
//! |---------------------|------------------------------------------------------------|
//! | `baseline`          | final-layer [CLS]                                          |
//! | `maxcls:k`          | elementwise max of the last `k` [CLS] vectors              |
//! | `mha:h`             | final [CLS] attending over the final layer                 |
//! | `maxseq+mha:k,h`    | max-pool whole sequences of the last `k` layers, then attend |
//! | `meanseq+mha:k,h`   | as above with a mean                                       |
//! | `normseq+mha:k,h`   | per position, the layer vector with the largest L2 norm    |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arraycore::{Array, Scalar, Tape, Var};
use crate::encoder::{cls_of, multi_head_attention, LayerStack};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_NUM_HEADS: usize = 4;

const CLASSIFIER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Baseline,
    MaxCls { k: usize },
    Mha { num_heads: usize },
    MaxSeqMha { k: usize, num_heads: usize },
    MeanSeqMha { k: usize, num_heads: usize },
    NormSelectSeqMha { k: usize, num_heads: usize },
}

pub const VALID_HEAD_SPECS: &str =
    "baseline, maxcls:k=K, mha:h=H, maxseq+mha:k=K,h=H, meanseq+mha:k=K,h=H, normseq+mha:k=K,h=H";

impl HeadKind {
    /// The six kinds with default `k` and head count.
    pub fn all_default() -> [HeadKind; 6] {
        let (k, num_heads) = (DEFAULT_K, DEFAULT_NUM_HEADS);
        [
            HeadKind::Baseline,
            HeadKind::MaxCls { k },
            HeadKind::Mha { num_heads },
            HeadKind::MaxSeqMha { k, num_heads },
            HeadKind::MeanSeqMha { k, num_heads },
            HeadKind::NormSelectSeqMha { k, num_heads },
        ]
    }

    pub fn depth(&self) -> Option<usize> {
        match *self {
            HeadKind::Baseline | HeadKind::Mha { .. } => None,
            HeadKind::MaxCls { k }
            | HeadKind::MaxSeqMha { k, .. }
            | HeadKind::MeanSeqMha { k, .. }
            | HeadKind::NormSelectSeqMha { k, .. } => Some(k),
        }
    }

    pub fn attention_heads(&self) -> Option<usize> {
        match *self {
            HeadKind::Baseline | HeadKind::MaxCls { .. } => None,
            HeadKind::Mha { num_heads }
            | HeadKind::MaxSeqMha { num_heads, .. }
            | HeadKind::MeanSeqMha { num_heads, .. }
            | HeadKind::NormSelectSeqMha { num_heads, .. } => Some(num_heads),
        }
    }

    pub fn uses_attention(&self) -> bool {
        self.attention_heads().is_some()
    }

    /// Short label without parameters, e.g. `maxseq+mha`.
    pub fn family(&self) -> &'static str {
        match self {
            HeadKind::Baseline => "baseline",
            HeadKind::MaxCls { .. } => "maxcls",
            HeadKind::Mha { .. } => "mha",
            HeadKind::MaxSeqMha { .. } => "maxseq+mha",
            HeadKind::MeanSeqMha { .. } => "meanseq+mha",
            HeadKind::NormSelectSeqMha { .. } => "normseq+mha",
        }
    }

    /// Same family with a different pooling depth.
    pub fn with_depth(&self, k: usize) -> Result<HeadKind> {
        Ok(match *self {
            HeadKind::MaxCls { .. } => HeadKind::MaxCls { k },
            HeadKind::MaxSeqMha { num_heads, .. } => HeadKind::MaxSeqMha { k, num_heads },
            HeadKind::MeanSeqMha { num_heads, .. } => HeadKind::MeanSeqMha { k, num_heads },
            HeadKind::NormSelectSeqMha { num_heads, .. } => {
                HeadKind::NormSelectSeqMha { k, num_heads }
            }
            other => {
                return Err(Error::Config(format!(
                    "head `{other}` has no pooling depth"
                )))
            }
        })
    }

    pub fn validate(&self, num_layers: usize, d_model: usize) -> Result<()> {
        if let Some(k) = self.depth() {
            if k == 0 || k > num_layers {
                return Err(Error::Config(format!(
                    "pooling depth k={k} must lie in [1, {num_layers}]"
                )));
            }
        }
        if let Some(h) = self.attention_heads() {
            if h == 0 || d_model % h != 0 {
                return Err(Error::Config(format!(
                    "{h} attention heads do not divide d_model {d_model}"
                )));
            }
        }
        Ok(())
    }

    /// Parses a spec, filling omitted `k`/`h` from the given defaults.
    pub fn parse_with_defaults(s: &str, default_k: usize, default_h: usize) -> Result<HeadKind> {
        let s = s.trim().to_ascii_lowercase();
        let (family, args) = match s.split_once(':') {
            Some((f, a)) => (f.to_string(), a.to_string()),
            None => (s.clone(), String::new()),
        };
        let mut k = None;
        let mut h = None;
        for part in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, val) = part.split_once('=').ok_or_else(|| unknown(&s))?;
            let val: usize = val.trim().parse().map_err(|_| unknown(&s))?;
            match key.trim() {
                "k" => k = Some(val),
                "h" => h = Some(val),
                _ => return Err(unknown(&s)),
            }
        }
        let k_ok = k.unwrap_or(default_k);
        let h_ok = h.unwrap_or(default_h);
        let kind = match family.as_str() {
            "baseline" if k.is_none() && h.is_none() => HeadKind::Baseline,
            "maxcls" if h.is_none() => HeadKind::MaxCls { k: k_ok },
            "mha" if k.is_none() => HeadKind::Mha { num_heads: h_ok },
            "maxseq+mha" => HeadKind::MaxSeqMha {
                k: k_ok,
                num_heads: h_ok,
            },
            "meanseq+mha" => HeadKind::MeanSeqMha {
                k: k_ok,
                num_heads: h_ok,
            },
            "normseq+mha" => HeadKind::NormSelectSeqMha {
                k: k_ok,
                num_heads: h_ok,
            },
            _ => return Err(unknown(&s)),
        };
        if kind.depth() == Some(0) || kind.attention_heads() == Some(0) {
            return Err(unknown(&s));
        }
        Ok(kind)
    }
}

fn unknown(s: &str) -> Error {
    Error::Config(format!(
        "unknown head spec `{s}`; valid kinds: {VALID_HEAD_SPECS}"
    ))
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::parse_with_defaults(s, DEFAULT_K, DEFAULT_NUM_HEADS)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            HeadKind::Baseline => write!(f, "baseline"),
            HeadKind::MaxCls { k } => write!(f, "maxcls:k={k}"),
            HeadKind::Mha { num_heads } => write!(f, "mha:h={num_heads}"),
            HeadKind::MaxSeqMha { k, num_heads }
            | HeadKind::MeanSeqMha { k, num_heads }
            | HeadKind::NormSelectSeqMha { k, num_heads } => {
                write!(f, "{}:k={k},h={num_heads}", self.family())
            }
        }
    }
}

/// Projections of the added attention layer. Head `s` uses columns
/// `s*d/h .. (s+1)*d/h` of `wq`, `wk` and `wv`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    pub attn: Option<AttnParams<P>>,
    pub classifier_weight: P,
    pub classifier_bias: P,
}

impl<P> HeadParams<P> {
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        if let Some(a) = &self.attn {
            f("head.attn.wq".into(), &a.wq);
            f("head.attn.wk".into(), &a.wk);
            f("head.attn.wv".into(), &a.wv);
            f("head.attn.wo".into(), &a.wo);
        }
        f("head.classifier.weight".into(), &self.classifier_weight);
        f("head.classifier.bias".into(), &self.classifier_bias);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut P)) {
        if let Some(a) = &mut self.attn {
            f("head.attn.wq".into(), &mut a.wq);
            f("head.attn.wk".into(), &mut a.wk);
            f("head.attn.wv".into(), &mut a.wv);
            f("head.attn.wo".into(), &mut a.wo);
        }
        f("head.classifier.weight".into(), &mut self.classifier_weight);
        f("head.classifier.bias".into(), &mut self.classifier_bias);
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> HeadParams<Q> {
        HeadParams {
            attn: self.attn.as_ref().map(|a| AttnParams {
                wq: f(&a.wq),
                wk: f(&a.wk),
                wv: f(&a.wv),
                wo: f(&a.wo),
            }),
            classifier_weight: f(&self.classifier_weight),
            classifier_bias: f(&self.classifier_bias),
        }
    }
}

impl<T: Scalar> HeadParams<Array<T>> {
    /// Classifier from `classifier_rng` (Normal(0, 0.02), zero bias);
    /// attention projections, when the kind needs them, Xavier-uniform from
    /// `attn_rng`.
    pub fn init(
        kind: HeadKind,
        d_model: usize,
        num_classes: usize,
        classifier_rng: &mut ChaCha8Rng,
        attn_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("number of classes must be at least 1".into()));
        }
        let normal = Normal::new(0.0, CLASSIFIER_INIT_STD).expect("valid std");
        let w: Vec<f64> = (0..d_model * num_classes)
            .map(|_| normal.sample(classifier_rng))
            .collect();
        let attn = if kind.uses_attention() {
            Some(AttnParams {
                wq: xavier_uniform_init(d_model, d_model, attn_rng),
                wk: xavier_uniform_init(d_model, d_model, attn_rng),
                wv: xavier_uniform_init(d_model, d_model, attn_rng),
                wo: xavier_uniform_init(d_model, d_model, attn_rng),
            })
        } else {
            None
        };
        Ok(HeadParams {
            attn,
            classifier_weight: Array::from_f64(&[d_model, num_classes], &w)?,
            classifier_bias: Array::zeros(&[num_classes]),
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> HeadParams<Var> {
        self.map(&mut |a| tape.leaf(a.clone()))
    }
}

/// I.i.d. uniform on `[-a, a]` with `a = sqrt(6 / (rows + cols))`.
pub fn xavier_uniform_init<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Array<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let v: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Array::from_f64(&[rows, cols], &v).expect("positive extents")
}

/// `Θ_t^(k)`: the first `t` rows of the last `k` layers, shape `k×t×d`,
/// oldest layer first.
pub fn theta<T: Scalar>(tape: &mut Tape<T>, stack: &LayerStack, k: usize, t: usize) -> Result<Var> {
    let n = stack.num_layers();
    if k == 0 || k > n {
        return Err(Error::Slice(format!("k={k} outside [1, {n}]")));
    }
    if t == 0 || t > stack.seq_len() {
        return Err(Error::Slice(format!("t={t} outside [1, {}]", stack.seq_len())));
    }
    let rows: Vec<Var> = stack.activations[n - k..]
        .iter()
        .map(|&y| tape.slice_axis0(y, 0, t))
        .collect::<Result<_>>()?;
    tape.stack(&rows)
}

pub fn head_baseline<T: Scalar>(tape: &mut Tape<T>, stack: &LayerStack) -> Result<Var> {
    cls_of(tape, stack, stack.num_layers())
}

pub fn head_max_cls<T: Scalar>(tape: &mut Tape<T>, stack: &LayerStack, k: usize) -> Result<Var> {
    let th = theta(tape, stack, k, 1)?;
    tape.max_axis0(th)
}

/// Attention output of a single query row together with the per-head
/// weights over the context.
pub struct ClsAttention {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// The added attention layer: one query row attends over `context`.
/// No residual, normalization or activation follows.
pub fn cls_attend<T: Scalar>(
    tape: &mut Tape<T>,
    query_cls: Var,
    context: Var,
    params: &AttnParams<Var>,
    num_heads: usize,
    mask: &[bool],
) -> Result<ClsAttention> {
    if tape.shape(query_cls)[0] != 1 {
        return Err(Error::shape("cls_attend", tape.shape(query_cls), &[1]));
    }
    let (output, weights) = multi_head_attention(
        tape, query_cls, context, params.wq, params.wk, params.wv, params.wo, num_heads, mask,
    )?;
    Ok(ClsAttention { output, weights })
}

fn attn_params(params: &HeadParams<Var>) -> Result<&AttnParams<Var>> {
    params
        .attn
        .as_ref()
        .ok_or_else(|| Error::Config("head kind requires attention parameters".into()))
}

pub fn head_mha<T: Scalar>(
    tape: &mut Tape<T>,
    stack: &LayerStack,
    params: &HeadParams<Var>,
    num_heads: usize,
) -> Result<Var> {
    let q = cls_of(tape, stack, stack.num_layers())?;
    let ctx = stack.last();
    Ok(cls_attend(tape, q, ctx, attn_params(params)?, num_heads, &stack.mask)?.output)
}

fn attend_pooled<T: Scalar>(
    tape: &mut Tape<T>,
    pooled: Var,
    params: &HeadParams<Var>,
    num_heads: usize,
    mask: &[bool],
) -> Result<Var> {
    let q = tape.slice_axis0(pooled, 0, 1)?;
    Ok(cls_attend(tape, q, pooled, attn_params(params)?, num_heads, mask)?.output)
}

/// Sequence-wide max over the last `k` layers (`T×d`).
pub fn max_pooled_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    stack: &LayerStack,
    k: usize,
) -> Result<Var> {
    let th = theta(tape, stack, k, stack.seq_len())?;
    tape.max_axis0(th)
}

pub fn head_max_seq_mha<T: Scalar>(
    tape: &mut Tape<T>,
    stack: &LayerStack,
    k: usize,
    params: &HeadParams<Var>,
    num_heads: usize,
) -> Result<Var> {
    let pooled = max_pooled_sequence(tape, stack, k)?;
    attend_pooled(tape, pooled, params, num_heads, &stack.mask)
}

pub fn head_mean_seq_mha<T: Scalar>(
    tape: &mut Tape<T>,
    stack: &LayerStack,
    k: usize,
    params: &HeadParams<Var>,
    num_heads: usize,
) -> Result<Var> {
    let th = theta(tape, stack, k, stack.seq_len())?;
    let pooled = tape.mean_axis0(th)?;
    attend_pooled(tape, pooled, params, num_heads, &stack.mask)
}

/// Per position, index (within the last `k` layers) of the vector with the
/// largest L2 norm. Ties go to the deepest layer.
pub fn norm_select_layers<T: Scalar>(tape: &Tape<T>, theta_var: Var) -> Vec<usize> {
    let th = tape.value(theta_var);
    let (k, t, d) = (th.shape()[0], th.shape()[1], th.shape()[2]);
    (0..t)
        .map(|j| {
            let mut best = 0;
            let mut best_norm = T::neg_infinity();
            for l in 0..k {
                let off = (l * t + j) * d;
                let norm = th.data()[off..off + d]
                    .iter()
                    .map(|&v| v * v)
                    .sum::<T>()
                    .sqrt();
                if norm >= best_norm {
                    best_norm = norm;
                    best = l;
                }
            }
            best
        })
        .collect()
}

pub fn head_norm_select_seq_mha<T: Scalar>(
    tape: &mut Tape<T>,
    stack: &LayerStack,
    k: usize,
    params: &HeadParams<Var>,
    num_heads: usize,
) -> Result<Var> {
    let th = theta(tape, stack, k, stack.seq_len())?;
    let chosen = norm_select_layers(tape, th);
    let selected = tape.select_axis0(th, &chosen)?;
    attend_pooled(tape, selected, params, num_heads, &stack.mask)
}

/// Linear classifier `rep · W_c + b`, no activation.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, rep: Var, weight: Var, bias: Var) -> Result<Var> {
    let z = tape.matmul(rep, weight)?;
    tape.add_row(z, bias)
}

/// Aggregated representation (`1×d`) for `kind`.
pub fn head_representation<T: Scalar>(
    tape: &mut Tape<T>,
    kind: HeadKind,
    stack: &LayerStack,
    params: &HeadParams<Var>,
) -> Result<Var> {
    if kind.uses_attention() != params.attn.is_some() {
        return Err(Error::Config(format!(
            "parameters do not match head kind `{kind}`"
        )));
    }
    match kind {
        HeadKind::Baseline => head_baseline(tape, stack),
        HeadKind::MaxCls { k } => head_max_cls(tape, stack, k),
        HeadKind::Mha { num_heads } => head_mha(tape, stack, params, num_heads),
        HeadKind::MaxSeqMha { k, num_heads } => head_max_seq_mha(tape, stack, k, params, num_heads),
        HeadKind::MeanSeqMha { k, num_heads } => {
            head_mean_seq_mha(tape, stack, k, params, num_heads)
        }
        HeadKind::NormSelectSeqMha { k, num_heads } => {
            head_norm_select_seq_mha(tape, stack, k, params, num_heads)
        }
    }
}

/// Logits (`1×C`) for `kind`.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    kind: HeadKind,
    stack: &LayerStack,
    params: &HeadParams<Var>,
) -> Result<Var> {
    let rep = head_representation(tape, kind, stack, params)?;
    classify(tape, rep, params.classifier_weight, params.classifier_bias)
}
