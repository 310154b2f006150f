//! Encoder plus aggregation head as one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arraycore::{Array, Scalar, Tape, Var};
use crate::encoder::{encode, Dropout, EncoderConfig, EncoderParams, TokenId};
use crate::error::{Error, Result};
use crate::heads::{head_forward, HeadKind, HeadParams};

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Encoder = 0,
    Classifier = 1,
    Attention = 2,
    Shuffle = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// SplitMix64 finalizer, used to derive per-example seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub encoder_config: EncoderConfig,
    pub head_kind: HeadKind,
    pub num_classes: usize,
    pub encoder: EncoderParams<Array<T>>,
    pub head: HeadParams<Array<T>>,
}

/// A model's weights registered on a tape.
pub struct BoundModel {
    pub encoder: EncoderParams<Var>,
    pub head: HeadParams<Var>,
}

impl BoundModel {
    pub fn visit(&self, f: &mut impl FnMut(String, &Var)) {
        self.encoder.visit(f);
        self.head.visit(f);
    }
}

impl<T: Scalar> Model<T> {
    /// Encoder weights, classifier and attention head each come from their
    /// own stream of `seed`, so heads of the same shape start identical and
    /// all kinds share the encoder initialization.
    pub fn init(
        encoder_config: &EncoderConfig,
        head_kind: HeadKind,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        encoder_config.validate()?;
        head_kind.validate(encoder_config.num_layers, encoder_config.d_model)?;
        let encoder = EncoderParams::init(encoder_config, &mut stream_rng(seed, Stream::Encoder))?;
        let head = HeadParams::init(
            head_kind,
            encoder_config.d_model,
            num_classes,
            &mut stream_rng(seed, Stream::Classifier),
            &mut stream_rng(seed, Stream::Attention),
        )?;
        Ok(Model {
            encoder_config: encoder_config.clone(),
            head_kind,
            num_classes,
            encoder,
            head,
        })
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Array<T>)) {
        self.encoder.visit(f);
        self.head.visit(f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Array<T>)) {
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }

    pub fn named_parameters(&self) -> Vec<(String, &Array<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, a| out.push((name, a)));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(tape),
            head: self.head.bind(tape),
        }
    }

    /// Logits `1×C` on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        tokens: &[TokenId],
        mask: Option<&[bool]>,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let stack = encode(tape, &bound.encoder, &self.encoder_config, tokens, mask, dropout)?;
        head_forward(tape, self.head_kind, &stack, &bound.head)
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, tokens, None, None)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            encoder_config: self.encoder_config.clone(),
            head_kind: self.head_kind,
            num_classes: self.num_classes,
            encoder: self.encoder.map(&mut |a| a.cast()),
            head: self.head.map(&mut |a| a.cast()),
        }
    }

    /// Overwrites every parameter from `(name, array)` pairs in visit order.
    pub fn load_parameters(&mut self, mut params: Vec<(String, Array<T>)>) -> Result<()> {
        let expected = self.named_parameters().len();
        if params.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} parameters, found {}",
                params.len()
            )));
        }
        params.reverse();
        let mut failure = None;
        self.visit_mut(&mut |name, slot| {
            let (got, array) = params.pop().expect("count checked");
            if failure.is_some() {
                return;
            }
            if got != name || array.shape() != slot.shape() {
                failure = Some(Error::Format(format!(
                    "parameter `{got}` {:?} does not match `{name}` {:?}",
                    array.shape(),
                    slot.shape()
                )));
                return;
            }
            *slot = array;
        });
        failure.map_or(Ok(()), Err)
    }
}

/// AdamW skips decay for biases and layer-norm gains.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain"))
}
