//! Finite-difference check of every head kind through the full encoder.

use clspool::arraycore::{
    analytic_gradient, max_relative_error, numeric_gradient, Array, MaxBackward, Scalar, Tape, Var,
};
use clspool::encoder::{EncoderConfig, TokenId, CLS_ID, NUM_RESERVED};
use clspool::heads::HeadKind;
use clspool::model::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE_64: f64 = 1e-4;
pub const TOLERANCE_32: f64 = 1e-2;

const SEQ_LEN: usize = 8;
const NUM_CLASSES: usize = 2;
const VOCAB: usize = 12;

/// N=4, d=32, four encoder heads, T=8, no dropout.
pub fn toy_config() -> EncoderConfig {
    EncoderConfig {
        max_seq_len: SEQ_LEN,
        dropout: 0.0,
        ..EncoderConfig::toy(VOCAB)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadCheck {
    pub head: HeadKind,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Largest relative gradient error of the cross-entropy loss with respect
/// to the head's parameters and both embedding tables. Gradients of the
/// embeddings pass through every encoder layer.
///
/// The analytic side runs in `T`. The finite differences always run in
/// 64-bit on the same (widened) parameters: in 32-bit the loss carries about
/// seven digits, too few to difference at any usable step.
pub fn check_head<T: Scalar>(
    head: HeadKind,
    seed: u64,
    step: f64,
    rule: MaxBackward,
) -> clspool::Result<f64> {
    let mut model = Model::<T>::init(&toy_config(), head, NUM_CLASSES, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    // Fresh layer norms have unit gain, which leaves every layer vector
    // with nearly the same norm and the norm-select head choosing by
    // rounding noise. Spread them out.
    model.visit_mut(&mut |name, p| {
        let (lo, hi) = if name.ends_with(".gain") { (0.5, 1.5) } else { (-0.2, 0.2) };
        if name.contains(".ln") {
            for v in p.data_mut() {
                *v = T::from_f64_lossy(rng.random_range(lo..hi));
            }
        }
    });
    let mut tokens: Vec<TokenId> = vec![CLS_ID];
    tokens.extend((1..SEQ_LEN).map(|_| rng.random_range(NUM_RESERVED..VOCAB) as TokenId));
    let label = rng.random_range(0..NUM_CLASSES);

    let analytic = analytic_gradient(loss_fn(&model, &tokens, label), &checked(&model), rule)?;
    let wide = model.cast::<f64>();
    let numeric = numeric_gradient(loss_fn(&wide, &tokens, label), &checked(&wide), step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

fn checked<T: Scalar>(model: &Model<T>) -> Vec<Array<T>> {
    let mut out = vec![model.encoder.tok_emb.clone(), model.encoder.pos_emb.clone()];
    model.head.visit(&mut |_, a| out.push(a.clone()));
    out
}

fn loss_fn<'a, T: Scalar>(
    model: &'a Model<T>,
    tokens: &'a [TokenId],
    label: usize,
) -> impl Fn(&mut Tape<T>, &[Var]) -> clspool::Result<Var> + 'a {
    move |tape, vars| {
        let mut bound = model.bind(tape);
        bound.encoder.tok_emb = vars[0];
        bound.encoder.pos_emb = vars[1];
        let mut rest = vars[2..].iter();
        bound
            .head
            .visit_mut(&mut |_, v| *v = *rest.next().expect("one var per head parameter"));
        let logits = model.forward(tape, &bound, tokens, None, None)?;
        tape.cross_entropy(logits, label)
    }
}

pub fn run_all(bits64: bool, seed: u64, rule: MaxBackward) -> clspool::Result<Vec<HeadCheck>> {
    let tolerance = if bits64 { TOLERANCE_64 } else { TOLERANCE_32 };
    HeadKind::all_default()
        .into_iter()
        .map(|head| {
            let err = if bits64 {
                check_head::<f64>(head, seed, 1e-4, rule)?
            } else {
                check_head::<f32>(head, seed, 1e-4, rule)?
            };
            Ok(HeadCheck {
                head,
                max_rel_err: err,
                pass: err < tolerance,
            })
        })
        .collect()
}
