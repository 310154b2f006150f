//! Turns parsed flags into datasets and training configurations.

use std::fs;

use clspool::data::{
    gen_synthetic, load_jsonl, split_holdout, Dataset, SyntheticTaskSpec, Vocab,
};
use clspool::encoder::{EncoderConfig, NUM_RESERVED};
use clspool::heads::{HeadKind, DEFAULT_K, DEFAULT_NUM_HEADS};
use clspool::training::{LossKind, TrainConfig};

use crate::args::{DataArgs, HeadFlags, TrainFlags};
use crate::CliError;

pub struct TaskData {
    /// `pattern`, `majority`, `pair`, or the data file stem.
    pub name: String,
    pub train: Dataset,
    pub eval: Dataset,
    pub vocab_size: usize,
}

pub fn load_data(args: &DataArgs, max_seq_len: usize) -> Result<TaskData, CliError> {
    if let Some(kind) = args.task {
        let mut spec = SyntheticTaskSpec::standard(kind, args.data_seed);
        if let Some(n) = args.train_size {
            spec.train_size = n as usize;
        }
        if let Some(n) = args.eval_size {
            spec.eval_size = n as usize;
        }
        if let Some(n) = args.seq_len {
            spec.min_len = n as usize;
            spec.max_len = n as usize;
        }
        if let Some(v) = args.vocab_size {
            spec.vocab_size = v;
        }
        spec.check_fits(max_seq_len)?;
        let (train, eval) = gen_synthetic(&spec)?;
        return Ok(TaskData {
            name: kind.name().to_string(),
            train,
            eval,
            vocab_size: spec.vocab_size,
        });
    }
    let Some(path) = &args.data else {
        return Err(CliError::Usage(
            "one of --task or --data is required".into(),
        ));
    };
    let vocab = args.vocab.as_deref().map(Vocab::load).transpose()?;
    let all = load_jsonl(path, vocab.as_ref(), max_seq_len)?;
    if all.is_empty() {
        return Err(CliError::Usage(format!("{} holds no examples", path.display())));
    }
    let (train, eval) = match &args.eval_data {
        Some(p) => (all, load_jsonl(p, vocab.as_ref(), max_seq_len)?),
        None => split_holdout(&all, args.eval_fraction, args.data_seed)?,
    };
    let largest = train
        .examples
        .iter()
        .chain(&eval.examples)
        .flat_map(|e| e.tokens.iter().copied())
        .max()
        .unwrap_or(0) as usize;
    let vocab_size = match &vocab {
        Some(v) => v.size(),
        None => (largest + 1).max(NUM_RESERVED + 1),
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    Ok(TaskData {
        name,
        train,
        eval,
        vocab_size,
    })
}

/// Defaults, then the config file, then flags. The head and seed are
/// placeholders the caller fills in per run.
pub fn base_config(flags: &TrainFlags) -> Result<(TrainConfig, Option<String>), CliError> {
    let mut cfg = TrainConfig::new(HeadKind::Baseline, EncoderConfig::toy(NUM_RESERVED + 1), 0);
    let mut head_from_file = None;
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{}:{}: expected key=value",
                    path.display(),
                    i + 1
                )));
            };
            // The head is resolved with the -k/--heads defaults later.
            if k.trim() == "head" {
                head_from_file = Some(v.trim().to_string());
                continue;
            }
            cfg.set(k, v)?;
        }
    }
    let opt = |v: Option<String>, key: &str, cfg: &mut TrainConfig| -> Result<(), CliError> {
        if let Some(v) = v {
            cfg.set(key, &v)?;
        }
        Ok(())
    };
    opt(flags.epochs.map(|v| v.to_string()), "epochs", &mut cfg)?;
    opt(flags.lr.map(|v| v.to_string()), "learning_rate", &mut cfg)?;
    opt(flags.batch_size.map(|v| v.to_string()), "batch_size", &mut cfg)?;
    opt(flags.warmup_ratio.map(|v| v.to_string()), "warmup_ratio", &mut cfg)?;
    opt(flags.weight_decay.map(|v| v.to_string()), "weight_decay", &mut cfg)?;
    opt(flags.clip_norm.map(|v| v.to_string()), "clip_norm", &mut cfg)?;
    opt(flags.dropout.map(|v| v.to_string()), "dropout", &mut cfg)?;
    opt(flags.layers.map(|v| v.to_string()), "num_layers", &mut cfg)?;
    Ok((cfg, head_from_file))
}

/// Finalizes a config for `data`: vocabulary, loss and a validity check.
pub fn bind_to_data(cfg: &mut TrainConfig, data: &TaskData) -> Result<(), CliError> {
    cfg.encoder.vocab_size = data.vocab_size;
    cfg.loss = LossKind::for_dataset(&data.train);
    cfg.validate()?;
    Ok(())
}

pub fn seeds(flags: &TrainFlags, default: &[u64]) -> Vec<u64> {
    if flags.seed.is_empty() {
        default.to_vec()
    } else {
        flags.seed.clone()
    }
}

/// Parses `--head` specs (or `fallback` when none are given) using
/// `--k`/`--heads` for omitted parameters.
pub fn head_kinds(flags: &HeadFlags, fallback: &[String]) -> Result<Vec<HeadKind>, CliError> {
    if flags.k.len() > 1 {
        return Err(CliError::Usage(
            "--k takes a single value here; use ablate-k to sweep depths".into(),
        ));
    }
    let k = flags.k.first().copied().unwrap_or(DEFAULT_K);
    let h = flags.heads.unwrap_or(DEFAULT_NUM_HEADS);
    let specs = if flags.head.is_empty() {
        fallback
    } else {
        &flags.head
    };
    let mut kinds = Vec::new();
    for s in specs {
        let kind = HeadKind::parse_with_defaults(s, k, h)?;
        if kinds.contains(&kind) {
            return Err(CliError::Usage(format!("head `{kind}` given twice")));
        }
        kinds.push(kind);
    }
    Ok(kinds)
}

pub fn check_heads(kinds: &[HeadKind], cfg: &TrainConfig) -> Result<(), CliError> {
    for kind in kinds {
        kind.validate(cfg.encoder.num_layers, cfg.encoder.d_model)?;
    }
    Ok(())
}
