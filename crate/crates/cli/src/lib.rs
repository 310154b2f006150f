//! Command implementations behind the `clspool` binary.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.

pub mod args;
pub mod experiment;
pub mod gradcheck;
pub mod report;
pub mod setup;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::Path;

use clap::Parser;
use clspool::arraycore::MaxBackward;
use clspool::data::subsample;
use clspool::heads::{HeadKind, DEFAULT_NUM_HEADS};
use clspool::training::{evaluate, load_checkpoint, save_checkpoint};

use crate::args::{
    AblateArgs, Bits, Cli, Command, CompareArgs, EvalArgs, Family, Fault, GradcheckArgs,
    LowresArgs, Size, TrainArgs,
};
use crate::experiment::{run_grid, train_one, write_json, write_records, RunOutcome};
use crate::report::{csv_field, render_means, render_stds, to_csv, Table, BASELINE};
use crate::setup::{
    base_config, bind_to_data, check_heads, head_kinds, load_data, seeds, TaskData,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<clspool::Error> for CliError {
    fn from(e: clspool::Error) -> Self {
        match e {
            clspool::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::AblateK(a) => cmd_ablate_k(a, out),
        Command::Lowres(a) => cmd_lowres(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let kind = match e {
                CliError::Usage(_) => "error",
                CliError::Runtime(_) => "runtime error",
            };
            let _ = writeln!(err, "clspool: {kind}: {e}");
            e.exit_code()
        }
    }
}

fn jobs(flag: Option<u64>) -> usize {
    flag.map(|j| j as usize).unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

fn require_source(data: &args::DataArgs) -> Result<(), CliError> {
    if data.has_source() {
        Ok(())
    } else {
        Err(CliError::Usage(
            "one of --task or --data is required".into(),
        ))
    }
}

/// Writes CSV and text reports for one table, echoing the text to `out`.
fn emit_table(
    out: &mut dyn Write,
    dir: &Path,
    stem: &str,
    table: &Table,
    with_std: bool,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut text = render_means(table);
    if with_std {
        text.push('\n');
        text.push_str(&render_stds(table));
    }
    fs::write(dir.join(format!("{stem}.csv")), to_csv(table))?;
    fs::write(dir.join(format!("{stem}.txt")), &text)?;
    write!(out, "{text}")?;
    Ok(())
}

fn finish(out: &mut dyn Write, table_failed: bool, outcomes: &[RunOutcome]) -> Result<i32, CliError> {
    for o in outcomes {
        if let Err(e) = &o.result {
            writeln!(out, "run {} seed {} failed: {e}", o.head, o.seed)?;
        }
    }
    Ok(if table_failed { EXIT_RUNTIME } else { EXIT_OK })
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    require_source(&a.data)?;
    let (mut cfg, head_from_file) = base_config(&a.train)?;
    let data = load_data(&a.data, cfg.encoder.max_seq_len)?;
    bind_to_data(&mut cfg, &data)?;
    let fallback: Vec<String> = vec![head_from_file.unwrap_or_else(|| BASELINE.into())];
    let kinds = head_kinds(&a.heads, &fallback)?;
    let [head] = kinds[..] else {
        return Err(CliError::Usage("train takes exactly one --head".into()));
    };
    let seeds = seeds(&a.train, &[DEFAULT_SEEDS[0]]);
    let [seed] = seeds[..] else {
        return Err(CliError::Usage("train takes exactly one --seed".into()));
    };
    cfg.head = head;
    cfg.seed = seed;
    cfg.validate()?;

    let (model, record) = train_one(&cfg, &data)?;
    fs::create_dir_all(&a.train.out)?;
    let ckpt = a.train.out.join("model.mpbt");
    save_checkpoint(&ckpt, &model, &cfg)?;
    let metrics = a.train.out.join("metrics.json");
    write_json(&metrics, &record)?;
    writeln!(
        out,
        "{} seed {seed} on {}: eval {} = {:.4} ({} steps, {:.1}s)",
        record.head,
        record.task,
        record.metric,
        record.eval[&record.metric],
        record.steps,
        record.wall_seconds
    )?;
    writeln!(out, "wrote {} and {}", ckpt.display(), metrics.display())?;
    Ok(EXIT_OK)
}

fn default_head_specs() -> Vec<String> {
    HeadKind::all_default().iter().map(|h| h.to_string()).collect()
}

fn prepare(
    data_args: &args::DataArgs,
    flags: &args::TrainFlags,
) -> Result<(clspool::training::TrainConfig, Option<String>, TaskData), CliError> {
    require_source(data_args)?;
    let (mut cfg, head_from_file) = base_config(flags)?;
    let data = load_data(data_args, cfg.encoder.max_seq_len)?;
    bind_to_data(&mut cfg, &data)?;
    Ok((cfg, head_from_file, data))
}

fn cmd_compare(a: CompareArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let (cfg, head_from_file, data) = prepare(&a.data, &a.train)?;
    let fallback = head_from_file.map_or_else(default_head_specs, |h| vec![h]);
    let kinds = head_kinds(&a.heads, &fallback)?;
    if kinds.len() < 2 {
        return Err(CliError::Usage("compare needs at least two heads".into()));
    }
    check_heads(&kinds, &cfg)?;
    let seeds = seeds(&a.train, &DEFAULT_SEEDS);
    let outcomes = run_grid(&cfg, &kinds, &seeds, &data, jobs(a.train.jobs))?;
    write_records(&a.train.out.join("runs"), &outcomes)?;
    let labels: Vec<String> = outcomes.iter().map(|o| o.head.to_string()).collect();
    let title = format!("{} ({} train / {} eval)", data.name, data.train.len(), data.eval.len());
    let table = Table::build(&title, "head", &labels, &outcomes, &seeds, true);
    emit_table(out, &a.train.out, "compare", &table, true)?;
    finish(out, table.any_failed(), &outcomes)
}

fn family_kind(family: Family, k: usize, h: usize) -> HeadKind {
    match family {
        Family::Maxcls => HeadKind::MaxCls { k },
        Family::Maxseq => HeadKind::MaxSeqMha { k, num_heads: h },
        Family::Meanseq => HeadKind::MeanSeqMha { k, num_heads: h },
        Family::Normseq => HeadKind::NormSelectSeqMha { k, num_heads: h },
    }
}

fn cmd_ablate_k(a: AblateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let (cfg, _, data) = prepare(&a.data, &a.train)?;
    let n = cfg.encoder.num_layers;
    let ks: Vec<usize> = if a.k.is_empty() {
        (1..=n).collect()
    } else {
        a.k.clone()
    };
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(CliError::Usage(format!(
            "k={bad} outside [1, {n}] for a {n}-layer encoder"
        )));
    }
    let h = a.heads.unwrap_or(DEFAULT_NUM_HEADS);
    let kinds: Vec<HeadKind> = ks.iter().map(|&k| family_kind(a.family, k, h)).collect();
    check_heads(&kinds, &cfg)?;
    let seeds = seeds(&a.train, &DEFAULT_SEEDS);
    let outcomes = run_grid(&cfg, &kinds, &seeds, &data, jobs(a.train.jobs))?;
    write_records(&a.train.out.join("runs"), &outcomes)?;
    let labels: Vec<String> = outcomes
        .iter()
        .map(|o| o.head.depth().expect("depth family").to_string())
        .collect();
    let title = format!("{} depth ablation on {}", kinds[0].family(), data.name);
    let table = Table::build(&title, "k", &labels, &outcomes, &seeds, false);
    emit_table(out, &a.train.out, "ablate_k", &table, true)?;
    finish(out, table.any_failed(), &outcomes)
}

fn cmd_lowres(a: LowresArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let (cfg, head_from_file, data) = prepare(&a.data, &a.train)?;
    let fallback = head_from_file.map_or_else(
        || vec![BASELINE.to_string(), HeadKind::all_default()[3].to_string()],
        |h| vec![h],
    );
    let kinds = head_kinds(&a.heads, &fallback)?;
    check_heads(&kinds, &cfg)?;
    let full = data.train.len();
    let mut sizes = Vec::new();
    for s in &a.sizes {
        let n = match *s {
            Size::Full => full,
            Size::N(n) if n > full => {
                return Err(CliError::Usage(format!(
                    "size {n} exceeds the {full} training examples"
                )))
            }
            Size::N(n) => n,
        };
        sizes.push(n);
    }
    let seeds = seeds(&a.train, &DEFAULT_SEEDS);
    let jobs = jobs(a.train.jobs);

    let mut csv = String::from("size,head,metric_mean,metric_std,delta\n");
    let mut any_failed = false;
    let mut all = Vec::new();
    for &n in &sizes {
        let subset = TaskData {
            name: data.name.clone(),
            train: subsample(&data.train, n, a.data.data_seed)?,
            eval: data.eval.clone(),
            vocab_size: data.vocab_size,
        };
        let outcomes = run_grid(&cfg, &kinds, &seeds, &subset, jobs)?;
        write_records(&a.train.out.join("runs").join(format!("n{n}")), &outcomes)?;
        let labels: Vec<String> = outcomes.iter().map(|o| o.head.to_string()).collect();
        let title = format!("{} with {n} training examples", data.name);
        let table = Table::build(&title, "head", &labels, &outcomes, &seeds, true);
        write!(out, "{}", render_means(&table))?;
        writeln!(out)?;
        any_failed |= table.any_failed();

        let metric = outcomes
            .iter()
            .find_map(|o| o.result.as_ref().ok().map(|r| r.metric.clone()))
            .unwrap_or_else(|| "accuracy".into());
        let base_mean = table
            .row(BASELINE)
            .and_then(|r| r.cells.get(&metric))
            .map(|c| c.mean);
        for row in &table.rows {
            match row.cells.get(&metric) {
                Some(c) => {
                    let delta = base_mean.map(|b| (c.mean - b).to_string()).unwrap_or_default();
                    let std = c.std.map(|s| s.to_string()).unwrap_or_default();
                    csv.push_str(&format!(
                        "{n},{},{},{std},{delta}\n",
                        csv_field(&row.label),
                        c.mean
                    ));
                }
                None => csv.push_str(&format!("{n},{},,,\n", csv_field(&row.label))),
            }
        }
        all.extend(outcomes);
    }
    fs::create_dir_all(&a.train.out)?;
    fs::write(a.train.out.join("lowres.csv"), &csv)?;
    writeln!(out, "wrote {}", a.train.out.join("lowres.csv").display())?;
    finish(out, any_failed, &all)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    let bits64 = a.bits == Bits::B64;
    if !bits64 {
        writeln!(
            err,
            "warning: 32-bit gradient check; tolerance loosened to {:.0e} (use --bits 64 for the 1e-4 check)",
            gradcheck::TOLERANCE_32
        )?;
    }
    let rule = match a.fault {
        Some(Fault::FlipMaxSign) => MaxBackward::FlippedSign,
        None => MaxBackward::Argmax,
    };
    let checks = gradcheck::run_all(bits64, a.seed, rule)?;
    let width = checks.iter().map(|c| c.head.to_string().len()).max().unwrap_or(0);
    for c in &checks {
        writeln!(
            out,
            "{:<width$}  max rel err {:.3e}  {}",
            c.head.to_string(),
            c.max_rel_err,
            if c.pass { "PASS" } else { "FAIL" }
        )?;
    }
    Ok(if checks.iter().all(|c| c.pass) {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    })
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    require_source(&a.data)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data, ckpt.config.encoder.max_seq_len)?;
    if data.vocab_size > ckpt.config.encoder.vocab_size {
        return Err(CliError::Usage(format!(
            "data needs a vocabulary of {} but the checkpoint has {}",
            data.vocab_size, ckpt.config.encoder.vocab_size
        )));
    }
    let metrics = evaluate(&ckpt.model, &data.eval)?;
    let report = serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "task": data.name,
        "head": ckpt.config.head.to_string(),
        "seed": ckpt.config.seed,
        "eval_examples": data.eval.len(),
        "eval": metrics,
    });
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    match &a.out {
        Some(p) => {
            fs::write(p, text + "\n")?;
            writeln!(out, "wrote {}", p.display())?;
        }
        None => writeln!(out, "{text}")?,
    }
    Ok(EXIT_OK)
}
