//! Command-line front end.
//!
//! ```text
//! blockformer <command> [--config FILE] [--key value]...
//! ```
//!
//! Settings come from the defaults, then the config file, then the
//! command-line overrides; the effective configuration is echoed first.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::decoding::{corpus_cer, recognize, DecodeConfig};
use crate::diagnostics::{by_module, model_gradient_check};
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, load_manifest, synth_dataset, RunConfig, SynthConfig};
use crate::model::{ensemble_parameter_delta, Blockformer};
use crate::training::train_loop;

pub const USAGE: &str = "\
usage: blockformer <command> [--config FILE] [--key value]...

commands:
  train        train on train_manifest, select on dev_manifest, write to out_dir
  decode       two-pass decode of manifest with checkpoint, write output
  eval-cer     corpus CER of a hypothesis file (--hyp FILE) against manifest
  grad-check   compare every parameter gradient with finite differences
  param-count  total parameters and the ensemble's share
  synth-data   write a synthetic corpus (--out DIR, --n-utts, --vocab-size,
               --feat-dim, --min-tokens, --max-tokens, --seed)

Any configuration key may be given as --key value (dashes or underscores).
";

/// Maximum accepted gradient-check relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

const GRAD_CHECK_STEP: f64 = 1e-5;

struct Args {
    command: String,
    config: Option<PathBuf>,
    flags: Vec<(String, String)>,
}

fn usage_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_args(args: &[String]) -> Result<Args> {
    let command = args.first().ok_or_else(|| usage_error("missing command"))?.clone();
    let mut config = None;
    let mut flags = Vec::new();
    let mut rest = args[1..].iter();
    while let Some(arg) = rest.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| usage_error(format!("expected --key, got {arg:?}")))?
            .replace('-', "_");
        let value = rest
            .next()
            .ok_or_else(|| usage_error(format!("--{key} needs a value")))?
            .clone();
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            flags.push((key, value));
        }
    }
    Ok(Args {
        command,
        config,
        flags,
    })
}

/// Builds the effective configuration, pulling out the command-specific
/// `extra` flags instead of treating them as configuration keys.
fn effective_config(args: &Args, extra: &[&str]) -> Result<(RunConfig, HashMap<String, String>)> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut extras = HashMap::new();
    for (k, v) in &args.flags {
        if extra.contains(&k.as_str()) {
            extras.insert(k.clone(), v.clone());
        } else {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok((cfg, extras))
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| usage_error(format!("{key} must be set")))
}

fn echo(out: &mut dyn Write, cfg: &RunConfig) -> Result<()> {
    write_out(out, &format!("# effective configuration\n{}", cfg.to_text()))
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn load_model(cfg: &RunConfig) -> Result<Blockformer> {
    let mut model = Blockformer::new(cfg.model.clone(), cfg.train.seed)?;
    if let Some(path) = &cfg.checkpoint {
        model.params.load_named(&load_checkpoint(path)?)?;
    }
    Ok(model)
}

fn cmd_train(args: &Args, out: &mut dyn Write) -> Result<i32> {
    let (cfg, _) = effective_config(args, &[])?;
    echo(out, &cfg)?;
    let v = cfg.model.vocab_size;
    let train = load_manifest(require(&cfg.train_manifest, "train_manifest")?, v)?.load_utterances()?;
    let dev = load_manifest(require(&cfg.dev_manifest, "dev_manifest")?, v)?.load_utterances()?;
    let mut model = load_model(&cfg)?;
    let report = train_loop(&mut model, &train, &dev, &cfg.train, &cfg.loss, &cfg.decode)?;
    let mut log = String::new();
    for s in &report.steps {
        log.push_str(&format!("{s}\n"));
    }
    for e in &report.epochs {
        log.push_str(&format!("{e}\n"));
    }
    if let Some(dir) = &cfg.train.out_dir {
        let path = dir.join("train.log");
        fs::write(&path, &log).map_err(|e| Error::io(&path, e))?;
    }
    write_out(out, &log)?;
    let epochs: Vec<String> = report.best.iter().map(|c| c.epoch.to_string()).collect();
    write_out(out, &format!("averaged epochs {}\n", epochs.join(",")))?;
    Ok(0)
}

/// One `utt_id <tab> tokens <tab> score` line per utterance, in manifest order.
pub fn decode_lines(model: &Blockformer, manifest: &crate::io::Manifest, cfg: &DecodeConfig) -> Result<String> {
    let mut text = String::new();
    for entry in &manifest.entries {
        let hyp = recognize(model, &manifest.load_features(entry)?, cfg)?;
        let tokens: Vec<String> = hyp.tokens.iter().map(usize::to_string).collect();
        text.push_str(&format!("{}\t{}\t{:.6}\n", entry.utt_id, tokens.join(" "), hyp.combined_score));
    }
    Ok(text)
}

fn cmd_decode(args: &Args, out: &mut dyn Write) -> Result<i32> {
    let (cfg, _) = effective_config(args, &[])?;
    echo(out, &cfg)?;
    require(&cfg.checkpoint, "checkpoint")?;
    let manifest = load_manifest(require(&cfg.manifest, "manifest")?, cfg.model.vocab_size)?;
    let model = load_model(&cfg)?;
    let text = decode_lines(&model, &manifest, &cfg.decode)?;
    match &cfg.output {
        Some(path) => fs::write(path, &text).map_err(|e| Error::io(path, e))?,
        None => write_out(out, &text)?,
    }
    Ok(0)
}

/// Parses decode output into `utt_id → tokens`.
pub fn parse_hypotheses(text: &str, origin: &Path) -> Result<HashMap<String, Vec<usize>>> {
    let mut hyps = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let tokens = fields
            .next()
            .ok_or_else(|| bad("expected utt_id<TAB>tokens<TAB>score".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| bad(format!("bad token {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if hyps.insert(id.clone(), tokens).is_some() {
            return Err(bad(format!("duplicate utterance {id}")));
        }
    }
    Ok(hyps)
}

fn cmd_eval_cer(args: &Args, out: &mut dyn Write) -> Result<i32> {
    let (cfg, extra) = effective_config(args, &["hyp"])?;
    let hyp_path = PathBuf::from(extra.get("hyp").ok_or_else(|| usage_error("--hyp FILE is required"))?);
    let manifest = load_manifest(require(&cfg.manifest, "manifest")?, cfg.model.vocab_size)?;
    let text = fs::read_to_string(&hyp_path).map_err(|e| Error::io(&hyp_path, e))?;
    let mut hyps = parse_hypotheses(&text, &hyp_path)?;
    let pairs = manifest
        .entries
        .iter()
        .map(|e| {
            let h = hyps
                .remove(&e.utt_id)
                .ok_or_else(|| Error::Invalid(format!("no hypothesis for {}", e.utt_id)))?;
            Ok((h, e.tokens.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let ref_tokens: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    let cer = corpus_cer(&pairs);
    write_out(
        out,
        &format!(
            "utterances {}\nref_tokens {}\ncer {:.6}\ncer_percent {:.2}\n",
            pairs.len(),
            ref_tokens,
            cer,
            cer * 100.0
        ),
    )?;
    Ok(0)
}

fn cmd_grad_check(args: &Args, out: &mut dyn Write) -> Result<i32> {
    let (cfg, _) = effective_config(args, &[])?;
    echo(out, &cfg)?;
    let report = model_gradient_check(&cfg.model, &cfg.loss, [12, 10], GRAD_CHECK_STEP, cfg.train.seed)?;
    let mut text = format!(
        "# batch seed {} relu margin {:.3e}\n{:<48} {:>8} {:>12}\n",
        report.batch_seed, report.relu_margin, "module", "params", "max_rel_err"
    );
    let rows = by_module(&report.params);
    for (module, n, err) in &rows {
        text.push_str(&format!("{module:<48} {n:>8} {err:>12.3e}\n"));
    }
    let worst = report.max_rel_err();
    let pass = worst < GRAD_CHECK_TOLERANCE;
    text.push_str(&format!(
        "max_rel_err {worst:.3e} tolerance {GRAD_CHECK_TOLERANCE:e} {}\n",
        if pass { "PASS" } else { "FAIL" }
    ));
    write_out(out, &text)?;
    Ok(if pass { 0 } else { 1 })
}

fn cmd_param_count(args: &Args, out: &mut dyn Write) -> Result<i32> {
    let (cfg, _) = effective_config(args, &[])?;
    echo(out, &cfg)?;
    let model = Blockformer::declare(cfg.model.clone())?;
    let delta = ensemble_parameter_delta(&cfg.model)?;
    let (enc, dec) = model.participating_blocks();
    write_out(
        out,
        &format!(
            "total {}\nensemble_delta {}\nencoder_ensemble_blocks {}\ndecoder_ensemble_blocks {}\n",
            model.count_parameters(),
            delta,
            enc,
            dec
        ),
    )?;
    Ok(0)
}

fn cmd_synth_data(args: &Args, out: &mut dyn Write) -> Result<i32> {
    if args.config.is_some() {
        return Err(usage_error("synth-data takes flags only"));
    }
    let mut cfg = SynthConfig::default();
    let mut dir = None;
    for (k, v) in &args.flags {
        let num = || -> Result<usize> { v.parse().map_err(|_| usage_error(format!("bad value {v:?} for {k}"))) };
        match k.as_str() {
            "out" => dir = Some(PathBuf::from(v)),
            "n_utts" => cfg.n_utts = num()?,
            "vocab_size" => cfg.vocab_size = num()?,
            "feat_dim" => cfg.feat_dim = num()?,
            "min_tokens" => cfg.tokens_per_utt.0 = num()?,
            "max_tokens" => cfg.tokens_per_utt.1 = num()?,
            "seed" => cfg.seed = num()? as u64,
            other => return Err(usage_error(format!("unknown synth-data flag --{other}"))),
        }
    }
    let dir = dir.ok_or_else(|| usage_error("--out DIR is required"))?;
    let manifest = synth_dataset(&dir, &cfg)?;
    write_out(
        out,
        &format!(
            "wrote {} utterances to {}\n",
            manifest.entries.len(),
            dir.join("manifest.jsonl").display()
        ),
    )?;
    Ok(0)
}

/// Runs a command line (without the program name) and returns the exit
/// code: 0 on success, 1 on failure, 2 on bad usage.
pub fn run(args: &[String], out: &mut dyn Write) -> i32 {
    let parsed = match parse_args(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}\n\n{USAGE}");
            return 2;
        }
    };
    let result = match parsed.command.as_str() {
        "train" => cmd_train(&parsed, out),
        "decode" => cmd_decode(&parsed, out),
        "eval-cer" => cmd_eval_cer(&parsed, out),
        "grad-check" => cmd_grad_check(&parsed, out),
        "param-count" => cmd_param_count(&parsed, out),
        "synth-data" => cmd_synth_data(&parsed, out),
        "help" | "-h" | "--help" => {
            let _ = out.write_all(USAGE.as_bytes());
            return 0;
        }
        other => {
            eprintln!("error: unknown command {other:?}\n\n{USAGE}");
            return 2;
        }
    };
    match result {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}\n\n{USAGE}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
