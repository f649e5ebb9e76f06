//! Command-line surface: training runs, gradient audits, gap reports,
//! embedding dumps and greedy decoding, all against the same deterministic
//! core. Exit codes: 0 success, 1 operational or validation failure, 2
//! usage error (bad flags, unreadable or invalid config).

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use xmodal::checkpoint::{load_checkpoint, save_checkpoint, write_dump};
use xmodal::config::RunConfig;
use xmodal::data::{gen_sample, manifest_lines, split_seeds, SyntheticSample};
use xmodal::error::{Error, Result};
use xmodal::model::{
    checkpoint_with_config, config_from_checkpoint, decode_caption, from_checkpoint, ModelParams,
};
use xmodal::suite::{gradient_suite, SUITE_LOSSES};
use xmodal::tensor::Tensor;
use xmodal::train::{gap_on_split, pooled_split, prompt_ids, train};

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Cross-modal alignment lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config file; writes checkpoint and artifacts to out_dir.
    Train {
        /// Path to a `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Disable one component: tsa, cs, cma or tg.
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Finite-difference audit of every loss surface and the adapter stack.
    Gradcheck {
        /// Audit a single entry (cs_global, cs_token, nce, cma, tg, dec,
        /// total or adapter).
        #[arg(long)]
        module: Option<String>,
    },
    /// Modality-gap metrics of a trained checkpoint over a data split.
    GapReport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data split: train or val.
        #[arg(long, default_value = "val")]
        split: String,
        /// Report destination file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pooled audio and text embeddings of a split as one binary tensor.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data split: train or val.
        #[arg(long, default_value = "val")]
        split: String,
        /// Dump destination file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy caption for the synthetic scene of one seed.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene seed.
        #[arg(long)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                // A config that cannot be read or parsed is a usage error.
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    };
    ExitCode::from(code)
}

fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Train { config, ablate } => cmd_train(&config, ablate.as_deref()),
        Cmd::Gradcheck { module } => cmd_gradcheck(module.as_deref()),
        Cmd::GapReport { checkpoint, split, out } => cmd_gap_report(&checkpoint, &split, &out),
        Cmd::DumpEmbeddings { checkpoint, split, out } => cmd_dump(&checkpoint, &split, &out),
        Cmd::Decode { checkpoint, seed } => cmd_decode(&checkpoint, seed),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

// ── train ─────────────────────────────────────────────────────────────────────

fn cmd_train(config: &Path, ablate: Option<&str>) -> Result<u8> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(which) = ablate {
        cfg.ablate(which)?;
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;

    let outcome = train(&cfg, |line| println!("{line}"))?;

    let ck = checkpoint_with_config(&outcome.params, outcome.steps, &cfg);
    save_checkpoint(&out_dir.join("checkpoint.cmab"), &ck)?;
    write_text(&out_dir.join("config.cfg"), &cfg.canonical_string())?;
    write_text(&out_dir.join("dictionary.tsv"), &outcome.dict.to_tsv())?;
    for split in ["train", "val"] {
        let samples = load_split(&cfg, split)?;
        write_text(
            &out_dir.join(format!("{split}_manifest.tsv")),
            &manifest_lines(&samples),
        )?;
    }

    println!(
        "done steps={} initial_l2={:.6} final_l2={:.6} final_cos={} val_acc={:.4} out={}",
        outcome.steps,
        outcome.initial_gap.l2_mean,
        outcome.final_gap.l2_mean,
        fmt_cos(outcome.final_gap.cos_mean),
        outcome.final_val_accuracy,
        out_dir.display(),
    );
    Ok(0)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn fmt_cos(c: Option<f64>) -> String {
    match c {
        Some(v) => format!("{v:.6}"),
        None => "undefined".to_string(),
    }
}

// ── gradcheck ─────────────────────────────────────────────────────────────────

fn cmd_gradcheck(module: Option<&str>) -> Result<u8> {
    if let Some(m) = module {
        if !SUITE_LOSSES.contains(&m) {
            return Err(Error::Config(format!(
                "unknown module {m:?} (expected one of {})",
                SUITE_LOSSES.join(", ")
            )));
        }
    }
    let entries = gradient_suite(20260814, 3, module)?;
    println!("{:<10} {:>12} {:>7}  status", "loss", "max_rel_err", "probes");
    let mut all_ok = true;
    for e in &entries {
        println!(
            "{:<10} {:>12.3e} {:>7}  {}",
            e.name,
            e.max_rel_err,
            e.probes,
            if e.ok { "ok" } else { "FAIL" }
        );
        all_ok &= e.ok;
    }
    if all_ok {
        Ok(0)
    } else {
        eprintln!("gradient check failed");
        Ok(1)
    }
}

// ── checkpoint-driven commands ────────────────────────────────────────────────

fn load_model(path: &Path) -> Result<(RunConfig, ModelParams<Tensor>)> {
    let ck = load_checkpoint(path)?;
    let cfg = config_from_checkpoint(&ck)?;
    let model = from_checkpoint(&cfg, &ck)?;
    Ok((cfg, model))
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<SyntheticSample>> {
    let size = match split {
        "train" => cfg.train_size,
        "val" => cfg.val_size,
        other => {
            return Err(Error::Config(format!(
                "unknown split {other:?} (expected train or val)"
            )))
        }
    };
    let dict = xmodal::data::build_dictionary(cfg.k)?;
    split_seeds(cfg.seed, split, size)
        .into_iter()
        .map(|s| gen_sample(s, cfg.n_a, cfg.d, &dict, cfg.data_noise))
        .collect()
}

fn cmd_gap_report(checkpoint: &Path, split: &str, out: &Path) -> Result<u8> {
    let (cfg, model) = load_model(checkpoint)?;
    let samples = load_split(&cfg, split)?;
    let gap = gap_on_split(&model, &samples, &cfg)?;
    let report = format!(
        "l2_mean={}\ncos_mean={}\n",
        gap.l2_mean,
        match gap.cos_mean {
            Some(v) => v.to_string(),
            None => "undefined".to_string(),
        }
    );
    write_text(out, &report)?;
    print!("{report}");
    Ok(0)
}

fn cmd_dump(checkpoint: &Path, split: &str, out: &Path) -> Result<u8> {
    let (cfg, model) = load_model(checkpoint)?;
    let samples = load_split(&cfg, split)?;
    let (a, t) = pooled_split(&model, &samples, &cfg)?;
    let b = a.rows();
    let mut data = Vec::with_capacity(2 * b * cfg.d_llm);
    data.extend_from_slice(a.data());
    data.extend_from_slice(t.data());
    let stacked = Tensor::new(vec![2 * b, cfg.d_llm], data)?;
    write_dump(out, &stacked)?;
    println!("wrote {} ({} x {})", out.display(), 2 * b, cfg.d_llm);
    Ok(0)
}

fn cmd_decode(checkpoint: &Path, seed: u64) -> Result<u8> {
    let (cfg, model) = load_model(checkpoint)?;
    let dict = xmodal::data::build_dictionary(cfg.k)?;
    let sample = gen_sample(seed, cfg.n_a, cfg.d, &dict, cfg.data_noise)?;
    let ids = decode_caption(&model, &sample.h_a, &prompt_ids(&dict), &cfg)?;
    let words: Vec<&str> = ids
        .iter()
        .filter(|&&id| id != xmodal::decoder::EOS)
        .map(|&id| dict.surface(id))
        .collect::<Result<_>>()?;
    println!("{}", words.join(" "));
    Ok(0)
}
