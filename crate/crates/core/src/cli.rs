//! `scvfp` command-line interface.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, RunSpec, Variant};
use crate::data::{generate_synthetic, import_csv, EmbeddingDataset, EmbeddingSequenceFile, SplitName, SyntheticConfig};
use crate::error::{Error, Result};
use crate::gradcheck::check_model;
use crate::model::param_count;
use crate::objective::{default_grid_cols, error_map, metric_psnr};
use crate::reports::{self, CsvTable};
use crate::trainer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Published (MSE, PSNR) pairs shipped with the binary.
pub const BUNDLED_PSNR_TABLE: &str = include_str!("../fixtures/published_mse_psnr.csv");

#[derive(Parser, Debug)]
#[command(name = "scvfp", version, about = "Embedding-space video frame prediction lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic rotating-latent embedding file and print its sha256.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 64)]
        sequences: usize,
        #[arg(long, default_value_t = 128)]
        length: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 2023)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        theta_max: f64,
    },
    /// Convert a CSV of embeddings (one frame per line, blank line between
    /// sequences) into an embedding file.
    Import {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes final.ckpt, best.ckpt, history.csv and runspec.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on a split; also writes error maps and rollout cosines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        report: PathBuf,
        /// Rollout depth for the per-step cosine list (defaults to the run config).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the {scmhsa, mhsa_baseline} × {λ, 0} grid over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [2023u64, 2024, 2025])]
        seeds: Vec<u64>,
    },
    /// Autoregressive rollout from one window; writes a steps×d CSV.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Position of the starting window within the split.
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Finite-difference check of every parameter gradient of the training loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Corrupt the backward pass (negative control).
        #[arg(long)]
        break_backward: bool,
    },
    /// Parameter counts for both attention variants (full-scale config by default).
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check that PSNR = 10·log10(255²/MSE) reproduces a table of published pairs.
    VerifyPsnrTable {
        /// CSV with `mse` and `psnr` columns; the bundled table when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
    },
}

/// Parses `args` (including the program name) and runs the command, writing
/// human-readable output to `out`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn load_spec(path: Option<&Path>) -> Result<RunSpec> {
    match path {
        Some(p) => RunSpec::load(p),
        None => Ok(RunSpec::default()),
    }
}

fn load_dataset(spec: &RunSpec, data: &Path) -> Result<EmbeddingDataset> {
    let file = EmbeddingSequenceFile::read(data)?;
    EmbeddingDataset::build(file, spec.model.seq_len, &spec.data)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::GenData {
            out: path,
            d,
            sequences,
            length,
            sigma,
            seed,
            theta_max,
        } => {
            let file = generate_synthetic(&SyntheticConfig {
                d,
                num_sequences: sequences,
                length,
                thetas: None,
                theta_max,
                sigma,
                seed,
            })?;
            let bytes = file.to_bytes();
            std::fs::write(&path, &bytes)?;
            writeln!(out, "{}  {}", sha256_hex(&bytes), path.display())?;
        }
        Command::Import { csv, out: path } => {
            let file = import_csv(&std::fs::read_to_string(&csv)?)?;
            let bytes = file.to_bytes();
            std::fs::write(&path, &bytes)?;
            writeln!(
                out,
                "imported {} sequences of width {}; sha256 {}",
                file.sequences.len(),
                file.d,
                sha256_hex(&bytes)
            )?;
        }
        Command::Train { config, data, out_dir } => {
            let spec = load_spec(config.as_deref())?;
            let ds = load_dataset(&spec, &data)?;
            std::fs::create_dir_all(&out_dir)?;
            let outcome = trainer::train(&spec, &ds)?;
            let hash = spec.hash_hex();
            outcome.final_checkpoint.write(&out_dir.join("final.ckpt"))?;
            outcome.best_checkpoint.write(&out_dir.join("best.ckpt"))?;
            reports::history_table(&outcome.history).write(&out_dir.join("history.csv"), &hash)?;
            std::fs::write(out_dir.join("runspec.json"), spec.canonical_json())?;
            if let Some(last) = outcome.history.epochs.last() {
                writeln!(
                    out,
                    "epoch {}: train_total {:.6} val_mse {:.6} val_psnr {:.3}",
                    last.epoch, last.train_total, last.val_mse, last.val_psnr
                )?;
            }
            writeln!(out, "runspec sha256 {hash}")?;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            report,
            steps,
        } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let ds = load_dataset(&ck.spec, &data)?;
            let steps = steps.unwrap_or(ck.spec.train.rollout_steps);
            let metrics = trainer::evaluate(&ck.state, &ds, split, steps)?;
            let hash = ck.spec.hash_hex();
            reports::metric_table(split.as_str(), &metrics).write(&report, &hash)?;
            let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            let dir = report.parent().unwrap_or(Path::new("."));
            reports::step_cosine_table(&metrics).write(&dir.join(format!("{stem}_step_cosine.csv")), &hash)?;
            let cols = default_grid_cols(ck.spec.model.d);
            for (i, w) in ds.subset(split).into_iter().take(8).enumerate() {
                let pred = ck.state.predict(&w.inputs)?;
                let map = error_map(w.label.data(), pred.data(), cols);
                std::fs::write(dir.join(format!("{stem}_errmap_{i}.pgm")), map.to_pgm())?;
            }
            writeln!(
                out,
                "{} windows: mse {:.6} psnr {:.3} cosine {:.6}",
                metrics.windows, metrics.mse, metrics.psnr, metrics.mean_cosine
            )?;
        }
        Command::Ablate {
            config,
            data,
            out_dir,
            seeds,
        } => {
            let spec = load_spec(config.as_deref())?;
            let ds = load_dataset(&spec, &data)?;
            std::fs::create_dir_all(&out_dir)?;
            let report = trainer::run_ablation(&spec, &ds, &seeds)?;
            let hash = spec.hash_hex();
            reports::ablation_table(&report).write(&out_dir.join("ablation.csv"), &hash)?;
            reports::curves_table(&report).write(&out_dir.join("curves.csv"), &hash)?;
            for c in &report.cells {
                let (m, s) = c.test_mse();
                writeln!(out, "{:<28} test mse {:.6} ± {:.6}", c.label(), m, s)?;
            }
        }
        Command::Rollout {
            checkpoint,
            data,
            steps,
            out: path,
            split,
            window,
        } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let ds = load_dataset(&ck.spec, &data)?;
            let items = ds.subset(split);
            let w = items.get(window).ok_or_else(|| {
                Error::Data(format!("{} split has {} windows, asked for {window}", split.as_str(), items.len()))
            })?;
            let roll = ck.state.rollout(&w.inputs, steps)?;
            let d = ck.spec.model.d;
            let header: Vec<String> = (0..d).map(|i| format!("e{i}")).collect();
            let mut table = CsvTable::new(&header);
            for k in 0..steps {
                table.push(roll.predictions.row(k).iter());
            }
            table.write(&path, &ck.spec.hash_hex())?;
            writeln!(out, "wrote {steps}×{d} rollout to {}", path.display())?;
        }
        Command::Gradcheck {
            config,
            tolerance,
            seed,
            break_backward,
        } => {
            let base = match config.as_deref() {
                Some(p) => RunSpec::load(p)?.model,
                None => ModelConfig::tiny(),
            };
            let mut worst = 0.0f64;
            for variant in [Variant::Scmhsa, Variant::MhsaBaseline] {
                let cfg = base.clone().with_variant(variant);
                let (names, report) = check_model(&cfg, seed, break_backward)?;
                writeln!(out, "[{}] checked {} skipped {}", variant.as_str(), report.checked, report.skipped)?;
                for t in &report.per_tensor {
                    writeln!(out, "  {:<32} max_rel_error {:.3e}", names[t.tensor], t.max_rel_error)?;
                }
                if let Some(t) = report.worst() {
                    writeln!(
                        out,
                        "  worst: {}[{}] analytic {:.6e} numeric {:.6e} rel {:.3e}",
                        names[t.tensor], t.worst_element, t.analytic, t.numeric, t.max_rel_error
                    )?;
                }
                worst = worst.max(report.max_rel_error);
            }
            let pass = worst < tolerance;
            writeln!(
                out,
                "{}: max relative error {worst:.3e} (tolerance {tolerance:e})",
                if pass { "PASS" } else { "FAIL" }
            )?;
            return Ok(if pass { EXIT_OK } else { EXIT_VERIFY_FAILED });
        }
        Command::Params { config } => {
            let base = match config.as_deref() {
                Some(p) => RunSpec::load(p)?.model,
                None => ModelConfig::full_scale(),
            };
            base.validate()?;
            let sc = param_count(&base.clone().with_variant(Variant::Scmhsa));
            let mh = param_count(&base.clone().with_variant(Variant::MhsaBaseline));
            writeln!(out, "{:<24} {:>14} {:>14}", "component", "scmhsa", "mhsa_baseline")?;
            for ((name, a), (_, b)) in sc.rows().into_iter().zip(mh.rows()) {
                writeln!(out, "{name:<24} {a:>14} {b:>14}")?;
            }
            writeln!(
                out,
                "ratio (scmhsa / baseline): total {:.3}, attention per block {:.4}",
                sc.total as f64 / mh.total as f64,
                sc.attention_per_block as f64 / mh.attention_per_block as f64
            )?;
        }
        Command::VerifyPsnrTable { csv, tolerance } => {
            let text = match &csv {
                Some(p) => std::fs::read_to_string(p)?,
                None => BUNDLED_PSNR_TABLE.to_string(),
            };
            let check = verify_psnr_table(&text)?;
            for r in &check.rows {
                writeln!(out, "{:<40} mse {:>10} psnr {:>6} computed {:.4} dev {:.4}", r.label, r.mse, r.psnr, r.computed, r.deviation)?;
            }
            let pass = check.max_deviation <= tolerance;
            let worst = &check.rows[check.worst];
            writeln!(
                out,
                "{}: {} rows, max deviation {:.4} dB at {} (tolerance {tolerance} dB)",
                if pass { "PASS" } else { "FAIL" },
                check.rows.len(),
                check.max_deviation,
                worst.label
            )?;
            return Ok(if pass { EXIT_OK } else { EXIT_VERIFY_FAILED });
        }
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone)]
pub struct PsnrRow {
    pub label: String,
    pub mse: f64,
    pub psnr: f64,
    pub computed: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone)]
pub struct PsnrTableCheck {
    pub rows: Vec<PsnrRow>,
    pub max_deviation: f64,
    pub worst: usize,
}

/// Compares each row's `psnr` against `10·log10(255²/mse)`. Requires `mse`
/// and `psnr` columns; any other columns are joined into the row label.
pub fn verify_psnr_table(text: &str) -> Result<PsnrTableCheck> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(malformed)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing `{name}` column")))
    };
    let (mi, pi) = (col("mse")?, col("psnr")?);
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(malformed)?;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("row {}: `{s}` is not a number", n + 1)))
        };
        let (mse, psnr) = (num(mi)?, num(pi)?);
        let computed = metric_psnr(mse)?;
        let label = rec
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != mi && *i != pi)
            .map(|(_, s)| s)
            .collect::<Vec<_>>()
            .join("/");
        rows.push(PsnrRow {
            label: if label.is_empty() { format!("row {}", n + 1) } else { label },
            mse,
            psnr,
            computed,
            deviation: (computed - psnr).abs(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("table has no rows".into()));
    }
    let worst = (0..rows.len())
        .max_by(|&a, &b| rows[a].deviation.total_cmp(&rows[b].deviation))
        .expect("non-empty");
    Ok(PsnrTableCheck {
        max_deviation: rows[worst].deviation,
        worst,
        rows,
    })
}

fn malformed(e: csv::Error) -> Error {
    Error::Data(format!("malformed CSV: {e}"))
}
