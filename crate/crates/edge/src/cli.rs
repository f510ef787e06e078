//! The `cactus` command line.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cactus_core::lime::{self, LimeConfig};
use cactus_core::pipeline::{self, SamplePipeline};
use cactus_core::quant::{self, Calibration, QuantMode};
use cactus_core::zoo::{Architecture, INPUT_SIDE};
use cactus_core::ModelGraph;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{self, WallClock};
use crate::error::{EdgeError, Result};
use crate::format;
use crate::io;
use crate::report::{EvalSummary, InitReport, InspectReport, PredictionReport, QuantizeReport, SaliencyReport};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_REJECTED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "cactus", version, about = "Offline cactus health screening: models, quantization, explanations")]
pub struct Cli {
    /// Output format for the report printed on stdout.
    #[arg(long, value_enum, default_value_t = OutputFormat::Text, global = true)]
    pub format: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    F16,
    I8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CalibrationArg {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a model with seeded random weights and save it.
    InitModel {
        /// cnn-lite, mobilevit-xs or channel-mean.
        #[arg(long, default_value = "cnn-lite")]
        arch: String,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Square input resolution.
        #[arg(long, default_value_t = INPUT_SIDE)]
        input_size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify one image, escalating to a precise model below the threshold.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        precise_model: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        tau: f32,
    },
    /// Post-training quantization of an f32 model file.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = CalibrationArg::Symmetric)]
        calibration: CalibrationArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explain a prediction with segment-level saliency weights.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Class to explain; defaults to the predicted class.
        #[arg(long = "class")]
        class: Option<String>,
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long, default_value_t = 8)]
        cols: usize,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        ridge: f64,
        #[arg(long, default_value_t = 0.25)]
        kernel_width: f64,
        #[arg(long, default_value_t = 0.5)]
        baseline: f32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Saliency JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional PGM heatmap path.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Score a labeled manifest (`path<TAB>label` per line).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        precise_model: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        tau: f32,
    },
    /// Single-thread latency of one forward pass.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Print the header and tensor directory of a model file.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

/// Runs one command, writing its report to `out`. Returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<u8> {
    let fmt = cli.format;
    match cli.command {
        Command::InitModel { arch, classes, input_size, seed, out: path } => {
            let a = Architecture::from_id(&arch)?;
            let model = a.build_with_input(classes, seed, [1, input_size, input_size, 3])?;
            let bytes = format::save_model(&model, &path)?;
            let r = InitReport {
                arch: a.id().into(),
                classes,
                seed,
                params: model.count_params(),
                file_bytes: bytes,
                path: path.display().to_string(),
            };
            emit(out, fmt, &r, || {
                format!(
                    "wrote {} ({} classes, seed {}): {} params, {} bytes\n",
                    r.path, r.classes, r.seed, r.params, r.file_bytes
                )
            })?;
            Ok(EXIT_OK)
        }
        Command::Classify { model, precise_model, image, tau } => {
            let fast = load(&model)?;
            let precise = precise_model.as_deref().map(load).transpose()?;
            if let Some(p) = &precise {
                if p.input_shape() != fast.input_shape() {
                    return Err(EdgeError::Usage("fast and precise models take different input shapes".into()));
                }
            }
            let input = io::load_input(&image, fast.input_shape())?;
            let pred = pipeline::classify_tiered(&fast, precise.as_ref(), &input, tau, &WallClock::new())?;
            let r = PredictionReport::new(&pred, fast.class_labels());
            emit(out, fmt, &r, || {
                let mut s = format!(
                    "{} (confidence {:.4}, tier {}, {:.1} ms){}\n",
                    r.label,
                    r.confidence,
                    r.tier,
                    r.latency_ms,
                    if r.rejected { " -- rejected: not a cactus" } else { "" }
                );
                for p in &r.probabilities {
                    let _ = writeln!(s, "  {:<12} {:.4}", p.label, p.probability);
                }
                s
            })?;
            Ok(if pred.rejected { EXIT_REJECTED } else { EXIT_OK })
        }
        Command::Quantize { model, mode, calibration, out: path } => {
            let file_in = file_len(&model)?;
            let m = load(&model)?;
            let mode = match mode {
                ModeArg::F16 => QuantMode::F16,
                ModeArg::I8 => QuantMode::I8Affine,
            };
            let calibration = match calibration {
                CalibrationArg::Symmetric => Calibration::Symmetric,
                CalibrationArg::Asymmetric => Calibration::Asymmetric,
            };
            let (q, report) = quant::quantize_model(&m, mode, calibration)?;
            let file_out = format::save_model(&q, &path)?;
            let r = QuantizeReport::new(&report, file_in, file_out);
            emit(out, fmt, &r, || {
                let mut s = format!(
                    "{}: weights {} -> {} bytes ({:.2}x), file {} -> {} bytes\n",
                    r.mode,
                    r.weight_bytes_in,
                    r.weight_bytes_out,
                    r.compression_ratio,
                    r.file_bytes_in,
                    r.file_bytes_out
                );
                for t in &r.tensors {
                    let _ = write!(s, "  {:<40} {:<4} max|err| {:.3e}", t.name, t.dtype, t.max_abs_error);
                    if let (Some(sc), Some(z)) = (t.scale, t.zero_point) {
                        let _ = write!(
                            s,
                            "  S={sc:.6e} Z={z} half-step {}",
                            if t.within_half_step == Some(true) { "ok" } else { "VIOLATED" }
                        );
                    }
                    s.push('\n');
                }
                s
            })?;
            Ok(EXIT_OK)
        }
        Command::Explain {
            model,
            image,
            class,
            rows,
            cols,
            samples,
            ridge,
            kernel_width,
            baseline,
            seed,
            out: path,
            heatmap,
        } => {
            let m = load(&model)?;
            let input = io::load_input(&image, m.input_shape())?;
            let labels = m.class_labels().to_vec();
            let target = match class {
                Some(name) => pipeline::find_label(&labels, &name).ok_or_else(|| {
                    EdgeError::Usage(format!("unknown class `{name}`; model classes are {}", labels.join(", ")))
                })?,
                None => {
                    let probs = pipeline::Classifier::predict_proba(&m, &input)?;
                    pipeline::argmax(&probs).0
                }
            };
            let cfg = LimeConfig { rows, cols, samples, ridge_lambda: ridge, kernel_width, baseline, seed };
            let map = lime::explain(&m, &input, target, &cfg)?;
            let r = SaliencyReport::new(&map, &labels, &cfg);
            if let Some(p) = &path {
                let json = serde_json::to_string_pretty(&r).expect("report serializes");
                fs::write(p, json + "\n").map_err(|source| EdgeError::Io { path: p.clone(), source })?;
            }
            if let Some(p) = &heatmap {
                crate::report::write_heatmap(&map, p)?;
            }
            emit(out, fmt, &r, || {
                let mut s = format!(
                    "saliency for `{}` ({}x{} grid, {} samples, R^2 {:.4}, intercept {:.4})\n",
                    r.target_class, r.rows, r.cols, r.samples, r.fidelity_r2, r.intercept
                );
                for row in r.segments.chunks(r.cols) {
                    let cells: Vec<String> = row.iter().map(|seg| format!("{:+.3}", seg.weight)).collect();
                    let _ = writeln!(s, "  {}", cells.join(" "));
                }
                s
            })?;
            Ok(EXIT_OK)
        }
        Command::Eval { model, precise_model, manifest, tau } => {
            let fast = load(&model)?;
            let precise = precise_model.as_deref().map(load).transpose()?;
            if let Some(p) = &precise {
                if p.input_shape() != fast.input_shape() {
                    return Err(EdgeError::Usage("fast and precise models take different input shapes".into()));
                }
            }
            let entries = io::read_manifest(&manifest)?;
            io::check_entries(&entries)?;
            let shape = fast.input_shape();
            let mut load_err = None;
            let samples = entries.iter().map_while(|e| match io::load_input(&e.path, shape) {
                Ok(t) => Some(Ok((t, e.label.clone()))),
                Err(err) => {
                    load_err = Some(err);
                    None
                }
            });
            let clock = WallClock::new();
            let eval = SamplePipeline::evaluation();
            let result = pipeline::evaluate(fast.class_labels(), samples, &eval, |x| {
                pipeline::classify_tiered(&fast, precise.as_ref(), x, tau, &clock)
            });
            if let Some(err) = load_err {
                return Err(err);
            }
            let report = result?;
            let r = EvalSummary::new(&report.matrix, report.escalated);
            emit(out, fmt, &r, || {
                let mut s = format!(
                    "samples {}  accuracy {:.4}  macro-F1 {:.4}  escalated {} ({:.1}%)\n",
                    r.samples,
                    r.accuracy,
                    r.macro_f1,
                    r.escalated,
                    100.0 * r.escalation_rate
                );
                let _ = writeln!(s, "confusion (rows true, cols predicted): {}", r.labels.join(" "));
                for (label, row) in r.labels.iter().zip(&r.confusion) {
                    let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
                    let _ = writeln!(s, "  {label:<12}{}", cells.join(""));
                }
                for c in &r.per_class {
                    let _ = writeln!(
                        s,
                        "  {:<12} precision {:.4} recall {:.4} F1 {:.4}",
                        c.label, c.precision, c.recall, c.f1
                    );
                }
                s
            })?;
            Ok(EXIT_OK)
        }
        Command::Bench { model, iters, warmup } => {
            let m = load(&model)?;
            let r = bench::bench_latency(&m, warmup, iters)?;
            emit(out, fmt, &r, || {
                format!(
                    "{} {:?}: mean {:.2} ms, p50 {:.2} ms, p95 {:.2} ms over {} iters ({} warmup); {} params, {} weight bytes\n",
                    r.arch, r.input_shape, r.mean_ms, r.p50_ms, r.p95_ms, r.iters, r.warmup, r.params, r.model_bytes
                )
            })?;
            Ok(EXIT_OK)
        }
        Command::Inspect { model } => {
            let i = format::inspect(&model)?;
            emit(out, fmt, &InspectReport::new(&i), || i.to_string())?;
            Ok(EXIT_OK)
        }
    }
}

fn load(path: &Path) -> Result<ModelGraph> {
    format::load_model(path).map_err(|e| match e {
        format::FormatError::Io(source) => EdgeError::Io { path: path.to_path_buf(), source },
        other => other.into(),
    })
}

fn file_len(path: &Path) -> Result<u64> {
    fs::metadata(path).map(|m| m.len()).map_err(|source| EdgeError::Io { path: path.to_path_buf(), source })
}

fn emit<T: Serialize>(out: &mut dyn Write, fmt: OutputFormat, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    let s = match fmt {
        OutputFormat::Json => serde_json::to_string_pretty(value).expect("report serializes") + "\n",
        OutputFormat::Text => text(),
    };
    out.write_all(s.as_bytes()).map_err(|source| EdgeError::Io { path: PathBuf::from("<stdout>"), source })
}
