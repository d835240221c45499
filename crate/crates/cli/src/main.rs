//! Command-line front end: dataset generation, predictor training, anchor
//! and predictor-guided encoding, and rate/quality comparison.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qtmt_core::codec::{Plane, ProxyCodecConfig};
use qtmt_core::data::{
    build_database, ctu_planes, load_frame, load_split, parse_manifest, scan_database,
    DatasetConfig, ManifestEntry, Split,
};
use qtmt_core::eval::{
    bd_psnr, bd_rate, delta_t, encode_anchor, encode_fast, read_points_csv, write_reports_csv,
    EncodeReport,
};
use qtmt_core::net::{ModelParams, ThresholdSet};
use qtmt_core::par::Parallelism;
use qtmt_core::qtmt::{enumerate_reachable_cus, size_mode_set, PartitionConfig};
use qtmt_core::synth::synth_corpus;
use qtmt_core::train::{train, write_trace_csv, TrainConfig};

#[derive(Parser)]
#[command(
    name = "qtmt",
    version,
    about = "Block-partition search with a learned pruning predictor"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EncodeMode {
    /// Exhaustive rate-distortion search.
    Anchor,
    /// Predictor-guided search over filtered candidate modes.
    Fast,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a corpus of synthetic grayscale images plus a manifest.
    Synth {
        /// Output directory for images and manifest.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        height: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },

    /// Label every CTU by exhaustive search and write training shards.
    #[command(name = "gen-dataset")]
    GenDataset {
        /// Manifest of images: `path width height frames split` per line.
        #[arg(long, conflicts_with = "synth")]
        manifest: Option<PathBuf>,
        /// Generate this many synthetic images instead of reading a manifest.
        #[arg(long)]
        synth: Option<usize>,
        /// Side length of generated synthetic images.
        #[arg(long, default_value_t = 512)]
        synth_size: usize,
        /// Seed for synthetic image generation.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output database directory.
        #[arg(long)]
        out: PathBuf,
        /// Quantization parameters to label at.
        #[arg(long, value_delimiter = ',', default_values_t = vec![22u8, 27, 32, 37])]
        qps: Vec<u8>,
        /// Disable the thread pool.
        #[arg(long)]
        sequential: bool,
    },

    /// Train the split predictor on a shard database.
    Train {
        /// Database directory produced by gen-dataset.
        #[arg(long)]
        data: PathBuf,
        /// Where to write the trained model.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        iterations: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Base learning rate.
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// Exponent of the inverse-frequency class weights.
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        /// Weight of the cost penalty in the loss.
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Score the cost penalty with recorded labels instead of predictions.
        #[arg(long)]
        rd_from_labels: bool,
        /// Seed for parameter init and batch sampling.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Optional CSV of the loss trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },

    /// Encode images at one or more qps and write a report CSV.
    Encode {
        /// A .pgm image or a manifest listing several.
        #[arg(long)]
        input: PathBuf,
        /// With a manifest input, keep only entries of this split.
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, value_enum, default_value_t = EncodeMode::Anchor)]
        mode: EncodeMode,
        /// Trained model, required for --mode fast.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Threshold preset: faster, fast or medium.
        #[arg(long, default_value = "faster")]
        preset: String,
        /// Five comma-separated per-stage thresholds overriding the preset.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        /// Quantization parameters, one report row each.
        #[arg(long = "qp", value_delimiter = ',', default_values_t = vec![32u8])]
        qps: Vec<u8>,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Re-run the timed region this many times; the fastest counts.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Run the predictor in f64 instead of f32.
        #[arg(long)]
        full_precision: bool,
        #[arg(long)]
        sequential: bool,
    },

    /// Compare two encode reports: rate and quality deltas, timing delta.
    Bd {
        /// Report CSV of the reference configuration.
        #[arg(long)]
        anchor: PathBuf,
        /// Report CSV of the configuration under test.
        #[arg(long)]
        test: PathBuf,
    },

    /// Walk the split rules and print reachable block statistics.
    Enumerate {
        /// Named rule set: `default` (all six modes, 128 CTU) or
        /// `quad-only-64` (quad splits only, 64 CTU). Overrides the flags.
        #[arg(long, conflicts_with_all = ["ctu_size", "min_cu_side", "min_qt_leaf", "max_mt_depth", "max_mt_size", "no_forced_root"])]
        preset: Option<String>,
        #[arg(long, default_value_t = 128)]
        ctu_size: u32,
        #[arg(long, default_value_t = 4)]
        min_cu_side: u32,
        #[arg(long, default_value_t = 8)]
        min_qt_leaf: u32,
        #[arg(long, default_value_t = 4)]
        max_mt_depth: u8,
        #[arg(long, default_value_t = 32)]
        max_mt_size: u32,
        /// Let the root choose freely instead of forcing a quad split.
        #[arg(long)]
        no_forced_root: bool,
    },

    /// Summarize a shard database: counts and label histograms.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Write the summary CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parallelism(sequential: bool) -> Parallelism {
    if sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Auto
    }
}

/// Loads every frame of every manifest entry (or one bare .pgm) and crops
/// them to CTU tiles.
fn load_tiles(input: &Path, split: Option<Split>, ctu_size: usize) -> Result<Vec<Plane>> {
    let entries: Vec<ManifestEntry> = if input.extension().is_some_and(|e| e == "pgm") {
        let img = qtmt_core::data::read_pgm(input)
            .with_context(|| format!("reading {}", input.display()))?;
        let tiles = ctu_planes(&img, ctu_size)?;
        if tiles.is_empty() {
            bail!("{} is smaller than one {ctu_size}-pixel CTU", input.display());
        }
        return Ok(tiles);
    } else {
        let text = std::fs::read_to_string(input)
            .with_context(|| format!("reading {}", input.display()))?;
        let base = input.parent().unwrap_or(Path::new("."));
        parse_manifest(&text, base)?
    };
    let mut tiles = Vec::new();
    for e in &entries {
        if split.is_some_and(|s| s != e.split) {
            continue;
        }
        for frame in 0..e.frames {
            let img = load_frame(e, frame)?;
            tiles.extend(ctu_planes(&img, ctu_size)?);
        }
    }
    if tiles.is_empty() {
        bail!("no CTUs selected from {}", input.display());
    }
    Ok(tiles)
}

fn cmd_synth(out: &Path, count: usize, w: usize, h: usize, seed: u64) -> Result<()> {
    let manifest = synth_corpus(out, count, w, h, seed)?;
    println!("images: {count}");
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn cmd_gen_dataset(
    manifest: Option<PathBuf>,
    synth: Option<usize>,
    synth_size: usize,
    seed: u64,
    out: &Path,
    qps: Vec<u8>,
    sequential: bool,
) -> Result<()> {
    let manifest = match (manifest, synth) {
        (Some(m), None) => m,
        (None, Some(n)) => {
            let dir = out.join("images");
            synth_corpus(&dir, n, synth_size, synth_size, seed)?
        }
        _ => bail!("pass exactly one of --manifest or --synth"),
    };
    let text = std::fs::read_to_string(&manifest)
        .with_context(|| format!("reading {}", manifest.display()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, base)?;
    let cfg = DatasetConfig {
        qps,
        parallelism: parallelism(sequential),
        ..DatasetConfig::default()
    };
    let summary = build_database(&entries, out, &cfg)?;
    let csv_path = out.join("summary.csv");
    std::fs::write(&csv_path, summary.to_csv())?;
    println!("samples: {}", summary.total_samples());
    println!("summary: {}", csv_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    iterations: usize,
    batch_size: usize,
    lr: f64,
    alpha: f64,
    beta: f64,
    rd_from_labels: bool,
    seed: u64,
    trace: Option<PathBuf>,
    sequential: bool,
) -> Result<()> {
    let samples = load_split(data, Split::Train)?;
    if samples.is_empty() {
        bail!("no training shards under {}", data.display());
    }
    let n: usize = samples.values().map(Vec::len).sum();
    eprintln!("loaded {n} samples across {} shapes", samples.len());

    let pcfg = PartitionConfig::vvc_intra();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::init(&pcfg, &mut rng)?;
    let cfg = TrainConfig {
        iterations_total: iterations,
        batch_size,
        lr_base: lr,
        alpha,
        beta,
        rd_from_labels,
        seed,
        parallelism: parallelism(sequential),
        ..TrainConfig::default()
    };
    let rows = train(&mut model, &samples, &cfg)?;
    model.save(out)?;
    if let Some(path) = trace {
        write_trace_csv(&path, &rows)?;
    }
    if let Some(last) = rows.last() {
        println!("final: iteration {} shape {} loss {:.6}", last.iteration, last.shape, last.total);
    }
    println!("model: {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_encode(
    input: &Path,
    split: Option<Split>,
    mode: EncodeMode,
    model: Option<PathBuf>,
    preset: &str,
    taus: Option<Vec<f64>>,
    qps: Vec<u8>,
    out: &Path,
    repeats: usize,
    full_precision: bool,
    sequential: bool,
) -> Result<()> {
    let pcfg = PartitionConfig::vvc_intra();
    let ccfg = ProxyCodecConfig::default();
    let par = parallelism(sequential);
    let tiles = load_tiles(input, split, pcfg.ctu_size as usize)?;
    eprintln!("{} CTUs loaded", tiles.len());

    let mut reports: Vec<EncodeReport> = Vec::new();
    match mode {
        EncodeMode::Anchor => {
            for &qp in &qps {
                reports.push(encode_anchor(&tiles, qp, &pcfg, &ccfg, par, repeats)?);
            }
        }
        EncodeMode::Fast => {
            let path = model.ok_or_else(|| anyhow::anyhow!("--mode fast needs --model"))?;
            let thresholds = match taus {
                Some(t) => {
                    let stages: [f64; 5] = t
                        .as_slice()
                        .try_into()
                        .map_err(|_| anyhow::anyhow!("--taus needs exactly 5 comma-separated values"))?;
                    ThresholdSet::new(stages)?
                }
                None => ThresholdSet::preset(preset)?,
            };
            let model = ModelParams::load(&path)?;
            if full_precision {
                for &qp in &qps {
                    reports.push(encode_fast(
                        &tiles, &model, &thresholds, qp, &pcfg, &ccfg, par, repeats,
                    )?);
                }
            } else {
                let model = model.convert::<f32>();
                for &qp in &qps {
                    reports.push(encode_fast(
                        &tiles, &model, &thresholds, qp, &pcfg, &ccfg, par, repeats,
                    )?);
                }
            }
        }
    }
    write_reports_csv(out, &reports)?;
    for r in &reports {
        println!(
            "qp {}: {:.2} dB, {:.0} bits, {:.3} s coding, {:.3} s predictor",
            r.qp, r.psnr, r.rate, r.seconds, r.overhead_seconds
        );
        if r.repeat_seconds.len() > 1 {
            let n = r.repeat_seconds.len() as f64;
            let mean = r.repeat_seconds.iter().sum::<f64>() / n;
            let var = r.repeat_seconds.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
            println!(
                "  repeats {}: mean {:.3} s, variance {:.3e} s^2",
                r.repeat_seconds.len(),
                mean,
                var
            );
        }
    }
    println!("report: {}", out.display());
    Ok(())
}

fn cmd_bd(anchor: &Path, test: &Path) -> Result<()> {
    let a = read_points_csv(anchor)?;
    let t = read_points_csv(test)?;
    println!("points: {} anchor, {} test", a.len(), t.len());
    println!("bd_rate_pct: {:.4}", bd_rate(&a, &t)?);
    println!("bd_psnr_db: {:.4}", bd_psnr(&a, &t)?);
    println!("delta_t_pct: {:.4}", delta_t(&a, &t)?);
    Ok(())
}

fn cmd_enumerate(
    preset: Option<String>,
    ctu_size: u32,
    min_cu_side: u32,
    min_qt_leaf: u32,
    max_mt_depth: u8,
    max_mt_size: u32,
    no_forced_root: bool,
) -> Result<()> {
    let cfg = match preset.as_deref() {
        Some("default") => PartitionConfig::vvc_intra(),
        Some("quad-only-64") => PartitionConfig::quad_only(64, 8)?,
        Some(other) => bail!("unknown preset {other:?} (default, quad-only-64)"),
        None => PartitionConfig::new(
            ctu_size,
            min_cu_side,
            min_qt_leaf,
            max_mt_depth,
            max_mt_size,
            !no_forced_root,
        )?,
    };
    let reach = enumerate_reachable_cus(&cfg)?;
    println!("distinct_blocks: {}", reach.distinct_geometries());
    println!("search_states: {}", reach.contexts.len());
    let shapes = reach.canonical_shapes();
    println!("shapes: {}", shapes.len());
    for s in shapes {
        let modes = size_mode_set(s.w, s.h, &cfg);
        let labels: Vec<&str> = modes.to_vec().iter().map(|m| m.label()).collect();
        println!("  {s}: {}", labels.join(" "));
    }
    Ok(())
}

fn cmd_stats(data: &Path, out: Option<PathBuf>) -> Result<()> {
    let summary = scan_database(data)?;
    let csv = summary.to_csv();
    match out {
        Some(path) => {
            std::fs::write(&path, csv)?;
            println!("summary: {}", path.display());
        }
        None => print!("{csv}"),
    }
    println!("total: {}", summary.total_samples());
    Ok(())
}

fn main() -> Result<()> {
    // Die quietly when a downstream pipe closes, like other line tools.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL)
    };
    match Cli::parse().cmd {
        Cmd::Synth { out, count, width, height, seed } => {
            cmd_synth(&out, count, width, height, seed)
        }
        Cmd::GenDataset { manifest, synth, synth_size, seed, out, qps, sequential } => {
            cmd_gen_dataset(manifest, synth, synth_size, seed, &out, qps, sequential)
        }
        Cmd::Train {
            data,
            out,
            iterations,
            batch_size,
            lr,
            alpha,
            beta,
            rd_from_labels,
            seed,
            trace,
            sequential,
        } => cmd_train(
            &data, &out, iterations, batch_size, lr, alpha, beta, rd_from_labels, seed, trace,
            sequential,
        ),
        Cmd::Encode {
            input,
            split,
            mode,
            model,
            preset,
            taus,
            qps,
            out,
            repeats,
            full_precision,
            sequential,
        } => cmd_encode(
            &input,
            split,
            mode,
            model,
            &preset,
            taus,
            qps,
            &out,
            repeats,
            full_precision,
            sequential,
        ),
        Cmd::Bd { anchor, test } => cmd_bd(&anchor, &test),
        Cmd::Enumerate {
            preset,
            ctu_size,
            min_cu_side,
            min_qt_leaf,
            max_mt_depth,
            max_mt_size,
            no_forced_root,
        } => cmd_enumerate(
            preset,
            ctu_size,
            min_cu_side,
            min_qt_leaf,
            max_mt_depth,
            max_mt_size,
            no_forced_root,
        ),
        Cmd::Stats { data, out } => cmd_stats(&data, out),
    }
}
