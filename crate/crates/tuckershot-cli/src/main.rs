//! Command-line surface of the one-shot compression pipeline.
//!
//! Exit codes: 0 success, 1 usage errors, 2 data/model errors.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use tuckershot::finetune::{train, SyntheticTask, TrainConfig};
use tuckershot::io;
use tuckershot::net::forward::{compare_outputs, network_forward};
use tuckershot::net::{LayerKind, LayerParams, Network};
use tuckershot::pipeline::{
    analyze, compress, render_report, select_ranks, RankSelection, ReportFormat,
};
use tuckershot::tensor::test_support;
use tuckershot::Tensor;

#[derive(Parser)]
#[command(
    name = "tuckershot",
    version,
    about = "One-shot whole-network CNN compression: VBMF rank selection, Tucker decomposition, weights/FLOPs analysis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => ReportFormat::Table,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate per-layer decomposition ranks with global analytic VBMF
    Rankselect {
        /// Model manifest (.json with sibling .bin blob)
        model: PathBuf,
        /// Write the rank file here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decompose the named layers and write the substituted model
    Compress {
        model: PathBuf,
        /// Rank file (JSON map of layer name to ranks)
        #[arg(long)]
        ranks: Option<PathBuf>,
        /// Run VBMF rank selection first, then compress
        #[arg(long, conflicts_with = "ranks")]
        auto: bool,
        /// Restrict substitution to a comma-separated subset of layers
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<String>>,
        /// Output model manifest path
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Weights/FLOPs/M/E analysis of an architecture spec (shapes only)
    Analyze {
        /// Architecture spec (JSON)
        spec: PathBuf,
        #[arg(long)]
        ranks: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Run a model on an input tensor and print the output tensor
    Infer { model: PathBuf, input: PathBuf },
    /// Compare two models on the same input tensor
    Compare {
        model_a: PathBuf,
        model_b: PathBuf,
        input: PathBuf,
    },
    /// SGD fine-tuning on the seeded synthetic task
    Finetune {
        model: PathBuf,
        /// Task kind; only "synthetic" exists
        #[arg(long, default_value = "synthetic")]
        task: String,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        base_lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 256)]
        train_size: usize,
        #[arg(long, default_value_t = 128)]
        val_size: usize,
        #[arg(long, default_value_t = 0.45)]
        noise: f64,
        /// SGD momentum coefficient (plain SGD when omitted)
        #[arg(long)]
        momentum: Option<f64>,
        /// Write the updated model here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the JSON-lines history here (also printed to stdout)
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Generate a seeded synthetic model for an architecture spec
    Synth {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Plant exact channel ranks "r3,r4" into every conv kernel that is
        /// large enough (handy for demonstrating rankselect)
        #[arg(long)]
        planted: Option<String>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Rankselect { model, out } => {
            let net = io::load_model(&model)?;
            let sel = select_ranks(&net)?;
            let text = io::ranks_to_json(&sel);
            match out {
                Some(path) => std::fs::write(&path, text)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Cmd::Compress {
            model,
            ranks,
            auto,
            layers,
            out,
            format,
        } => {
            let net = io::load_model(&model)?;
            let sel: RankSelection = match (ranks, auto) {
                (Some(path), false) => io::load_ranks(&path)?,
                (None, true) => select_ranks(&net)?,
                (None, false) => {
                    // missing mode is a usage problem, not a data problem
                    eprintln!("error: pass either --ranks <file> or --auto");
                    std::process::exit(1);
                }
                (Some(_), true) => unreachable!("clap conflicts_with"),
            };
            let (compressed, report) = compress(&net, &sel, layers.as_deref())?;
            io::save_model(&compressed, &out)?;
            println!("{}", render_report(&report, format.into())?);
            Ok(())
        }
        Cmd::Analyze {
            spec,
            ranks,
            format,
        } => {
            let spec = io::load_spec(&spec)?;
            let sel = match ranks {
                Some(path) => Some(io::load_ranks(&path)?),
                None => None,
            };
            let report = analyze(&spec, sel.as_ref())?;
            println!("{}", render_report(&report, format.into())?);
            Ok(())
        }
        Cmd::Infer { model, input } => {
            let net = io::load_model(&model)?;
            let x = io::load_tensor(&input)?;
            let y = network_forward(&net, &x)?;
            print_tensor(&y);
            Ok(())
        }
        Cmd::Compare {
            model_a,
            model_b,
            input,
        } => {
            let a = io::load_model(&model_a)?;
            let b = io::load_model(&model_b)?;
            let x = io::load_tensor(&input)?;
            let ya = network_forward(&a, &x)?;
            let yb = network_forward(&b, &x)?;
            let (max_abs, rel) = compare_outputs(&ya, &yb)?;
            println!("max_abs_diff: {max_abs:e}");
            println!("rel_diff: {rel:e}");
            Ok(())
        }
        Cmd::Finetune {
            model,
            task,
            epochs,
            seed,
            base_lr,
            batch_size,
            train_size,
            val_size,
            noise,
            momentum,
            out,
            history,
        } => {
            if task != "synthetic" {
                bail!("unknown task {task:?}; only \"synthetic\" is available");
            }
            let net = io::load_model(&model)?;
            let classes = output_classes(&net)?;
            let task = SyntheticTask {
                seed,
                input: net.spec.input,
                classes,
                train_size,
                val_size,
                noise,
            };
            let cfg = TrainConfig {
                base_lr,
                batch_size,
                epochs,
                seed,
                momentum,
                ..Default::default()
            };
            let (tuned, hist) = train(&net, &task, &cfg)?;
            let mut lines = String::new();
            for e in &hist.epochs {
                lines.push_str(&serde_json::to_string(e)?);
                lines.push('\n');
            }
            print!("{lines}");
            if let Some(path) = history {
                std::fs::write(&path, lines)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(path) = out {
                io::save_model(&tuned, &path)?;
            }
            Ok(())
        }
        Cmd::Synth {
            spec,
            out,
            seed,
            planted,
        } => {
            let spec = io::load_spec(&spec)?;
            let mut net = Network::random_init(spec, seed)?;
            if let Some(text) = planted {
                let (r3, r4) = parse_rank_pair(&text)?;
                plant_ranks(&mut net, r3, r4, seed)?;
            }
            io::save_model(&net, &out)?;
            Ok(())
        }
    }
}

/// Class count of the synthetic task = the model's final output width.
fn output_classes(net: &Network) -> Result<usize> {
    let shapes = net.spec.infer_shapes()?;
    let last = net.spec.layers.last().context("model has no layers")?;
    Ok(shapes[&last.name].output.c)
}

fn parse_rank_pair(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        bail!("--planted wants \"r3,r4\"");
    }
    Ok((
        parts[0].trim().parse().context("--planted r3")?,
        parts[1].trim().parse().context("--planted r4")?,
    ))
}

/// Overwrite conv kernels with exact multilinear-rank channel structure plus
/// mild noise, wherever the requested ranks fit strictly inside the layer.
fn plant_ranks(net: &mut Network, r3: usize, r4: usize, seed: u64) -> Result<()> {
    use tuckershot::linalg::svd;
    let layers = net.spec.layers.clone();
    let mut k = 0u64;
    for layer in &layers {
        let LayerKind::Conv {
            d, s, t, groups, ..
        } = layer.kind
        else {
            continue;
        };
        let (sg, tg) = (s / groups, t / groups);
        if r3 >= sg || r4 >= tg {
            continue;
        }
        k += 1;
        let base = seed.wrapping_mul(1000).wrapping_add(k * 37);
        let mut kernel = Tensor::zeros(&[d, d, sg, t]);
        for g in 0..groups {
            let core = test_support::random_tensor(&[d, d, r3, r4], base + g as u64);
            let u3 = svd(&test_support::random_matrix(sg, r3, base + 100 + g as u64))
                .expect("svd")
                .u;
            let u4 = svd(&test_support::random_matrix(tg, r4, base + 200 + g as u64))
                .expect("svd")
                .u;
            let slab = core
                .mode_product(&u3, 2)
                .expect("shapes")
                .mode_product(&u4, 3)
                .expect("shapes");
            let noise = test_support::random_tensor(slab.shape(), base + 300 + g as u64);
            for i in 0..d {
                for j in 0..d {
                    for sc in 0..sg {
                        for tc in 0..tg {
                            let v = slab.get(&[i, j, sc, tc]) + 1e-3 * noise.get(&[i, j, sc, tc]);
                            kernel.set(&[i, j, sc, g * tg + tc], v);
                        }
                    }
                }
            }
        }
        if let Some(LayerParams::Conv { kernel: kref, .. }) = net.params.get_mut(&layer.name) {
            *kref = kernel;
        }
    }
    Ok(())
}

fn print_tensor(t: &Tensor) {
    println!("shape: {:?}", t.shape());
    let row = *t.shape().last().unwrap_or(&1);
    for chunk in t.data().chunks(row.max(1)) {
        let cells: Vec<String> = chunk.iter().map(|v| format!("{v:.6}")).collect();
        println!("{}", cells.join(" "));
    }
}
