//! `saflow` command-line front end.
//!
//! Exit codes: 0 success, 1 malformed input or failed run, 2 usage error,
//! 3 no convergence within `--max-iters` (outputs are still written).

mod export;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use saflow::affinity::FeatureSet;
use saflow::flow::{FlowConfig, NeighborhoodSystem};
use saflow::pipeline::{self, LabelOptions, LabelRun, PatchOptions, SketchMode};

use crate::export::{Manifest, Metrics, Timings};
use crate::io::{Format, Image};

#[derive(Parser)]
#[command(name = "saflow", version, about = "Unsupervised labeling with self-assignment flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label pixels of an image or rows of a feature CSV.
    Label(LabelArgs),
    /// Label image patches up to rotations, reflections and small shifts.
    Patch(PatchArgs),
    /// Partition the nodes of a weighted graph.
    Graph(GraphArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Weights {
    Uniform,
    Nlm,
    Graph,
}

#[derive(Args, Serialize)]
struct FlowArgs {
    #[arg(long)]
    input: PathBuf,
    /// Defaults to a guess from the file extension.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Interpolation parameter of the self-assignment, in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    s: f64,
    /// Upper bound on the number of labels.
    #[arg(long, default_value_t = 8)]
    c: usize,
    /// Side of the odd averaging window.
    #[arg(long, default_value_t = 3)]
    nbhd: usize,
    #[arg(long, default_value_t = 0.1)]
    rho: f64,
    /// Kernel width. Defaults to sqrt(0.1), or 0.1 per window pixel for patches.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    entropy_tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    /// Nyström columns; 0 forces the exact affinity. Defaults to 100 above 4096 vertices.
    #[arg(long)]
    sketch_cols: Option<usize>,
    #[arg(long, value_enum)]
    weights: Option<Weights>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct LabelArgs {
    #[command(flatten)]
    #[serde(flatten)]
    flow: FlowArgs,
    /// Patch side of the non-local-means weights.
    #[arg(long, default_value_t = 3)]
    nlm_patch: usize,
    /// Scale of the non-local-means weights.
    #[arg(long, default_value_t = 1.0)]
    nlm_rho: f64,
}

#[derive(Args, Serialize)]
struct PatchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    flow: FlowArgs,
    #[arg(long, default_value_t = 7)]
    patch_size: usize,
    /// Align-and-average rounds of prototype learning.
    #[arg(long, default_value_t = saflow::patchlab::DEFAULT_MM_ROUNDS)]
    mm_rounds: usize,
}

#[derive(Args, Serialize)]
struct GraphArgs {
    #[command(flatten)]
    #[serde(flatten)]
    flow: FlowArgs,
    /// Ground-truth labels, one per line, to count disagreements against.
    #[arg(long)]
    truth: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Input(anyhow::Error),
    NotConverged { iterations: usize, entropy: f64 },
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

impl From<saflow::Error> for Failure {
    fn from(e: saflow::Error) -> Self {
        Failure::Input(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Label(a) => cmd_label(a),
        Command::Patch(a) => cmd_patch(a),
        Command::Graph(a) => cmd_graph(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::NotConverged { iterations, entropy }) => {
            eprintln!("error: no convergence after {iterations} iterations (entropy {entropy:.3e}); outputs written");
            ExitCode::from(3)
        }
    }
}

fn validate(a: &FlowArgs) -> Outcome {
    if !(0.0..=1.0).contains(&a.s) {
        return usage(format!("--s must lie in [0, 1], got {}", a.s));
    }
    if a.c < 2 {
        return usage(format!("--c must be at least 2, got {}", a.c));
    }
    if a.nbhd % 2 == 0 {
        return usage(format!("--nbhd must be odd, got {}", a.nbhd));
    }
    for (name, v) in [("--rho", a.rho), ("--step", a.step), ("--entropy-tol", a.entropy_tol)] {
        if !(v > 0.0 && v.is_finite()) {
            return usage(format!("{name} must be positive, got {v}"));
        }
    }
    if let Some(sigma) = a.sigma {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return usage(format!("--sigma must be positive, got {sigma}"));
        }
    }
    if a.max_iters == 0 {
        return usage("--max-iters must be at least 1");
    }
    if !a.input.is_file() {
        return usage(format!("input file {} not found", a.input.display()));
    }
    Ok(())
}

fn input_format(a: &FlowArgs) -> Result<Format, Failure> {
    match a.format.or_else(|| Format::guess(&a.input)) {
        Some(f) => Ok(f),
        None => usage(format!("cannot tell the format of {}; pass --format", a.input.display())),
    }
}

fn sketch_mode(a: &FlowArgs) -> SketchMode {
    match a.sketch_cols {
        None => SketchMode::Auto,
        Some(0) => SketchMode::Exact,
        Some(l) => SketchMode::Columns(l),
    }
}

fn label_options(a: &FlowArgs, sigma: f64) -> LabelOptions {
    LabelOptions {
        c: a.c,
        sigma,
        sketch: sketch_mode(a),
        seed: a.seed,
        flow: FlowConfig {
            s: a.s,
            rho: a.rho,
            h: a.step,
            entropy_tol: a.entropy_tol,
            max_iters: a.max_iters,
            ..FlowConfig::default()
        },
    }
}

fn check_count(c: usize, n: usize) -> Outcome {
    if c > n {
        return usage(format!("--c = {c} exceeds the {n} vertices of the input"));
    }
    Ok(())
}

fn ensure_out_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn metrics(run: &LabelRun) -> Metrics {
    let o = &run.outcome;
    Metrics {
        schema_version: export::METRICS_SCHEMA,
        effective_labels: o.labels.effective,
        iterations: o.iterations,
        converged: o.converged,
        final_entropy: o.final_entropy,
        objective: run.objective,
        trace_b: run.trace_b,
        pseudo_inverse: o.pseudo_inverse,
        sketch_cols: run.sketch_cols,
        reconstruction_mae: None,
        disagreement: None,
    }
}

/// Writes metrics, diagnostics and the manifest, then reports convergence.
#[allow(clippy::too_many_arguments)]
fn finish<C: Serialize>(
    command: &'static str,
    args: &C,
    input: &Path,
    out_dir: &Path,
    run: &LabelRun,
    metrics: Metrics,
    mut outputs: Vec<PathBuf>,
    started: (Instant, Instant, Instant),
) -> Outcome {
    let metrics_path = out_dir.join("metrics.json");
    export::write_json(&metrics_path, &metrics)?;
    let diag = out_dir.join("diagnostics.csv");
    export::write_diagnostics(&diag, &run.outcome.trace)?;
    outputs.extend([metrics_path, diag]);
    let (load, run_start, export_start) = started;
    let manifest_path = out_dir.join("manifest.json");
    outputs.push(manifest_path.clone());
    let o = &run.outcome;
    let manifest = Manifest {
        tool: "saflow",
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv: std::env::args().collect(),
        input: input.to_path_buf(),
        config: args,
        n: o.labels.labels.len(),
        iterations: o.iterations,
        effective_labels: o.labels.effective,
        final_entropy: o.final_entropy,
        converged: o.converged,
        timings: Timings {
            load_ms: (run_start - load).as_millis(),
            run_ms: (export_start - run_start).as_millis(),
            export_ms: export_start.elapsed().as_millis(),
        },
        outputs,
    };
    export::write_json(&manifest_path, &manifest)?;
    if !o.converged {
        return Err(Failure::NotConverged { iterations: o.iterations, entropy: o.final_entropy });
    }
    Ok(())
}

enum LabelInput {
    Image(Image),
    Table(nalgebra::DMatrix<f64>),
}

fn cmd_label(a: &LabelArgs) -> Outcome {
    let f = &a.flow;
    validate(f)?;
    let weights = f.weights.unwrap_or(Weights::Uniform);
    if weights == Weights::Graph {
        return usage("graph weights need the graph command");
    }
    if a.nlm_patch % 2 == 0 || !(a.nlm_rho > 0.0) {
        return usage("--nlm-patch must be odd and --nlm-rho positive");
    }
    let format = input_format(f)?;
    let t_load = Instant::now();
    let input = match format {
        Format::Ppm | Format::Pgm => LabelInput::Image(io::read_image(&f.input, format)?),
        Format::Csv => LabelInput::Table(io::read_feature_csv(&f.input)?),
        Format::Edgelist => return usage("label reads ppm, pgm or csv input; use the graph command for edge lists"),
    };
    let (features, nbhd) = match &input {
        LabelInput::Image(img) => {
            let feats = img.features();
            let nbhd = match weights {
                Weights::Nlm => {
                    NeighborhoodSystem::grid_nlm(img.height, img.width, f.nbhd, &feats, a.nlm_patch, a.nlm_rho)?
                }
                _ => NeighborhoodSystem::grid_uniform(img.height, img.width, f.nbhd)?,
            };
            (feats, nbhd)
        }
        LabelInput::Table(m) => {
            if weights == Weights::Nlm {
                return usage("nlm weights need an image input");
            }
            // rows have no spatial layout; neighbors are adjacent rows
            (m.clone(), NeighborhoodSystem::path(m.nrows(), f.nbhd / 2))
        }
    };
    let features = FeatureSet::euclidean(features)?;
    check_count(f.c, features.len())?;
    ensure_out_dir(&f.out_dir)?;
    let opts = label_options(f, f.sigma.unwrap_or(pipeline::DEFAULT_SIGMA));
    let t_run = Instant::now();
    let (run, protos) = pipeline::label_features_with_prototypes(&features, &nbhd, &opts)?;
    let t_export = Instant::now();

    let labels = &run.outcome.labels.labels;
    let map = export::first_occurrence_map(labels, run.outcome.labels.effective);
    let relabeled: Vec<usize> = labels.iter().map(|&l| map[l]).collect();
    let mut outputs = Vec::new();
    let path = f.out_dir.join("labels.csv");
    io::write_labels(&path, &relabeled)?;
    outputs.push(path);
    if let LabelInput::Image(img) = &input {
        let path = f.out_dir.join("labels.ppm");
        io::write_pnm(&path, img.width, img.height, 3, &export::palette_image(&relabeled))?;
        outputs.push(path);
    }
    let mut order = vec![0; map.len()];
    for (old, &new) in map.iter().enumerate() {
        order[new] = old;
    }
    let rows: Vec<Vec<f64>> = order
        .iter()
        .filter_map(|&j| protos.kept_columns.iter().position(|&c| c == j))
        .map(|r| protos.protos.row(r).iter().copied().collect())
        .collect();
    let path = f.out_dir.join("prototypes.csv");
    export::write_prototypes(&path, rows.iter().map(Vec::as_slice))?;
    outputs.push(path);
    finish("label", a, &f.input, &f.out_dir, &run, metrics(&run), outputs, (t_load, t_run, t_export))
}

fn cmd_patch(a: &PatchArgs) -> Outcome {
    let f = &a.flow;
    validate(f)?;
    if a.patch_size % 2 == 0 {
        return usage(format!("--patch-size must be odd, got {}", a.patch_size));
    }
    if matches!(f.weights, Some(w) if w != Weights::Uniform) {
        return usage("the patch command uses uniform weights");
    }
    let format = input_format(f)?;
    if !matches!(format, Format::Ppm | Format::Pgm) {
        return usage("patch reads ppm or pgm images");
    }
    let t_load = Instant::now();
    let img = io::read_image(&f.input, format)?;
    let grid = saflow::patchlab::PatchGrid::new(img.height, img.width, img.channels, img.pixels.clone(), a.patch_size)?;
    check_count(f.c, grid.interior_len())?;
    ensure_out_dir(&f.out_dir)?;
    let sigma = f.sigma.unwrap_or_else(|| pipeline::default_patch_sigma(a.patch_size));
    let opts = PatchOptions { label: label_options(f, sigma), nbhd_side: f.nbhd, mm_rounds: a.mm_rounds };
    let t_run = Instant::now();
    let out = pipeline::label_patches(&grid, &opts)?;
    let t_export = Instant::now();

    let run = &out.run;
    let labels = &run.outcome.labels.labels;
    let map = export::first_occurrence_map(labels, run.outcome.labels.effective);
    let relabeled: Vec<usize> = labels.iter().map(|&l| map[l]).collect();
    let mut order = vec![0; map.len()];
    for (old, &new) in map.iter().enumerate() {
        order[new] = old;
    }
    let ext = if img.channels == 1 { "pgm" } else { "ppm" };
    let mut outputs = Vec::new();
    let (ih, iw) = grid.interior_shape();
    let path = f.out_dir.join("labels.csv");
    io::write_labels(&path, &relabeled)?;
    outputs.push(path);
    let path = f.out_dir.join("labels.ppm");
    io::write_pnm(&path, iw, ih, 3, &export::palette_image(&relabeled))?;
    outputs.push(path);
    let path = f.out_dir.join("prototypes.csv");
    export::write_prototypes(&path, order.iter().map(|&j| out.prototypes[j].values.as_slice()))?;
    outputs.push(path);
    let (sw, sh, strip) = prototype_strip(&order.iter().map(|&j| &out.prototypes[j].values[..]).collect::<Vec<_>>(), a.patch_size, img.channels);
    let path = f.out_dir.join(format!("prototypes.{ext}"));
    io::write_pnm(&path, sw, sh, img.channels, &strip)?;
    outputs.push(path);
    let rec = &out.reconstruction;
    let path = f.out_dir.join(format!("reconstruction.{ext}"));
    io::write_pnm(&path, img.width, img.height, img.channels, &rec.image)?;
    outputs.push(path);
    let path = f.out_dir.join("difference.pgm");
    io::write_pnm(&path, img.width, img.height, 1, &difference_image(&img, &rec.image))?;
    outputs.push(path);
    let mut m = metrics(run);
    m.reconstruction_mae = Some(rec.covered_mae(&grid));
    finish("patch", a, &f.input, &f.out_dir, run, m, outputs, (t_load, t_run, t_export))
}

/// Prototypes side by side with a one-pixel white separator.
fn prototype_strip(protos: &[&[f64]], side: usize, channels: usize) -> (usize, usize, Vec<f64>) {
    let width = protos.len() * (side + 1) - 1;
    let mut out = vec![1.0; width * side * channels];
    for (k, p) in protos.iter().enumerate() {
        for m in 0..side * side {
            let (r, c) = (m / side, k * (side + 1) + m % side);
            for q in 0..channels {
                out[(r * width + c) * channels + q] = p[m * channels + q];
            }
        }
    }
    (width, side, out)
}

/// `|input − reconstruction|` averaged over channels, with [0, 0.3] mapped
/// to the full gray range.
fn difference_image(img: &Image, rec: &[f64]) -> Vec<f64> {
    let ch = img.channels;
    (0..img.height * img.width)
        .map(|p| {
            let d: f64 = (0..ch).map(|q| (img.pixels[p * ch + q] - rec[p * ch + q]).abs()).sum::<f64>() / ch as f64;
            d.min(0.3) / 0.3
        })
        .collect()
}

fn cmd_graph(a: &GraphArgs) -> Outcome {
    let f = &a.flow;
    validate(f)?;
    if matches!(f.weights, Some(w) if w != Weights::Graph) {
        return usage("the graph command uses graph weights");
    }
    let format = f.format.unwrap_or(Format::Edgelist);
    if format != Format::Edgelist {
        return usage("graph reads edge lists");
    }
    if let Some(t) = &a.truth {
        if !t.is_file() {
            return usage(format!("truth file {} not found", t.display()));
        }
    }
    let t_load = Instant::now();
    let (n, edges) = io::read_edge_list(&f.input)?;
    let truth = a.truth.as_deref().map(io::read_labels).transpose()?;
    if let Some(t) = &truth {
        if t.len() != n {
            return Err(anyhow!("truth has {} labels for {n} nodes", t.len()).into());
        }
    }
    check_count(f.c, n)?;
    ensure_out_dir(&f.out_dir)?;
    let opts = label_options(f, f.sigma.unwrap_or(pipeline::DEFAULT_SIGMA));
    let t_run = Instant::now();
    let run = pipeline::label_graph(n, &edges, &opts)?;
    let t_export = Instant::now();

    let labels = &run.outcome.labels.labels;
    let map = export::first_occurrence_map(labels, run.outcome.labels.effective);
    let relabeled: Vec<usize> = labels.iter().map(|&l| map[l]).collect();
    let path = f.out_dir.join("labels.csv");
    io::write_labels(&path, &relabeled)?;
    let mut m = metrics(&run);
    m.disagreement = truth.as_ref().map(|t| saflow::eval::disagreement_count(&relabeled, t));
    if let Some(d) = m.disagreement {
        println!("disagreement with truth: {d} of {n} nodes");
    }
    finish("graph", a, &f.input, &f.out_dir, &run, m, vec![path], (t_load, t_run, t_export))
}
