//! The `ea-saliency` command line.

pub mod heatmap;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::aggregate::{MethodPreset, SaliencyMap};
use crate::error::{invalid, Error, Result};
use crate::eval::{
    cascading_sweep, class_sensitivity, combined_pointing, identity_trick_study, layer_maps, pointing_game,
    single_layer_pointing, EvalReport, PointingItem, DEFAULT_TOLERANCE,
};
use crate::extract::{AttachPoint, Side};
use crate::io::dataset_dir::{export_dataset, import_dataset};
use crate::io::pnm::Pnm;
use crate::io::{generate_shapes, load_model, save_model, train_toy, ShapesDataset, TrainConfig};
use crate::metasal::{meta_saliency, Direction, MetaConfig};
use crate::multilayer::{combine, compute_weights, CombineMode, WeightScheme};
use crate::nn::gradcheck::check_random_nets;
use crate::nn::{toy_architecture, LayerKind, ModelGraph};
use crate::tensor::Tensor;

use heatmap::{render, Colormap};

/// Exit status for a failed verification (as opposed to a usage or runtime error).
pub const EXIT_VERIFICATION_FAILED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "ea-saliency", version, about = "Backpropagation saliency maps on small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy CNN on a generated shapes set; writes the model and a loss CSV.
    TrainToy(TrainToyArgs),
    /// Generate a synthetic shapes dataset directory.
    GenData(GenDataArgs),
    /// Saliency map of one image at one layer.
    Saliency(SaliencyArgs),
    /// Weighted combination of saliency maps from several layers.
    Combine(CombineArgs),
    /// Spearman correlation between maps of the most and least confident classes.
    ClassSensitivity(ClassSensitivityArgs),
    /// Pointing game on a dataset directory.
    PointingGame(PointingGameArgs),
    /// Cascading weight randomisation sweep.
    SanityCheck(SanityCheckArgs),
    /// NormGrad with and without the identity trick at conv layers.
    IdentityStudy(IdentityStudyArgs),
    /// Finite-difference check of analytic gradients on random nets.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds the data, the initialisation and the shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Number of generated training images (ignored with --data).
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Train on an existing dataset directory instead of generating one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Loss curve CSV; defaults to `<out stem>.loss.csv`.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AttachArgs {
    #[arg(long)]
    pub layer: String,
    /// `out` reads the layer's output activations, `in` its input.
    #[arg(long, default_value = "out", value_parser = parse_side)]
    pub side: Side,
}

impl AttachArgs {
    fn attach(&self) -> AttachPoint {
        AttachPoint { layer: self.layer.clone(), side: self.side }
    }
}

#[derive(Debug, Args)]
pub struct MetaArgs {
    /// Inner step size; enables meta-saliency when given.
    #[arg(long)]
    pub meta_eps: Option<f64>,
    /// `d` (descent) or `a` (ascent).
    #[arg(long, default_value = "d", value_parser = parse_direction)]
    pub meta_dir: Direction,
}

impl MetaArgs {
    fn config(&self) -> Result<Option<MetaConfig>> {
        self.meta_eps.map(|e| MetaConfig::new(e, self.meta_dir)).transpose()
    }
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Portable pixmap or graymap matching the model input.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub class: usize,
    #[arg(long, value_parser = parse_method)]
    pub method: MethodPreset,
    #[command(flatten)]
    pub attach: AttachArgs,
    #[command(flatten)]
    pub meta: MetaArgs,
    #[arg(long, default_value = "gray", value_parser = parse_colormap)]
    pub colormap: Colormap,
    /// Heatmap path; the raw map goes to `<out stem>.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CombineArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub class: usize,
    #[arg(long, value_parser = parse_method)]
    pub method: MethodPreset,
    /// Layers to combine; defaults to every ReLU output.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: WeightScheme,
    #[arg(long, value_parser = parse_mode)]
    pub mode: CombineMode,
    /// Dataset directory for the data-driven schemes (spread, accuracy).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Images of --data used to fit the weights.
    #[arg(long, default_value_t = 100)]
    pub weight_images: usize,
    #[arg(long, default_value = "gray", value_parser = parse_colormap)]
    pub colormap: Colormap,
    /// Heatmap path; writes `<out stem>.csv` and `<out stem>.weights.csv` alongside.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassSensitivityArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: MethodPreset,
    #[command(flatten)]
    pub attach: AttachArgs,
    #[command(flatten)]
    pub meta: MetaArgs,
    /// Use only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PointingGameArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<MethodPreset>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    /// `<scheme>,<mode>`, e.g. `spread,add`: also score the combined map.
    #[arg(long)]
    pub combine: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: usize,
    /// Score ground-truth box indicator maps instead of a method (calibration).
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 100)]
    pub weight_images: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SanityCheckArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: MethodPreset,
    #[command(flatten)]
    pub attach: AttachArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Independent randomisations per stage.
    #[arg(long, default_value_t = 8)]
    pub draws: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IdentityStudyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Conv layers; defaults to every conv layer.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub nets: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Per-target errors as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_side(s: &str) -> std::result::Result<Side, String> {
    match s {
        "in" | "input" => Ok(Side::Input),
        "out" | "output" => Ok(Side::Output),
        _ => Err(format!("expected 'in' or 'out', got '{s}'")),
    }
}

fn parse_method(s: &str) -> std::result::Result<MethodPreset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scheme(s: &str) -> std::result::Result<WeightScheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<CombineMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_colormap(s: &str) -> std::result::Result<Colormap, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// What a successful command reports back to the process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    VerificationFailed,
}

/// Parses `args` (including the program name), runs the command and maps the
/// result to an exit code: 0 success, 1 usage or runtime error, 2 failed verification.
/// Errors print `error[<code>]: <message>` as the first line on standard error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            eprintln!("error[usage]: {}", msg.trim_start_matches("error: ").trim_end());
            return ExitCode::from(1);
        }
    };
    match run(&cli.command) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(EXIT_VERIFICATION_FAILED),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(1)
        }
    }
}

pub fn run(command: &Command) -> Result<Outcome> {
    match command {
        Command::TrainToy(a) => train_toy_cmd(a),
        Command::GenData(a) => {
            export_dataset(&generate_shapes(a.n, a.classes, a.seed)?, &a.out)?;
            Ok(Outcome::Success)
        }
        Command::Saliency(a) => saliency_cmd(a),
        Command::Combine(a) => combine_cmd(a),
        Command::ClassSensitivity(a) => class_sensitivity_cmd(a),
        Command::PointingGame(a) => pointing_cmd(a),
        Command::SanityCheck(a) => sanity_cmd(a),
        Command::IdentityStudy(a) => identity_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

/// Names the file in I/O errors.
fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn open_model(path: &Path) -> Result<ModelGraph> {
    at_path(path, load_model(path))
}

fn load_data(path: &Path, limit: Option<usize>) -> Result<ShapesDataset> {
    let ds = at_path(path, import_dataset(path))?;
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

fn load_image(path: &Path, model: &ModelGraph) -> Result<Tensor> {
    let t = at_path(path, Pnm::read(path))?.to_tensor();
    if t.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {} is {:?}, model expects {:?}",
            path.display(),
            t.shape(),
            model.input_shape()
        )));
    }
    Ok(t)
}

fn check_compatible(model: &ModelGraph, data: &ShapesDataset) -> Result<()> {
    if let Some(x) = data.images.first() {
        if x.shape() != model.input_shape() {
            return Err(Error::ShapeMismatch(format!(
                "dataset images are {:?}, model expects {:?}",
                x.shape(),
                model.input_shape()
            )));
        }
    }
    if data.num_classes != model.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} classes, model has {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    Ok(())
}

fn relu_layers(model: &ModelGraph) -> Vec<String> {
    model.layers().iter().filter(|l| matches!(l.kind, LayerKind::Relu)).map(|l| l.name.clone()).collect()
}

fn write_map(map: &SaliencyMap, colormap: Colormap, out: &Path) -> Result<()> {
    render(map, colormap).write(out)?;
    output::write_map_grid(map, &output::sibling(out, ".csv"))
}

fn train_toy_cmd(a: &TrainToyArgs) -> Result<Outcome> {
    let data = match &a.data {
        Some(d) => at_path(d, import_dataset(d))?,
        None => generate_shapes(a.n, a.classes, a.seed)?,
    };
    let shape = data.images.first().ok_or_else(|| invalid("training set is empty"))?.shape().to_vec();
    let model = toy_architecture([shape[0], shape[1], shape[2]], data.num_classes, a.seed)?;
    let cfg = TrainConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch_size, seed: a.seed };
    let outcome = train_toy(&model, &data, &cfg)?;
    save_model(&outcome.model, &a.out)?;
    let loss = a.loss_out.clone().unwrap_or_else(|| output::sibling(&a.out, ".loss.csv"));
    output::write_loss_curve(&outcome.loss_curve, &loss)?;
    Ok(Outcome::Success)
}

fn saliency_cmd(a: &SaliencyArgs) -> Result<Outcome> {
    let model = open_model(&a.model)?;
    let x = load_image(&a.image, &model)?;
    let attach = a.attach.attach();
    // No meta step is the same as a zero step.
    let cfg = a.meta.config()?.unwrap_or(MetaConfig::descent(0.0)?);
    let map = meta_saliency(&model, &x, a.class, a.method, &attach, &cfg)?;
    write_map(&map, a.colormap, &a.out)?;
    Ok(Outcome::Success)
}

fn attaches(layers: &[String]) -> Vec<AttachPoint> {
    layers.iter().map(|l| AttachPoint::output(l.clone())).collect()
}

fn combine_cmd(a: &CombineArgs) -> Result<Outcome> {
    let model = open_model(&a.model)?;
    let x = load_image(&a.image, &model)?;
    let layers = if a.layers.is_empty() { relu_layers(&model) } else { a.layers.clone() };
    let points = attaches(&layers);
    let data = match (&a.data, a.scheme) {
        (Some(d), _) => Some(load_data(d, Some(a.weight_images))?),
        (None, WeightScheme::FeatureSpread | WeightScheme::ProbeAccuracy) => {
            return Err(invalid(format!("scheme '{}' needs --data", a.scheme)));
        }
        (None, _) => None,
    };
    if let Some(d) = &data {
        check_compatible(&model, d)?;
    }
    let (images, labels) = data.as_ref().map(|d| (&d.images[..], &d.labels[..])).unwrap_or((&[], &[]));
    let weights = compute_weights(a.scheme, &model, images, labels, &points)?;
    let maps = points
        .iter()
        .map(|p| {
            let m = crate::aggregate::method_saliency(&model, &x, a.class, a.method, p)?;
            Ok(if a.mode == CombineMode::Product { m.positive_part() } else { m })
        })
        .collect::<Result<Vec<_>>>()?;
    let [_, h, w] = model.input_shape();
    let combined = combine(&maps, &weights, a.mode, h, w)?;
    write_map(&combined.map, a.colormap, &a.out)?;
    output::write_weights(&weights, a.mode, &output::sibling(&a.out, ".weights.csv"))?;
    Ok(Outcome::Success)
}

fn class_sensitivity_cmd(a: &ClassSensitivityArgs) -> Result<Outcome> {
    let model = open_model(&a.model)?;
    let data = load_data(&a.data, a.limit)?;
    check_compatible(&model, &data)?;
    let meta = a.meta.config()?;
    class_sensitivity(&model, &data.images, a.method, &a.attach.attach(), meta.as_ref())?.save_csv(&a.out)?;
    Ok(Outcome::Success)
}

fn oracle_items(data: &ShapesDataset) -> Result<Vec<PointingItem>> {
    data.images
        .iter()
        .zip(&data.annotations)
        .map(|(x, ann)| {
            let (_, h, w) = x.dims3()?;
            let values = (0..h * w)
                .map(|i| if ann.boxes.iter().any(|b| b.contains(i / w, i % w)) { 1.0 } else { 0.0 })
                .collect();
            Ok(PointingItem { map: SaliencyMap::new(h, w, values)?, annotation: ann.clone() })
        })
        .collect()
}

fn parse_combination(s: &str) -> Result<(WeightScheme, CombineMode)> {
    let (scheme, mode) =
        s.split_once(',').ok_or_else(|| invalid(format!("--combine expects <scheme>,<mode>, got '{s}'")))?;
    Ok((scheme.parse()?, mode.parse()?))
}

fn pointing_cmd(a: &PointingGameArgs) -> Result<Outcome> {
    let data = load_data(&a.data, a.limit)?;
    if a.oracle {
        if a.model.is_some() || a.method.is_some() || a.combine.is_some() {
            return Err(invalid("--oracle cannot be combined with --model, --method or --combine"));
        }
        pointing_game(&oracle_items(&data)?, a.tol, "oracle")?.save_csv(&a.out)?;
        return Ok(Outcome::Success);
    }
    let model = open_model(a.model.as_ref().ok_or_else(|| invalid("--model is required"))?)?;
    let method = a.method.ok_or_else(|| invalid("--method is required"))?;
    check_compatible(&model, &data)?;
    let layers = if a.layers.is_empty() { relu_layers(&model) } else { a.layers.clone() };
    let points = attaches(&layers);
    let maps = layer_maps(&model, &data, method, &points)?;
    let [_, h, w] = model.input_shape();
    let mut report = EvalReport::default();
    for (j, l) in layers.iter().enumerate() {
        report.extend(single_layer_pointing(&maps, &data, j, (h, w), a.tol, &format!("{method}@{l}"))?);
    }
    if let Some(combo) = &a.combine {
        let (scheme, mode) = parse_combination(combo)?;
        let fit = data.take(a.weight_images);
        let weights = compute_weights(scheme, &model, &fit.images, &fit.labels, &points)?;
        let group = format!("{method}@combined:{scheme}-{mode}");
        report.extend(combined_pointing(&maps, &data, &weights, mode, (h, w), a.tol, &group)?);
    }
    report.save_csv(&a.out)?;
    Ok(Outcome::Success)
}

fn sanity_cmd(a: &SanityCheckArgs) -> Result<Outcome> {
    let model = open_model(&a.model)?;
    let data = load_data(&a.data, a.limit)?;
    check_compatible(&model, &data)?;
    let (_, report) = cascading_sweep(&model, &data.images, a.method, &a.attach.attach(), a.seed, a.draws)?;
    report.save_csv(&a.out)?;
    Ok(Outcome::Success)
}

fn identity_cmd(a: &IdentityStudyArgs) -> Result<Outcome> {
    let model = open_model(&a.model)?;
    let data = load_data(&a.data, a.limit)?;
    check_compatible(&model, &data)?;
    let layers = if a.layers.is_empty() {
        model.layers().iter().filter(|l| matches!(l.kind, LayerKind::Conv { .. })).map(|l| l.name.clone()).collect()
    } else {
        a.layers.clone()
    };
    identity_trick_study(&model, &data, &layers, a.tol)?.save_csv(&a.out)?;
    Ok(Outcome::Success)
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<Outcome> {
    let report = check_random_nets(a.seed, a.nets, a.h)?;
    let passed = report.passed(a.tol);
    println!(
        "gradcheck seed={} nets={} h={} checked={} skipped={}",
        a.seed, a.nets, a.h, report.checked, report.skipped
    );
    println!(
        "max_rel_err={:e} {} {:e}: {}",
        report.max_rel_err,
        if passed { "<" } else { ">=" },
        a.tol,
        if passed { "pass" } else { "FAIL" }
    );
    if let Some(out) = &a.out {
        output::write_gradcheck(&report.per_target, out)?;
    }
    Ok(if passed { Outcome::Success } else { Outcome::VerificationFailed })
}
