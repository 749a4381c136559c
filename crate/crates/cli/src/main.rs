//! `transpose`: generate synthetic figures, train, infer and explain.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use transpose::explain::{self, ExportFormat, LinearityMode, Report};
use transpose::export::{self, PgmScale};
use transpose::heatmaps::KeypointSet;
use transpose::synth::{self, Dataset, FigureSample};
use transpose::training::{self, TrainConfig, TrainOptions};
use transpose::{posembed, Model, ModelConfig, Tensor};

#[derive(Parser)]
#[command(
    name = "transpose",
    version,
    about = "Keypoint heatmaps from a conv stem and a Transformer encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic figure dataset (PPM images, keypoints.csv, meta.json).
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Predict keypoints for one PPM image.
    Infer(InferArgs),
    /// Attention areas and gradient-linearity checks for one keypoint.
    Explain(ExplainArgs),
    /// Print the itemized parameter count of a configuration.
    CountParams(CountArgs),
    /// Cosine similarity of a model's position embedding.
    PeAnalyze(PeArgs),
    /// PCK of a trained model at several input resolutions.
    EvalRes(EvalResArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// Number of figures.
    #[arg(long, default_value_t = 2200)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Image size as HxW.
    #[arg(long, default_value = "64x48", value_parser = parse_size)]
    size: (usize, usize),
    /// Probability that one keypoint is hidden behind a box.
    #[arg(long, default_value_t = 0.0)]
    occlusion_p: f64,
    /// Keypoints per figure.
    #[arg(long, default_value_t = synth::DEFAULT_KEYPOINTS)]
    keypoints: usize,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON file with "model" and "train" sections; built-in toy recipe when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key after parsing, e.g. --set model.d=64 or --set train.epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the model, checkpoints and reports.
    #[arg(long)]
    out: PathBuf,
    /// Leading samples used for training; the rest are held out. Default: 90%.
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// PPM (P3 or P6) image whose extents are divisible by the model's r.
    #[arg(long)]
    image: PathBuf,
    /// Output directory for keypoints.json and heatmap_K.pgm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExplainMode {
    Dependency,
    Affected,
    StrictGrad,
    EmpiricalGrad,
}

#[derive(clap::Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Keypoint whose decoded location is the query.
    #[arg(long, default_value_t = 0)]
    keypoint: usize,
    /// Encoder layer to read attention from; the last one by default.
    #[arg(long)]
    layer: Option<usize>,
    /// Attention threshold of the area.
    #[arg(long, default_value_t = explain::DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, value_enum, default_value_t = ExplainMode::Dependency)]
    mode: ExplainMode,
    /// Source token j of the gradient checks; the query itself by default.
    #[arg(long)]
    source: Option<usize>,
    /// Output directory for report.csv, report.json and report.pgm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct CountArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(clap::Args)]
struct PeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output directory for similarity.csv and similarity.pgm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalResArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory written by `gen`; its held-out seeds are re-rendered.
    #[arg(long)]
    data: PathBuf,
    /// Leading samples that were used for training. Default: 90%.
    #[arg(long)]
    train_count: Option<usize>,
    /// Comma-separated HxW list.
    #[arg(long, default_value = "64x48,128x96", value_delimiter = ',', value_parser = parse_size)]
    resolutions: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h
        .trim()
        .parse()
        .map_err(|_| format!("bad height in {s:?}"))?;
    let w = w
        .trim()
        .parse()
        .map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    #[serde(default = "TrainConfig::toy")]
    train: TrainConfig,
}

impl RunConfig {
    fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
        }
    }
}

/// Parses the file (or the toy recipe), applies `key=value` overrides and
/// re-validates against the schema, so unknown keys fail either way.
fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut value = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let parsed: RunConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            serde_json::to_value(parsed)?
        }
        None => serde_json::to_value(RunConfig::toy())?,
    };
    for item in &args.overrides {
        let (key, raw) = item
            .split_once('=')
            .with_context(|| format!("override {item:?} is not KEY=VALUE"))?;
        let new: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut value;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .with_context(|| format!("unknown config key {key:?}"))?;
        }
        *slot = new;
    }
    let config: RunConfig = serde_json::from_value(value).context("applying overrides")?;
    config.model.validate()?;
    config.train.validate()?;
    Ok(config)
}

fn read_image(path: &Path) -> Result<Tensor> {
    let (h, w, data) =
        export::read_ppm(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Tensor::new(&[3, h, w], data)?)
}

fn load(path: &Path) -> Result<Model> {
    transpose::load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn split(data: &Dataset, train_count: Option<usize>) -> Result<(&[FigureSample], &[FigureSample])> {
    match train_count {
        None => Ok(data.split()),
        Some(n) if n < data.len() => Ok(data.split_at(n)),
        Some(n) => bail!(
            "--train-count {n} leaves no held-out samples out of {}",
            data.len()
        ),
    }
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let data = synth::make_dataset_k(a.n, a.seed, a.size.0, a.size.1, a.occlusion_p, a.keypoints)?;
    synth::export_dataset(&data, &a.out)?;
    println!("wrote {} figures to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let data = synth::import_dataset(&a.data)
        .with_context(|| format!("reading dataset {}", a.data.display()))?;
    let (train_set, test_set) = split(&data, a.train_count)?;
    fs::create_dir_all(&a.out)?;
    fs::write(
        a.out.join("config.json"),
        serde_json::to_string_pretty(&config)? + "\n",
    )?;
    let options = TrainOptions {
        out_dir: Some(a.out.clone()),
        verbose: a.verbose,
    };
    let report = match a.precision {
        Precision::F32 => {
            training::train::<f32>(&config.model, &config.train, train_set, test_set, &options)?.1
        }
        Precision::F64 => {
            training::train::<f64>(&config.model, &config.train, train_set, test_set, &options)?.1
        }
    };
    println!(
        "trained {} epochs on {} samples: final loss {:.6e}, held-out PCK@{} {:.4}, model {}",
        report.epochs.len(),
        report.train_samples,
        report.epochs.last().map_or(f64::NAN, |e| e.loss),
        config.train.pck_alpha,
        report.final_pck(),
        a.out.join("model.tpose").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct InferOutput<'a> {
    height: usize,
    width: usize,
    keypoints: &'a KeypointSet,
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let model = load(&a.model)?;
    let image = read_image(&a.image)?;
    let (kps, hm) = training::predict(&model, &image)?;
    fs::create_dir_all(&a.out)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let out = InferOutput {
        height: h,
        width: w,
        keypoints: &kps,
    };
    fs::write(
        a.out.join("keypoints.json"),
        serde_json::to_string_pretty(&out)? + "\n",
    )?;
    let (hh, hw) = hm.extent();
    for k in 0..hm.channels() {
        export::write_pgm(
            &a.out.join(format!("heatmap_{k}.pgm")),
            hm.channel(k),
            hh,
            hw,
            PgmScale::GlobalMax,
        )?;
    }
    for (k, p) in kps.points.iter().enumerate() {
        println!(
            "keypoint {k}: x {:.3} y {:.3} score {:.4} visible {}",
            p.x, p.y, p.score, p.visible
        );
    }
    Ok(())
}

fn write_all<R: Report>(report: &R, dir: &Path, pgm: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    explain::export_report(report, &dir.join("report.csv"), ExportFormat::Csv)?;
    explain::export_report(report, &dir.join("report.json"), ExportFormat::Json)?;
    if pgm {
        explain::export_report(report, &dir.join("report.pgm"), ExportFormat::Pgm)?;
    }
    Ok(())
}

fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    let model = load(&a.model)?;
    let image = read_image(&a.image)?;
    let (kps, _) = training::predict(&model, &image)?;
    let kp = kps.points.get(a.keypoint).with_context(|| {
        format!(
            "keypoint {} out of range (model predicts {})",
            a.keypoint,
            kps.len()
        )
    })?;
    let (_, recs) = model.forward(&image, true)?;
    let grid = (
        image.shape()[1] / model.config().downsample,
        image.shape()[2] / model.config().downsample,
    );
    let query = explain::query_index(kp, model.config().downsample, grid);
    match a.mode {
        ExplainMode::Dependency | ExplainMode::Affected => {
            let layer = a.layer.unwrap_or(recs.len() - 1);
            let rec = recs.get(layer).with_context(|| {
                format!("layer {layer} out of range (model has {})", recs.len())
            })?;
            let report = if a.mode == ExplainMode::Dependency {
                explain::dependency_area(rec, grid, query, a.delta)?
            } else {
                explain::affected_area(rec, grid, query, a.delta)?
            };
            let report = report.with_keypoint(a.keypoint);
            write_all(&report, &a.out, true)?;
            println!(
                "keypoint {} at cell {query} (layer {layer}, delta {}): {} of {} positions",
                a.keypoint,
                a.delta,
                report.area.len(),
                report.full_row.len()
            );
        }
        ExplainMode::StrictGrad | ExplainMode::EmpiricalGrad => {
            if a.layer.is_some_and(|l| l + 1 != recs.len()) {
                bail!(
                    "gradient checks run on the last encoder layer ({})",
                    recs.len() - 1
                );
            }
            let mode = if a.mode == ExplainMode::StrictGrad {
                LinearityMode::Strict
            } else {
                LinearityMode::Empirical
            };
            let source = a.source.unwrap_or(query);
            let report = explain::grad_linearity_check(&model, &image, query, source, mode)?;
            write_all(&report, &a.out, report.norms.is_some())?;
            match report.correlation {
                Some(c) => println!(
                    "query {query}, source {source}: A_ij {:.6e}, correlation of |dh_i/dx_j| with A_i {c:.4}",
                    report.a_ij
                ),
                None => println!(
                    "query {query}, source {source}: A_ij {:.6e}, max relative error {:.3e}",
                    report.a_ij, report.max_rel_err
                ),
            }
        }
    }
    Ok(())
}

fn cmd_count_params(a: &CountArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let c = transpose::count_params(&config.model)?;
    println!("backbone            {:>10}", c.backbone);
    println!("position_embedding  {:>10}", c.position_embedding);
    println!("encoder             {:>10}", c.encoder);
    println!("head                {:>10}", c.head);
    println!("trainable           {:>10}", c.trainable);
    println!("total               {:>10}", c.total);
    Ok(())
}

fn cmd_pe_analyze(a: &PeArgs) -> Result<()> {
    let model = load(&a.model)?;
    let pe = model.position_embedding();
    let (gh, gw) = pe.grid();
    let sim = pe.cosine_similarity()?;
    let l = gh * gw;
    fs::create_dir_all(&a.out)?;
    export::write_matrix_csv(&a.out.join("similarity.csv"), sim.data(), l, l)?;
    // One gh×gw similarity map per position, tiled in grid order.
    let (th, tw) = (gh * gh, gw * gw);
    let mut tiles = vec![0.0; th * tw];
    for q in 0..l {
        let (qy, qx) = (q / gw, q % gw);
        for p in 0..l {
            let (py, px) = (p / gw, p % gw);
            tiles[(qy * gh + py) * tw + qx * gw + px] = sim.data()[q * l + p].max(0.0);
        }
    }
    export::write_pgm(
        &a.out.join("similarity.pgm"),
        &tiles,
        th,
        tw,
        PgmScale::GlobalMax,
    )?;
    let (near, far) = posembed::neighbour_contrast(&sim, gh, gw)?;
    println!(
        "{:?} embedding on a {gh}x{gw} grid: neighbour similarity {near:.4}, distant {far:.4}",
        pe.kind()
    );
    Ok(())
}

fn cmd_eval_res(a: &EvalResArgs) -> Result<()> {
    let model = load(&a.model)?;
    let data = synth::import_dataset(&a.data)
        .with_context(|| format!("reading dataset {}", a.data.display()))?;
    let (_, test_set) = split(&data, a.train_count)?;
    let seeds: Vec<u64> = test_set.iter().map(|s| s.seed).collect();
    let rows =
        training::eval_resolutions(&model, &seeds, data.occlusion_p, &a.resolutions, a.alpha)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, training::resolutions_csv(&rows))?;
    for r in &rows {
        println!("{}x{}: PCK@{} {:.4}", r.height, r.width, a.alpha, r.pck);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Explain(a) => cmd_explain(a),
        Command::CountParams(a) => cmd_count_params(a),
        Command::PeAnalyze(a) => cmd_pe_analyze(a),
        Command::EvalRes(a) => cmd_eval_res(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use transpose::heatmaps;
    use transpose::model::HEATMAP_STRIDE;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("64x48"), Ok((64, 48)));
        assert!(parse_size("64").is_err());
        assert!(parse_size("ax3").is_err());
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let args = ConfigArgs {
            config: None,
            overrides: vec![
                "model.d=64".into(),
                "train.epochs=3".into(),
                "model.pe_kind=None".into(),
            ],
        };
        let c = load_config(&args).unwrap();
        assert_eq!((c.model.d, c.train.epochs), (64, 3));
        let bad = ConfigArgs {
            config: None,
            overrides: vec!["model.depth=3".into()],
        };
        assert!(load_config(&bad).is_err());
        let invalid = ConfigArgs {
            config: None,
            overrides: vec!["model.d=30".into()],
        };
        assert!(load_config(&invalid).is_err());
    }

    #[test]
    fn shipped_toy_config_is_the_builtin_recipe() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json");
        let args = ConfigArgs {
            config: Some(path.into()),
            overrides: vec![],
        };
        let c = load_config(&args).unwrap();
        assert_eq!((c.model, c.train), (ModelConfig::toy(), TrainConfig::toy()));
    }

    #[test]
    fn command_line_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn heatmap_stride_matches_decoder() {
        assert_eq!(HEATMAP_STRIDE, 4);
        let kps = heatmaps::KeypointSet::new(vec![heatmaps::Keypoint::visible(8.0, 12.0)]);
        let hm = heatmaps::gaussian_target::<f64>(&kps, 2.0, 16, 12, HEATMAP_STRIDE).unwrap();
        let back = heatmaps::decode(&hm, HEATMAP_STRIDE);
        assert!((back.points[0].x - 8.0).abs() < 1e-6);
    }
}
