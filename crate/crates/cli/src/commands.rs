//! Subcommand definitions and drivers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use diffseg::{
    aggregate, evaluate_dataset, generate_stack, kmeans_segment, read_stack, segment_with_report,
    write_stack, AttentionStack, EvalPair, KMeansConfig, MergeConfig, PipelineParams,
    SegmentationMask, SynthSpec, WeightScheme, IGNORE_LABEL,
};

use crate::render;

/// A failed command and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub const IO: u8 = 1;
    pub const VALIDATION: u8 = 2;
    pub const FLAGS: u8 = 3;

    fn io(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: Self::IO,
            error: error.into(),
        }
    }

    fn validation(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: Self::VALIDATION,
            error: error.into(),
        }
    }

    fn flags(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: Self::FLAGS,
            error: error.into(),
        }
    }
}

impl From<diffseg::Error> for Failure {
    fn from(err: diffseg::Error) -> Self {
        if err.is_validation() {
            Failure::validation(err)
        } else {
            Failure::io(err)
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "diffseg", version, about = "Unsupervised segmentation from diffusion self-attention")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment one attention stack.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Build a synthetic attention stack from a label PNG.
    Synth(SynthArgs),
    /// K-means baseline over the aggregated tensor.
    Kmeans(KmeansArgs),
    /// Check an attention stack directory and list every violation.
    Validate {
        #[arg(long)]
        attn: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// tau = 1.1
    Coco,
    /// tau = 0.9
    Cityscapes,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Args)]
struct StackArgs {
    /// Attention stack directory (manifest.json + layer files).
    #[arg(long)]
    attn: PathBuf,

    /// Output file prefix; writes <prefix>_mask.png, <prefix>_meta.json, <prefix>_overlay.png.
    #[arg(long)]
    out: String,

    /// Aggregation weights: `propto`, `only:<res>`, or `custom:<file.json>`.
    #[arg(long, default_value = "propto")]
    weights: String,

    /// Mask size as `HxW` or `N`; defaults to the source image size.
    #[arg(long)]
    output_size: Option<String>,

    /// Source image to draw the overlay on.
    #[arg(long)]
    image: Option<PathBuf>,

    /// Overlay opacity.
    #[arg(long, default_value_t = 0.5)]
    alpha: f32,

    /// Fail unless the stack was extracted at this diffusion time step.
    #[arg(long)]
    expect_t: Option<u32>,

    /// Storage precision of the aggregated tensor.
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[command(flatten)]
    stack: StackArgs,

    /// Anchor grid side M (M² anchors).
    #[arg(long, default_value_t = 16)]
    anchors: usize,

    /// Merging iterations N.
    #[arg(long, default_value_t = 3)]
    iterations: usize,

    /// KL merge threshold; accepts `inf`.
    #[arg(long, conflicts_with = "preset")]
    tau: Option<f64>,

    /// Dataset-tuned threshold.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of predicted masks (`<name>.png` or `<name>_mask.png`).
    #[arg(long)]
    pred: PathBuf,

    /// Directory of ground-truth label PNGs (`<name>.png`).
    #[arg(long)]
    gt: PathBuf,

    /// Where to write the JSON report.
    #[arg(long)]
    report: PathBuf,

    /// Ground-truth value excluded from scoring.
    #[arg(long, default_value_t = IGNORE_LABEL)]
    ignore: u32,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Single-channel label PNG; square, side divisible by every resolution.
    #[arg(long)]
    labels: PathBuf,

    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,

    #[arg(long, value_delimiter = ',', default_value = "64,32,16,8")]
    resolutions: Vec<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Multiplicative jitter amplitude per entry.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,

    #[arg(long, default_value_t = 300)]
    time_step: u32,

    /// Source image size to record; defaults to 8× the largest resolution.
    #[arg(long)]
    image_size: Option<usize>,

    #[arg(long)]
    source_id: Option<String>,
}

#[derive(Debug, Args)]
struct KmeansArgs {
    #[command(flatten)]
    stack: StackArgs,

    /// Number of clusters.
    #[arg(long, required_unless_present = "k_from_gt", conflicts_with = "k_from_gt")]
    k: Option<usize>,

    /// Take k from the number of classes in this ground-truth PNG.
    #[arg(long)]
    k_from_gt: Option<PathBuf>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, default_value_t = 300)]
    max_iters: usize,

    #[arg(long, default_value_t = 1)]
    restarts: usize,
}

pub fn run(cli: Cli) -> CmdResult {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(Failure::flags)?;
    }
    match cli.command {
        Command::Segment(args) => cmd_segment(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Kmeans(args) => cmd_kmeans(args),
        Command::Validate { attn } => cmd_validate(&attn),
    }
}

fn parse_weights(spec: &str) -> CmdResult<WeightScheme> {
    if spec == "propto" {
        return Ok(WeightScheme::Proportional);
    }
    if let Some(res) = spec.strip_prefix("only:") {
        let res = res
            .parse()
            .map_err(|_| Failure::flags(anyhow!("bad resolution in --weights {spec}")))?;
        return Ok(WeightScheme::OnlyResolution(res));
    }
    if let Some(file) = spec.strip_prefix("custom:") {
        let text = fs::read_to_string(file)
            .with_context(|| format!("reading weights file {file}"))
            .map_err(Failure::io)?;
        let raw: BTreeMap<String, f64> = serde_json::from_str(&text)
            .with_context(|| format!("weights file {file} must map resolution -> weight"))
            .map_err(Failure::validation)?;
        let mut table = BTreeMap::new();
        for (k, v) in raw {
            let res: usize = k
                .parse()
                .map_err(|_| Failure::validation(anyhow!("bad resolution key {k:?} in {file}")))?;
            table.insert(res, v);
        }
        return Ok(WeightScheme::Custom(table));
    }
    Err(Failure::flags(anyhow!(
        "--weights must be propto, only:<res> or custom:<file>, got {spec:?}"
    )))
}

fn parse_size(spec: &str) -> CmdResult<(usize, usize)> {
    let bad = || Failure::flags(anyhow!("--output-size must be HxW or N, got {spec:?}"));
    let (h, w) = match spec.split_once(['x', 'X']) {
        Some((h, w)) => (h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?),
        None => {
            let n = spec.parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn weights_label(scheme: &WeightScheme) -> Value {
    match scheme {
        WeightScheme::Proportional => json!("propto"),
        WeightScheme::OnlyResolution(w) => json!(format!("only:{w}")),
        WeightScheme::Custom(table) => json!(table
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect::<BTreeMap<_, _>>()),
    }
}

fn float_or_string(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

fn load_stack(args: &StackArgs) -> CmdResult<AttentionStack<f32>> {
    let stack = read_stack(&args.attn)?;
    if let Some(t) = args.expect_t {
        if stack.time_step != t {
            return Err(Failure::validation(anyhow!(
                "{}: stack extracted at t={}, expected t={t}",
                args.attn.display(),
                stack.time_step
            )));
        }
    }
    Ok(stack)
}

fn write_outputs(args: &StackArgs, mask: &SegmentationMask, meta: Value) -> CmdResult {
    let mask_path = PathBuf::from(format!("{}_mask.png", args.out));
    if let Some(parent) = mask_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .map_err(Failure::io)?;
    }
    render::write_mask(&mask.labels, &mask_path).map_err(Failure::io)?;
    if let Some(image) = &args.image {
        let overlay = PathBuf::from(format!("{}_overlay.png", args.out));
        render::overlay(image, &mask.labels, args.alpha, &overlay).map_err(Failure::io)?;
    }
    let meta_path = PathBuf::from(format!("{}_meta.json", args.out));
    let text = serde_json::to_string_pretty(&meta).map_err(Failure::io)? + "\n";
    fs::write(&meta_path, text)
        .with_context(|| format!("writing {}", meta_path.display()))
        .map_err(Failure::io)
}

fn cmd_segment(args: SegmentArgs) -> CmdResult {
    let stack = load_stack(&args.stack)?;
    let tau = match (args.tau, args.preset) {
        (Some(t), _) => t,
        (None, Some(Preset::Coco)) => PipelineParams::coco().merge.tau,
        (None, Some(Preset::Cityscapes)) => PipelineParams::cityscapes().merge.tau,
        (None, None) => MergeConfig::default().tau,
    };
    let params = PipelineParams {
        weights: parse_weights(&args.stack.weights)?,
        anchor_side: args.anchors,
        merge: MergeConfig::new(tau, args.iterations).map_err(Failure::flags)?,
        output_size: args
            .stack
            .output_size
            .as_deref()
            .map(parse_size)
            .transpose()?,
    };
    let (mask, report) = match args.stack.precision {
        Precision::F32 => segment_with_report(&stack, &params)?,
        Precision::F64 => segment_with_report(&stack.cast::<f64>(), &params)?,
    };
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    let meta = json!({
        "source_id": stack.source_id,
        "image_height": stack.image_height,
        "image_width": stack.image_width,
        "time_step": stack.time_step,
        "params": {
            "weights": weights_label(&params.weights),
            "anchors": params.anchor_side,
            "iterations": params.merge.iterations,
            "tau": float_or_string(params.merge.tau),
            "precision": format!("{:?}", args.stack.precision).to_lowercase(),
        },
        "resolution": report.resolution,
        "num_proposals": report.num_proposals,
        "proposal_counts": report.proposal_counts,
        "num_labels": mask.num_labels,
        "proposal_index": mask.proposal_index,
        "output_size": [mask.height(), mask.width()],
        "timings_ms": {
            "aggregate": ms(report.aggregate_time),
            "merge": ms(report.merge_time),
            "nms": ms(report.nms_time),
        },
    });
    write_outputs(&args.stack, &mask, meta)?;
    log::info!(
        "{}: {} proposals, {} labels",
        stack.source_id,
        report.num_proposals,
        mask.num_labels
    );
    Ok(())
}

fn png_files(dir: &Path) -> CmdResult<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))
        .map_err(Failure::io)?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(Failure::io)?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let gts = png_files(&args.gt)?;
    let mut preds = png_files(&args.pred)?;
    let mut pairs = Vec::new();
    let mut unpaired_gt = Vec::new();
    for (name, gt_path) in &gts {
        let pred_path = preds
            .remove(name)
            .or_else(|| preds.remove(&format!("{name}_mask")));
        let Some(pred_path) = pred_path else {
            unpaired_gt.push(name.clone());
            continue;
        };
        let gt = render::read_labels(gt_path).map_err(Failure::validation)?;
        let pred = render::read_labels(&pred_path).map_err(Failure::validation)?;
        let pred = pred.resize_nearest(gt.height, gt.width);
        pairs.push(EvalPair {
            source_id: name.clone(),
            pred,
            gt,
        });
    }
    let unpaired_pred: Vec<String> = preds.into_keys().collect();
    for name in &unpaired_gt {
        eprintln!("warning: no prediction for ground truth {name}");
    }
    for name in &unpaired_pred {
        eprintln!("warning: no ground truth for prediction {name}");
    }
    if pairs.is_empty() {
        return Err(Failure::validation(anyhow!(
            "no prediction/ground-truth pairs between {} and {}",
            args.pred.display(),
            args.gt.display()
        )));
    }
    let report = evaluate_dataset(&pairs, Some(args.ignore))?;
    let mut value = serde_json::to_value(&report).map_err(Failure::io)?;
    value["unpaired_gt"] = json!(unpaired_gt);
    value["unpaired_pred"] = json!(unpaired_pred);
    let text = serde_json::to_string_pretty(&value).map_err(Failure::io)? + "\n";
    fs::write(&args.report, text)
        .with_context(|| format!("writing {}", args.report.display()))
        .map_err(Failure::io)?;
    println!(
        "images={} acc={:.4} miou={:.4}",
        report.aggregate.images, report.aggregate.acc, report.aggregate.miou
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    if args.epsilon <= 0.0 {
        return Err(Failure::flags(anyhow!(
            "--epsilon must be > 0: with no uniform floor, cross-segment KL is dominated by clamping"
        )));
    }
    let labels = render::read_labels(&args.labels).map_err(Failure::validation)?;
    let source_id = args.source_id.clone().unwrap_or_else(|| {
        args.labels
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("synthetic")
            .to_string()
    });
    let spec = SynthSpec {
        label_map: labels,
        resolutions: args.resolutions,
        epsilon: args.epsilon,
        seed: args.seed,
        noise: args.noise,
        image_size: args.image_size,
        time_step: args.time_step,
        source_id,
    };
    let (stack, _) = generate_stack::<f32>(&spec)?;
    write_stack(&stack, &args.out)?;
    Ok(())
}

fn cmd_kmeans(args: KmeansArgs) -> CmdResult {
    let stack = load_stack(&args.stack)?;
    let k = match (&args.k, &args.k_from_gt) {
        (Some(k), _) => *k,
        (None, Some(gt)) => {
            let gt = render::read_labels(gt).map_err(Failure::validation)?;
            gt.distinct(Some(IGNORE_LABEL)).len()
        }
        (None, None) => unreachable!("clap requires one of --k / --k-from-gt"),
    };
    let config = KMeansConfig {
        k,
        seed: args.seed,
        max_iters: args.max_iters,
        restarts: args.restarts,
    };
    let scheme = parse_weights(&args.stack.weights)?;
    let (out_h, out_w) = match args.stack.output_size.as_deref() {
        Some(spec) => parse_size(spec)?,
        None => (stack.image_height, stack.image_width),
    };
    let mask = match args.stack.precision {
        Precision::F32 => kmeans_segment(&aggregate(&stack, &scheme)?, &config, out_h, out_w)?,
        Precision::F64 => kmeans_segment(
            &aggregate(&stack.cast::<f64>(), &scheme)?,
            &config,
            out_h,
            out_w,
        )?,
    };
    let meta = json!({
        "source_id": stack.source_id,
        "params": {
            "weights": weights_label(&scheme),
            "k": config.k,
            "seed": config.seed,
            "max_iters": config.max_iters,
            "restarts": config.restarts,
        },
        "num_labels": mask.num_labels,
        "output_size": [mask.height(), mask.width()],
    });
    write_outputs(&args.stack, &mask, meta)
}

fn cmd_validate(dir: &Path) -> CmdResult {
    match read_stack(dir) {
        Ok(stack) => {
            println!(
                "ok: {} layers, resolutions {:?}",
                stack.layers.len(),
                stack.resolutions()
            );
            Ok(())
        }
        Err(diffseg::Error::InvalidStack(violations)) => {
            for v in &violations {
                println!("{v}");
            }
            Err(Failure::validation(anyhow!(
                "{} violation(s) in {}",
                violations.len(),
                dir.display()
            )))
        }
        Err(other) => Err(other.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_specs_parse() {
        assert_eq!(parse_weights("propto").unwrap(), WeightScheme::Proportional);
        assert_eq!(
            parse_weights("only:32").unwrap(),
            WeightScheme::OnlyResolution(32)
        );
        assert_eq!(parse_weights("nope").unwrap_err().code, Failure::FLAGS);
        assert_eq!(parse_weights("only:x").unwrap_err().code, Failure::FLAGS);
    }

    #[test]
    fn custom_weights_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        fs::write(&path, r#"{"64": 2.0, "8": 0.5}"#).unwrap();
        let scheme = parse_weights(&format!("custom:{}", path.display())).unwrap();
        assert_eq!(scheme, WeightScheme::Custom([(64, 2.0), (8, 0.5)].into()));
    }

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("512").unwrap(), (512, 512));
        assert_eq!(parse_size("320x480").unwrap(), (320, 480));
        assert!(parse_size("0x4").is_err());
        assert!(parse_size("abc").is_err());
    }
}
