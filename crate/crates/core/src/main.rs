use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pstl::config::RunConfig;
use pstl::data::{generate_synthetic, load_dataset, save_dataset, Dataset, Modality};
use pstl::encoder::{load_checkpoint, save_checkpoint, Checkpoint};
use pstl::evaluation::{
    finetune_eval, fuse_streams, linear_eval, partial_body_eval, semi_supervised_eval, score,
    EvalOutcome, EvalReport, Occlusion,
};
use pstl::training::{pretrain, pretrain_grad_check, write_telemetry, PretrainMode};
use pstl::autodiff::Tensor;
use pstl::{Error, Result};

const EXIT_CONFIG: u8 = 3;
const EXIT_INPUT: u8 = 4;
const EXIT_NUMERIC: u8 = 5;
const EXIT_ARGUMENT: u8 = 6;
const EXIT_GRAD_CHECK: u8 = 7;

#[derive(Parser)]
#[command(name = "pstl", version, about = "Self-supervised skeleton action representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Args, Clone)]
struct EvalInputs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the modality the checkpoint was pretrained on.
    #[arg(long, value_enum)]
    modality: Option<ModalityArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by `[data]`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain an encoder and write a checkpoint plus loss telemetry.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        modality: Option<ModalityArg>,
    },
    /// Linear probe on frozen features.
    LinearEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: EvalInputs,
    },
    /// Linear probe with joints or body parts removed at test time.
    PartialEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: EvalInputs,
        #[arg(long, conflicts_with = "parts", required_unless_present = "parts")]
        joints: Option<usize>,
        #[arg(long)]
        parts: Option<usize>,
    },
    /// Train encoder and classifier end to end.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: EvalInputs,
    },
    /// Finetune on a stratified fraction of the training labels.
    SemiEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: EvalInputs,
        #[arg(long)]
        fraction: f64,
    },
    /// Sum the softmax outputs of several streams' test logits.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 2.., required = true)]
        logits: Vec<PathBuf>,
    },
    /// Finite-difference check of the pretraining gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "pstl")]
        mode: ModeArg,
    },
    /// Pretrain and linear-probe once per grid value.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        grid: Grid,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Skeletonbt,
    Pstl,
}

impl From<ModeArg> for PretrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Skeletonbt => PretrainMode::SkeletonBt,
            ModeArg::Pstl => PretrainMode::Pstl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    J,
    M,
    B,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::J => Modality::J,
            ModalityArg::M => Modality::M,
            ModalityArg::B => Modality::B,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    MaskedJoints,
    KeyFrames,
    EmbeddingDim,
}

impl Grid {
    fn name(self) -> &'static str {
        match self {
            Grid::MaskedJoints => "masked_joints",
            Grid::KeyFrames => "key_frames",
            Grid::EmbeddingDim => "embedding_dim",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: usize) {
        match self {
            Grid::MaskedJoints => cfg.mask.masked_joints = value,
            Grid::KeyFrames => cfg.mask.key_frames = value,
            Grid::EmbeddingDim => cfg.encoder.projector_dims = [value; 3],
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. }
        | Error::MalformedHeader { .. }
        | Error::PayloadShape { .. }
        | Error::NonFinite { .. }
        | Error::CheckpointMismatch(_) => EXIT_INPUT,
        Error::NumericFault { .. } => EXIT_NUMERIC,
        Error::InvalidInput(_)
        | Error::InvalidTopology(_)
        | Error::InvalidModality { .. }
        | Error::ShapeMismatch { .. }
        | Error::OutOfRange(_) => EXIT_ARGUMENT,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Creates `<out>/<hash>-s<seed>[/<sub>]` and echoes the effective config.
fn prepare_dir(cfg: &RunConfig, out_dir: &Path, sub: Option<&str>) -> Result<PathBuf> {
    let mut dir = cfg.run_dir(out_dir)?;
    if let Some(sub) = sub {
        dir = dir.join(sub);
    }
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| io_err(&path, e))?;
    Ok(dir)
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        other => Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    }
}

fn write_report(dir: &Path, outcome: &EvalOutcome) -> Result<()> {
    let txt = dir.join("report.txt");
    fs::write(&txt, outcome.report.to_string()).map_err(|e| io_err(&txt, e))?;

    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(EvalReport::CSV_HEADER).map_err(csv_err(&path))?;
    w.write_record(outcome.report.csv_row()).map_err(csv_err(&path))?;
    w.flush().map_err(|e| io_err(&path, e))?;

    let path = dir.join("logits.csv");
    let k = outcome.logits.shape[1];
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["modality".to_string(), "label".to_string()];
    header.extend((0..k).map(|c| format!("logit{c}")));
    w.write_record(&header).map_err(csv_err(&path))?;
    for (row, &y) in outcome.logits.data.chunks(k).zip(&outcome.labels) {
        let mut rec = vec![outcome.report.modality.clone(), y.to_string()];
        // shortest round-trip representation
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    println!("{}", outcome.report.csv_row().join(","));
    println!("wrote {}", dir.display());
    Ok(())
}

fn read_logits(path: &Path) -> Result<EvalOutcome> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let k = r.headers().map_err(csv_err(path))?.len().saturating_sub(2);
    if k == 0 {
        return Err(malformed("expected modality, label and logit columns".into()));
    }
    let (mut modality, mut labels, mut data) = (String::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        modality = rec[0].to_string();
        labels.push(rec[1].parse::<usize>().map_err(|e| malformed(e.to_string()))?);
        for x in rec.iter().skip(2) {
            data.push(x.parse::<f64>().map_err(|e| malformed(e.to_string()))?);
        }
    }
    if labels.is_empty() {
        return Err(malformed("no rows".into()));
    }
    let logits = Tensor::new(vec![labels.len(), k], data)?;
    let preds: Vec<usize> = logits.data.chunks(k).map(pstl::evaluation::argmax).collect();
    let mut report = score("logits", &preds, &labels, k)?;
    report.modality = modality;
    Ok(EvalOutcome {
        report,
        logits,
        labels,
    })
}

fn load_eval_inputs(inputs: &EvalInputs) -> Result<(Checkpoint, Dataset, Modality)> {
    let ckpt = load_checkpoint(&inputs.checkpoint)?;
    let data = load_dataset(&inputs.data)?;
    let modality = match (inputs.modality, ckpt.meta.get("modality")) {
        (Some(m), _) => m.into(),
        (None, Some(m)) => match m.as_str() {
            "J" => Modality::J,
            "M" => Modality::M,
            "B" => Modality::B,
            other => {
                return Err(Error::CheckpointMismatch(format!("unknown modality {other:?} in metadata")))
            }
        },
        (None, None) => Modality::J,
    };
    Ok((ckpt, data, modality))
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let dir = prepare_dir(&cfg, &common.out_dir, None)?;
            let ds = generate_synthetic(&cfg.data, cfg.seed)?;
            let path = dir.join("dataset.toml");
            save_dataset(&ds, &path)?;
            println!("wrote {} ({} sequences)", path.display(), ds.len());
        }
        Command::Pretrain {
            common,
            data,
            mode,
            modality,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg.train.mode = m.into();
            }
            if let Some(m) = modality {
                cfg.train.modality = m.into();
            }
            let ds = load_dataset(&data)?;
            let dir = prepare_dir(&cfg, &common.out_dir, None)?;
            let pcfg = cfg.pretrain_config();
            let run = pretrain(&ds, &pcfg, cfg.seed, |s| {
                if s.step % 50 == 0 {
                    eprintln!(
                        "step {:>5} epoch {:>3} lr {:.2e} L_p {:.4}",
                        s.step, s.epoch, s.lr, s.loss.total
                    );
                }
            })?;
            write_telemetry(dir.join("telemetry.csv"), &run.log)?;
            let meta = BTreeMap::from([
                ("modality".to_string(), format!("{:?}", cfg.train.modality)),
                ("mode".to_string(), cfg.train.mode.as_str().to_string()),
                ("steps".to_string(), run.log.len().to_string()),
                ("seed".to_string(), cfg.seed.to_string()),
                ("config_hash".to_string(), cfg.hash()?),
            ]);
            let path = dir.join("checkpoint.toml");
            save_checkpoint(&run.state, &meta, &path)?;
            if let (Some(first), Some(last)) = (run.log.first(), run.log.last()) {
                println!("L_p {:.4} -> {:.4} over {} steps", first.loss.total, last.loss.total, run.log.len());
            }
            println!("wrote {}", path.display());
        }
        Command::LinearEval { common, inputs } => {
            let cfg = load_config(&common)?;
            let (ckpt, ds, modality) = load_eval_inputs(&inputs)?;
            let out = linear_eval(&ckpt.state, modality, &ds, &cfg.eval, cfg.seed)?;
            let dir = prepare_dir(&cfg, &common.out_dir, Some(&format!("linear-eval-{modality:?}")))?;
            write_report(&dir, &out)?;
        }
        Command::PartialEval {
            common,
            inputs,
            joints,
            parts,
        } => {
            let cfg = load_config(&common)?;
            let occlusion = match (joints, parts) {
                (Some(n), _) => Occlusion::Joints(n),
                (None, Some(n)) => Occlusion::Parts(n),
                (None, None) => unreachable!("clap requires --joints or --parts"),
            };
            let (ckpt, ds, modality) = load_eval_inputs(&inputs)?;
            let out = partial_body_eval(&ckpt.state, modality, &ds, &cfg.eval, occlusion, cfg.seed)?;
            let sub = format!("partial-eval-{modality:?}-{}{}", occlusion.kind(), occlusion.count());
            let dir = prepare_dir(&cfg, &common.out_dir, Some(&sub))?;
            write_report(&dir, &out)?;
        }
        Command::Finetune { common, inputs } => {
            let cfg = load_config(&common)?;
            let (ckpt, ds, modality) = load_eval_inputs(&inputs)?;
            let out = finetune_eval(&ckpt.state, modality, &ds, &cfg.eval, cfg.seed)?;
            let dir = prepare_dir(&cfg, &common.out_dir, Some(&format!("finetune-{modality:?}")))?;
            write_report(&dir, &out)?;
        }
        Command::SemiEval {
            common,
            inputs,
            fraction,
        } => {
            let cfg = load_config(&common)?;
            let (ckpt, ds, modality) = load_eval_inputs(&inputs)?;
            let out = semi_supervised_eval(&ckpt.state, modality, &ds, &cfg.eval, fraction, cfg.seed)?;
            let dir = prepare_dir(&cfg, &common.out_dir, Some(&format!("semi-eval-{modality:?}-f{fraction}")))?;
            write_report(&dir, &out)?;
        }
        Command::Fuse { common, logits } => {
            let cfg = load_config(&common)?;
            let streams = logits.iter().map(|p| read_logits(p)).collect::<Result<Vec<_>>>()?;
            let mut out = fuse_streams(&streams)?;
            out.report.seed = cfg.seed;
            let dir = prepare_dir(&cfg, &common.out_dir, Some(&format!("fuse-{}", out.report.modality)))?;
            write_report(&dir, &out)?;
        }
        Command::GradCheck { common, mode } => {
            let cfg = load_config(&common)?;
            let report = pretrain_grad_check(mode.into(), cfg.seed)?;
            println!("{report}");
            println!("max relative error {:.3e}", report.max_rel_error());
            if !report.passed() {
                return Ok(EXIT_GRAD_CHECK);
            }
        }
        Command::Sweep {
            common,
            data,
            grid,
            values,
        } => {
            let base = load_config(&common)?;
            let ds = load_dataset(&data)?;
            let dir = prepare_dir(&base, &common.out_dir, Some(&format!("sweep-{}", grid.name())))?;
            let path = dir.join("sweep.csv");
            let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
            w.write_record([
                "grid", "value", "status", "config_hash", "seed", "mode", "modality",
                "masked_joints", "key_frames", "embedding_dim", "steps", "final_loss", "top1",
                "detail",
            ])
            .map_err(csv_err(&path))?;
            for &value in &values {
                let mut cfg = base.clone();
                grid.apply(&mut cfg, value);
                let hash = cfg.hash()?;
                let [_, frames, joints] = ds.shape().unwrap_or([0; 3]);
                let result = cfg.validate().and_then(|_| cfg.mask.validate(joints, frames)).and_then(|_| {
                    let point = prepare_dir(&cfg, &dir.join("points"), None)?;
                    let run = pretrain(&ds, &cfg.pretrain_config(), cfg.seed, |_| {})?;
                    write_telemetry(point.join("telemetry.csv"), &run.log)?;
                    let out = linear_eval(&run.state, cfg.train.modality, &ds, &cfg.eval, cfg.seed)?;
                    write_report(&point, &out)?;
                    Ok((run.log.len(), run.log.last().map(|s| s.loss.total), out.report.top1))
                });
                let (status, steps, loss, top1, detail) = match result {
                    Ok((steps, loss, top1)) => (
                        "ok",
                        steps.to_string(),
                        loss.map(|l| format!("{l:e}")).unwrap_or_default(),
                        format!("{top1:.6}"),
                        String::new(),
                    ),
                    Err(e @ (Error::Config(_) | Error::OutOfRange(_))) => {
                        eprintln!("{}={value}: {e}", grid.name());
                        ("invalid", String::new(), String::new(), String::new(), e.to_string())
                    }
                    Err(e) => return Err(e),
                };
                let row = [
                    grid.name().to_string(),
                    value.to_string(),
                    status.to_string(),
                    hash,
                    cfg.seed.to_string(),
                    cfg.train.mode.as_str().to_string(),
                    format!("{:?}", cfg.train.modality),
                    cfg.mask.masked_joints.to_string(),
                    cfg.mask.key_frames.to_string(),
                    cfg.encoder.embedding_dim().to_string(),
                    steps,
                    loss,
                    top1,
                    detail,
                ];
                w.write_record(&row).map_err(csv_err(&path))?;
                w.flush().map_err(|e| io_err(&path, e))?;
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
