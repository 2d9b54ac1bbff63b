use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tlp_core::attention::train_attention;
use tlp_core::config;
use tlp_core::container::{
    load_attention, load_detector, load_proposer, save_attention, save_detector, save_proposer,
};
use tlp_core::data::{write_synthetic_dataset, DiskDataset, SceneSource};
use tlp_core::detector::{detect_pyramid, train_detector};
use tlp_core::eval::{evaluate, EvalImage, EvalReport};
use tlp_core::formats::{
    detection_lines, detections_by_image, proposal_lines, proposals_by_image, read_jsonl, write_atomic,
    write_jsonl, DetectionLine, ProposalLine,
};
use tlp_core::parallel::ordered_map;
use tlp_core::pipeline::{ablate_heads, PipelineConfig, ABLATION_HEADS};
use tlp_core::proposer::{propose_pyramid, train_proposer};
use tlp_core::pyramid::{build_pyramid, SyntheticBackbone};
use tlp_core::{Error, Result, StateVocabulary};

const ATTENTION_FILE: &str = "attention.tlpm";
const PROPOSER_FILE: &str = "proposer.tlpm";
const DETECTOR_FILE: &str = "detector.tlpm";

/// Attention-gated traffic light proposals, detection and evaluation.
#[derive(Parser)]
#[command(name = "tlp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for scene generation and every training stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Attended-window budget per image.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and test splits.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the per-level attention heads.
    TrainAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the window scorer and mask head (needs the attention model).
    TrainProposer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory holding the upstream models.
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the model directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the detection head (needs the attention and proposer models).
    TrainDetector {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write ranked proposals for every image as JSON lines.
    Propose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write detections for every image as JSON lines.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections (and optionally proposals) against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        proposals: Option<PathBuf>,
        /// Matching IoU threshold.
        #[arg(long)]
        iou: Option<f64>,
        /// Directory for metrics.json, metrics.txt and pr.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain 2x1024, 4x2048 and 5x2048 detection heads on the desk benchmark.
    AblateHead {
        #[command(flatten)]
        common: Common,
        /// Reuse attention and proposer models from this directory.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PR-curve CSV and SVG for a detections file.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_config(common: &Common) -> Result<PipelineConfig> {
    let mut c = match &common.config {
        Some(p) => config::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.set_seed(seed);
    }
    if let Some(b) = common.budget {
        c.set_budget(b);
    }
    c.validate()?;
    Ok(c)
}

fn require(dir: &Path, file: &str) -> Result<PathBuf> {
    let p = dir.join(file);
    if !p.is_file() {
        return Err(Error::Config(format!(
            "upstream model {} is missing; train the earlier stage first",
            p.display()
        )));
    }
    Ok(p)
}

fn open_dataset(path: &Path, vocab: &StateVocabulary) -> Result<DiskDataset<f64>> {
    if !path.is_file() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    DiskDataset::open(path, vocab)
}

fn eval_report(
    dataset: &Path,
    detections: &Path,
    proposals: Option<&Path>,
    iou: Option<f64>,
    c: &PipelineConfig,
    vocab: &StateVocabulary,
) -> Result<EvalReport> {
    let ds = open_dataset(dataset, vocab)?;
    let ids: Vec<String> = ds.records().iter().map(|r| r.id.clone()).collect();
    let dets = detections_by_image::<f64>(&read_jsonl::<DetectionLine>(detections)?, &ids, vocab)?;
    let props = match proposals {
        Some(p) => Some(proposals_by_image::<f64>(&read_jsonl::<ProposalLine>(p)?, &ids)?),
        None => None,
    };
    let images: Vec<EvalImage<'_, f64>> = ds
        .records()
        .iter()
        .zip(&dets)
        .map(|(r, d)| EvalImage { width: r.width, height: r.height, annotations: &r.annotations, detections: d })
        .collect();
    evaluate(&images, props.as_deref(), vocab, &c.budgets, iou.unwrap_or(c.iou))
}

fn run(cli: Cli) -> Result<()> {
    let vocab = StateVocabulary::default();
    let backbone = SyntheticBackbone::default();
    match cli.command {
        Command::Synth { common, out } => {
            let c = run_config(&common)?;
            let train = write_synthetic_dataset(&c.synth, &vocab, 0, c.train_scenes, &out.join("train"))?;
            let test =
                write_synthetic_dataset(&c.synth, &vocab, c.train_scenes as u64, c.test_scenes, &out.join("test"))?;
            println!("wrote {} train and {} test scenes under {}", train.len(), test.len(), out.display());
        }
        Command::TrainAttention { common, dataset, out } => {
            let c = run_config(&common)?;
            let ds = open_dataset(&dataset, &vocab)?;
            let (model, log) = train_attention(&ds, &backbone, &c.attention)?;
            save_attention(&out.join(ATTENTION_FILE), &model)?;
            println!("attention: {} epochs, final loss {:.6}", log.epoch_losses.len(), last(&log.epoch_losses));
        }
        Command::TrainProposer { common, dataset, model, out } => {
            let c = run_config(&common)?;
            let attention = load_attention::<f64>(&require(&model, ATTENTION_FILE)?)?;
            let ds = open_dataset(&dataset, &vocab)?;
            let (prop, log) = train_proposer(&ds, &backbone, &attention, &c.proposer)?;
            save_proposer(&out.unwrap_or(model).join(PROPOSER_FILE), &prop)?;
            println!("proposer: {} epochs, final loss {:.6}", log.epoch_losses.len(), last(&log.epoch_losses));
        }
        Command::TrainDetector { common, dataset, model, out } => {
            let c = run_config(&common)?;
            let attention = load_attention::<f64>(&require(&model, ATTENTION_FILE)?)?;
            let proposer = load_proposer::<f64>(&require(&model, PROPOSER_FILE)?)?;
            let ds = open_dataset(&dataset, &vocab)?;
            let (det, log) = train_detector(&ds, &backbone, &attention, &proposer, vocab.len(), &c.detector)?;
            save_detector(&out.unwrap_or(model).join(DETECTOR_FILE), &det)?;
            println!("detector: {} epochs, final loss {:.6}", log.epoch_losses.len(), last(&log.epoch_losses));
        }
        Command::Propose { common, dataset, model, out } => {
            let c = run_config(&common)?;
            let attention = load_attention::<f64>(&require(&model, ATTENTION_FILE)?)?;
            let proposer = load_proposer::<f64>(&require(&model, PROPOSER_FILE)?)?;
            let ds = open_dataset(&dataset, &vocab)?;
            let inference = c.inference();
            let per_image = ordered_map(ds.len(), |i| -> Result<Vec<ProposalLine>> {
                let pyramid = build_pyramid(&ds.image(i)?, &backbone)?;
                let props = propose_pyramid(&pyramid, &attention, &proposer, &inference)?;
                Ok(proposal_lines(&ds.records()[i].id, &props))
            });
            let lines: Vec<ProposalLine> = per_image.into_iter().collect::<Result<Vec<_>>>()?.concat();
            let path = out.join("proposals.jsonl");
            write_jsonl(&path, &lines)?;
            println!("wrote {} proposals to {}", lines.len(), path.display());
        }
        Command::Detect { common, dataset, model, out } => {
            let c = run_config(&common)?;
            let attention = load_attention::<f64>(&require(&model, ATTENTION_FILE)?)?;
            let proposer = load_proposer::<f64>(&require(&model, PROPOSER_FILE)?)?;
            let detector = load_detector::<f64>(&require(&model, DETECTOR_FILE)?)?;
            let ds = open_dataset(&dataset, &vocab)?;
            let per_image = ordered_map(ds.len(), |i| -> Result<Vec<DetectionLine>> {
                let pyramid = build_pyramid(&ds.image(i)?, &backbone)?;
                let dets = detect_pyramid(&pyramid, &attention, &proposer, &detector, &c.detector.detect)?;
                Ok(detection_lines(&ds.records()[i].id, &dets, &vocab))
            });
            let lines: Vec<DetectionLine> = per_image.into_iter().collect::<Result<Vec<_>>>()?.concat();
            let path = out.join("detections.jsonl");
            write_jsonl(&path, &lines)?;
            println!("wrote {} detections to {}", lines.len(), path.display());
        }
        Command::Eval { common, dataset, detections, proposals, iou, out } => {
            let c = run_config(&common)?;
            let report = eval_report(&dataset, &detections, proposals.as_deref(), iou, &c, &vocab)?;
            let table = report.to_table();
            if let Some(dir) = out {
                write_atomic(&dir.join("metrics.json"), report.to_json()?.as_bytes())?;
                write_atomic(&dir.join("metrics.txt"), table.as_bytes())?;
                write_atomic(&dir.join("pr.csv"), report.pr_csv().as_bytes())?;
            }
            print!("{table}");
        }
        Command::AblateHead { common, model, out } => {
            let c = run_config(&common)?;
            let train = c.train_split::<f64>(&vocab)?;
            let test = c.test_split::<f64>(&vocab)?;
            let (attention, proposer) = match model {
                Some(dir) => (
                    load_attention::<f64>(&require(&dir, ATTENTION_FILE)?)?,
                    load_proposer::<f64>(&require(&dir, PROPOSER_FILE)?)?,
                ),
                None => {
                    let (a, _) = train_attention(&train, &backbone, &c.attention)?;
                    let (p, _) = train_proposer(&train, &backbone, &a, &c.proposer)?;
                    (a, p)
                }
            };
            let table = ablate_heads(&train, &test, &backbone, &attention, &proposer, &vocab, &ABLATION_HEADS, &c)?;
            write_atomic(&out.join("ablation.json"), table.to_json()?.as_bytes())?;
            write_atomic(&out.join("ablation.txt"), table.to_table().as_bytes())?;
            print!("{}", table.to_table());
        }
        Command::Report { common, dataset, detections, iou, out } => {
            let c = run_config(&common)?;
            let report = eval_report(&dataset, &detections, None, iou, &c, &vocab)?;
            write_atomic(&out.join("pr.csv"), report.pr_csv().as_bytes())?;
            write_atomic(&out.join("pr.svg"), report.pr_svg().as_bytes())?;
            println!("wrote {} and {}", out.join("pr.csv").display(), out.join("pr.svg").display());
        }
    }
    Ok(())
}

fn last(v: &[f64]) -> f64 {
    v.last().copied().unwrap_or(f64::NAN)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
