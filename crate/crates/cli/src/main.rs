use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use groundcap::datagen::{read_jsonl, Corpus, CorpusConfig};
use groundcap::metrics::DenseGt;
use groundcap::model::GroundCap;
use groundcap::runner::{
    checkpoint, dc_report, evaluate, ground_text, head_noun_span, infer_dc, train_joint_mle, train_scst,
    train_vg_pretrain, vg_report, write_report, AdamW, CheckpointMeta, Dataset, DcOptions, DcPrediction, EpochLog,
    Scheme, Stage, Task, TrainConfig, VgPrediction,
};
use groundcap::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "groundcap", version, about = "3D visual grounding and dense captioning on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Vg,
    Dc,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Vg => Task::Vg,
            TaskArg::Dc => Task::Dc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Write a configuration file with preset values.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Corpus settings come from this config's train or val section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        /// Overrides the number of scenes.
        #[arg(long)]
        scenes: Option<usize>,
        /// Overrides the first scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train the grounding model without the caption head.
    PretrainVg {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a pretrain checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Joint MLE training from a pretrain checkpoint.
    TrainMle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config embedded in `--init`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
        scheme: Option<u8>,
    },
    /// SCST fine-tuning of the caption head.
    TrainScst {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or a prediction file, on a corpus split.
    Eval {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Score an existing JSONL prediction file instead of running the model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the model's predictions as JSONL.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        predict_labels: bool,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Ground one text, or densely caption one scene when no text is given.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        predict_labels: bool,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
}

fn load_data(dir: &Path, cfg: &TrainConfig) -> Result<(Dataset, Vocabulary)> {
    let (corpus, vocab) = Corpus::read(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    let data = Dataset::prepare(&corpus, &vocab, &cfg.model)?;
    log::info!("{}: {} scenes, {} texts", dir.display(), data.scenes.len(), data.texts.len());
    Ok((data, vocab))
}

/// Saves a resumable checkpoint after every epoch.
fn saving_hook<'a>(
    out: &'a Path,
    cfg: &'a TrainConfig,
    stage: Stage,
) -> impl FnMut(&GroundCap, &AdamW, &EpochLog) -> groundcap::Result<()> + 'a {
    move |model, opt, log| {
        let (state, step) = opt.state();
        let meta = CheckpointMeta {
            config: cfg.clone(),
            stage,
            epoch: log.epoch + 1,
            opt_step: step,
        };
        checkpoint::save(out, model, &meta, &state)
    }
}

fn config_or_embedded(path: Option<&Path>, embedded: &TrainConfig) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => embedded.clone(),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let vocab_size = Vocabulary::default().len();
    match cli.command {
        Command::InitConfig { preset, out } => {
            let cfg = match preset {
                Preset::Desk => TrainConfig::desk(vocab_size),
                Preset::Full => TrainConfig::full(vocab_size),
            };
            std::fs::write(&out, cfg.to_toml()?)?;
        }
        Command::GenData {
            out,
            config,
            split,
            scenes,
            seed,
        } => {
            let mut corpus_cfg = match config {
                Some(p) => {
                    let cfg = TrainConfig::load(p)?;
                    match split {
                        Split::Train => cfg.train_corpus,
                        Split::Val => cfg.val_corpus,
                    }
                }
                None => match split {
                    Split::Train => TrainConfig::desk(vocab_size).train_corpus,
                    Split::Val => TrainConfig::desk(vocab_size).val_corpus,
                },
            };
            if let Some(n) = scenes {
                corpus_cfg.num_scenes = n;
            }
            if let Some(s) = seed {
                corpus_cfg.first_seed = s;
            }
            write_corpus(&corpus_cfg, &out)?;
        }
        Command::PretrainVg {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let (data, _) = load_data(&data, &cfg)?;
            let resume = resume.map(checkpoint::load).transpose()?;
            let mut hook = saving_hook(&out, &cfg, Stage::Pretrain);
            let trained = train_vg_pretrain(&cfg, &data, resume, &mut hook)?;
            trained.save(&out)?;
        }
        Command::TrainMle {
            data,
            init,
            out,
            config,
            scheme,
        } => {
            let ck = checkpoint::load(&init)?;
            let mut cfg = config_or_embedded(config.as_deref(), &ck.meta.config)?;
            if let Some(s) = scheme {
                cfg.mle.scheme = Scheme::try_from(s).map_err(anyhow::Error::msg)?;
            }
            cfg.validate()?;
            let (data, _) = load_data(&data, &cfg)?;
            let mut hook = saving_hook(&out, &cfg, Stage::Mle);
            let trained = train_joint_mle(&cfg, &data, ck.model, &mut hook)?;
            trained.save(&out)?;
        }
        Command::TrainScst {
            data,
            init,
            out,
            config,
        } => {
            let ck = checkpoint::load(&init)?;
            let cfg = config_or_embedded(config.as_deref(), &ck.meta.config)?;
            let (data, vocab) = load_data(&data, &cfg)?;
            let mut hook = saving_hook(&out, &cfg, Stage::Scst);
            let trained = train_scst(&cfg, &data, &vocab, ck.model, &mut hook)?;
            trained.save(&out)?;
        }
        Command::Eval {
            task,
            data,
            checkpoint: ck_path,
            predictions,
            report,
            dump,
            predict_labels,
            tau,
        } => {
            let opts = DcOptions {
                tau,
                predict_labels,
                ..Default::default()
            };
            let result = match (ck_path, predictions) {
                (Some(p), _) => {
                    let ck = checkpoint::load(&p)?;
                    let (data, vocab) = load_data(&data, &ck.meta.config)?;
                    evaluate(&ck.model, &data, &vocab, task.into(), &opts, dump.as_deref())?
                }
                (None, Some(p)) => score_predictions(&data, &p, task.into())?,
                (None, None) => bail!("either --checkpoint or --predictions is required"),
            };
            let text = serde_json::to_string_pretty(&result)?;
            match report {
                Some(p) => write_report(p, &result)?,
                None => println!("{text}"),
            }
        }
        Command::Infer {
            checkpoint: ck_path,
            data,
            scene,
            text,
            predict_labels,
            tau,
        } => {
            let ck = checkpoint::load(&ck_path)?;
            let (data, vocab) = load_data(&data, &ck.meta.config)?;
            let prepared = data
                .scenes
                .iter()
                .find(|s| s.scene.scene_id == scene)
                .with_context(|| format!("scene {scene} is not in the corpus"))?;
            let out = match text {
                Some(t) => {
                    let ids = vocab.encode(&t)?;
                    let span = head_noun_span(&ids, &vocab)?;
                    let (aabb, score) = ground_text(&ck.model, prepared, &ids, span)?;
                    serde_json::json!({ "scene_id": scene, "text": t, "box": aabb, "score": score })
                }
                None => {
                    let opts = DcOptions {
                        tau,
                        predict_labels,
                        ..Default::default()
                    };
                    let preds = infer_dc(&ck.model, prepared, &vocab, &opts)?;
                    serde_json::json!({ "scene_id": scene, "preds": preds })
                }
            };
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(())
}

fn write_corpus(cfg: &CorpusConfig, out: &Path) -> Result<()> {
    let vocab = Vocabulary::default();
    let corpus = Corpus::generate(cfg, &vocab)?;
    corpus.write(out, &vocab)?;
    log::info!(
        "wrote {} scenes and {} texts to {}",
        corpus.scenes.len(),
        corpus.texts.len(),
        out.display()
    );
    Ok(())
}

/// Scores a prediction file; ground truth is always taken from the corpus.
fn score_predictions(dir: &Path, path: &Path, task: Task) -> Result<groundcap::runner::Report> {
    let (corpus, _) = Corpus::read(dir)?;
    match task {
        Task::Vg => {
            let mut preds: Vec<VgPrediction> = read_jsonl(path)?;
            for p in &mut preds {
                let obj = corpus
                    .scene(&p.scene_id)
                    .and_then(|s| s.object(p.target_id))
                    .with_context(|| format!("unknown target {} in {}", p.target_id, p.scene_id))?;
                p.gt = obj.aabb();
            }
            Ok(vg_report(&preds)?)
        }
        Task::Dc => {
            let mut preds: Vec<DcPrediction> = read_jsonl(path)?;
            for p in &mut preds {
                let scene = corpus
                    .scene(&p.scene_id)
                    .with_context(|| format!("unknown scene {}", p.scene_id))?;
                p.scene.gts = scene
                    .objects
                    .iter()
                    .map(|o| DenseGt {
                        aabb: o.aabb(),
                        references: corpus.captions_of(&scene.scene_id, o.id).unwrap_or(&[]).to_vec(),
                    })
                    .collect();
            }
            Ok(dc_report(&preds)?)
        }
    }
}
