//! Desk-scale training runs for the directional criteria.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use groundcap::datagen::{generate_reference, Corpus};
use groundcap::metrics::iou_aabb;
use groundcap::model::GroundCap;
use groundcap::runner::{
    checkpoint, evaluate, no_hook, predict_vg, train_joint_mle, train_scst, train_vg_pretrain, Dataset, DcOptions,
    Report, Scheme, Task, TrainConfig, Trained,
};
use groundcap::vocab::Vocabulary;

/// Wall-clock budget per training run.
pub const RUN_BUDGET_SECS: f64 = 1800.0;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

#[derive(Serialize, Deserialize)]
struct RunRecord {
    seconds: f64,
    vg: Report,
    dc: Report,
}

struct Env {
    dir: PathBuf,
    vocab: Vocabulary,
    cfg: TrainConfig,
    train: Dataset,
    val: Dataset,
}

impl Env {
    fn new() -> Self {
        let dir = std::env::var_os("GROUNDCAP_ACCEPT_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
        std::fs::create_dir_all(&dir).unwrap();
        let vocab = Vocabulary::default();
        let cfg = TrainConfig::desk(vocab.len());
        let train = Corpus::generate(&cfg.train_corpus, &vocab).unwrap();
        let val = Corpus::generate(&cfg.val_corpus, &vocab).unwrap();
        Self {
            train: Dataset::prepare(&train, &vocab, &cfg.model).unwrap(),
            val: Dataset::prepare(&val, &vocab, &cfg.model).unwrap(),
            dir,
            vocab,
            cfg,
        }
    }

    /// Trains (or reloads a finished run of) `name`, then evaluates it on the
    /// held-out split.
    fn stage(&self, name: &str, cfg: &TrainConfig, train: impl FnOnce() -> Trained) -> (GroundCap, RunRecord) {
        let ck = self.dir.join(format!("{name}.safetensors"));
        let rec = self.dir.join(format!("{name}.json"));
        if let (Ok(c), Ok(r)) = (checkpoint::load(&ck), std::fs::read_to_string(&rec)) {
            if &c.meta.config == cfg {
                eprintln!("  reusing {}", ck.display());
                return (c.model, serde_json::from_str(&r).unwrap());
            }
        }
        let t = Instant::now();
        let trained = train();
        let seconds = t.elapsed().as_secs_f64();
        trained.save(&ck).unwrap();
        let record = RunRecord {
            seconds,
            vg: self.eval(&trained.model, Task::Vg),
            dc: self.eval(&trained.model, Task::Dc),
        };
        std::fs::write(&rec, serde_json::to_string_pretty(&record).unwrap()).unwrap();
        eprintln!("  {name}: {seconds:.0}s vg {:?} dc {:?}", record.vg, record.dc);
        (trained.model, record)
    }

    /// Fresh copy of a finished stage's weights.
    fn load(&self, name: &str) -> GroundCap {
        checkpoint::load(self.dir.join(format!("{name}.safetensors"))).unwrap().model
    }

    fn eval(&self, model: &GroundCap, task: Task) -> Report {
        evaluate(model, &self.val, &self.vocab, task, &DcOptions::default(), None).unwrap()
    }

    /// IoU of the grounded box on single-object copies of the first `n` held-out scenes.
    fn single_object_ious(&self, model: &GroundCap, n: usize) -> Vec<f64> {
        let mut corpus = Corpus::default();
        for (i, p) in self.val.scenes.iter().take(n).enumerate() {
            let mut scene = p.scene.clone();
            scene.objects.truncate(1);
            let text = generate_reference(&scene, &scene.objects[0], i as u64, &self.vocab).unwrap();
            corpus.scenes.push(scene);
            corpus.texts.push(text);
        }
        let data = Dataset::prepare(&corpus, &self.vocab, &self.cfg.model).unwrap();
        predict_vg(model, &data).unwrap().iter().map(|p| iou_aabb(&p.pred, &p.gt).unwrap()).collect()
    }

    fn with_scheme(&self, s: Scheme) -> TrainConfig {
        let mut c = self.cfg.clone();
        c.mle.scheme = s;
        c
    }
}

fn in_budget(rec: &RunRecord) -> bool {
    rec.seconds <= RUN_BUDGET_SECS
}

fn path_note(dir: &Path) -> String {
    format!("artifacts in {}", dir.display())
}

/// Runs pretrain, joint MLE (schemes 4 and 5) and SCST, emitting the four
/// directional verdicts. Returns every evaluation report produced.
pub fn run_all(emit: &mut dyn FnMut(&'static str, Verdict)) -> Vec<(String, Report)> {
    let env = Env::new();
    eprintln!("  training runs: {}", path_note(&env.dir));
    let mut reports = Vec::new();

    let (pre, pre_rec) = env.stage("pretrain", &env.cfg, || train_vg_pretrain(&env.cfg, &env.train, None, &mut no_hook()).unwrap());
    let acc = pre_rec.vg["acc@0.5/overall"];
    emit(
        "training (a) pretrain Acc@0.5 >= 0.85",
        Verdict {
            pass: acc >= 0.85 && in_budget(&pre_rec),
            detail: format!("Acc@0.5 {acc:.3}, Acc@0.25 {:.3}, {:.0}s", pre_rec.vg["acc@0.25/overall"], pre_rec.seconds),
        },
    );

    let ious = env.single_object_ious(&pre, 10);
    let worst = ious.iter().cloned().fold(f64::INFINITY, f64::min);
    emit(
        "training (a') one-object scene grounding IoU >= 0.5",
        Verdict {
            pass: worst >= 0.5,
            detail: format!("worst IoU {worst:.3} over {} single-object scenes", ious.len()),
        },
    );

    let cfg4 = env.with_scheme(Scheme::JointSingleLr);
    let cfg5 = env.with_scheme(Scheme::JointTwoLr);
    let (_, m4) = env.stage("mle_scheme4", &cfg4, || {
        train_joint_mle(&cfg4, &env.train, env.load("pretrain"), &mut no_hook()).unwrap()
    });
    let (_, m5) = env.stage("mle_scheme5", &cfg5, || {
        train_joint_mle(&cfg5, &env.train, env.load("pretrain"), &mut no_hook()).unwrap()
    });
    let (a4, a5) = (m4.vg["acc@0.25/overall"], m5.vg["acc@0.25/overall"]);
    let (c4, c5) = (m4.dc["cider@0.5"], m5.dc["cider@0.5"]);
    emit(
        "training (b) scheme 5 >= scheme 4",
        Verdict {
            pass: a5 >= a4 && c5 >= c4 && in_budget(&m4) && in_budget(&m5),
            detail: format!(
                "Acc@0.25 {a5:.3} vs {a4:.3}, CIDEr@0.5 {c5:.4} vs {c4:.4}, {:.0}s / {:.0}s",
                m5.seconds, m4.seconds
            ),
        },
    );

    let (_, sc) = env.stage("scst", &cfg5, || {
        train_scst(&cfg5, &env.train, &env.vocab, env.load("mle_scheme5"), &mut no_hook()).unwrap()
    });
    let (cm, cs) = (m5.dc["cider@0.5"], sc.dc["cider@0.5"]);
    emit(
        "training (c) SCST CIDEr@0.5 >= MLE",
        Verdict {
            pass: cs >= cm && in_budget(&sc),
            detail: format!("CIDEr@0.5 {cs:.4} after SCST vs {cm:.4} after MLE, {:.0}s", sc.seconds),
        },
    );

    let recall = m5.dc["recall@0.5"];
    emit(
        "training (d) prompt-as-detector recall@0.5 >= 0.8",
        Verdict {
            pass: recall >= 0.8,
            detail: format!("recall@0.5 {recall:.3} (scheme 5 model, positive-label prompt)"),
        },
    );

    for (name, rec) in [("pretrain", pre_rec), ("mle_scheme4", m4), ("mle_scheme5", m5), ("scst", sc)] {
        reports.push((format!("{name}/vg"), rec.vg));
        reports.push((format!("{name}/dc"), rec.dc));
    }
    reports
}

