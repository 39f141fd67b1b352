//! Corpus preprocessing: rendered clouds, grouping tables and loss targets.

use std::collections::HashMap;
use std::ops::Range;

use crate::datagen::{render_point_cloud, Corpus, Scene, TextKind, TextSample};
use crate::error::{Error, Result};
use crate::losses::{kps_targets, TargetObject};
use crate::metrics::Aabb;
use crate::model::{ModelConfig, SceneGeometry};
use crate::vocab::Vocabulary;

pub struct PreparedScene {
    pub scene: Scene,
    pub geometry: SceneGeometry,
    /// KPS targets over the visual tokens.
    pub kps: Vec<f64>,
    /// Encoded reference captions per object id.
    pub captions: HashMap<u32, Vec<Vec<u32>>>,
    /// Caption strings per object id, for reward and evaluation.
    pub caption_text: HashMap<u32, Vec<String>>,
}

pub struct PreparedText {
    pub scene: usize,
    pub sample: TextSample,
    pub targets: Vec<TargetObject>,
}

impl PreparedText {
    pub fn kind(&self) -> TextKind {
        self.sample.kind
    }
}

pub struct Dataset {
    pub scenes: Vec<PreparedScene>,
    pub texts: Vec<PreparedText>,
    /// Text indices per scene.
    pub by_scene: Vec<Vec<usize>>,
}

fn targets_of(scene: &Scene, sample: &TextSample) -> Result<Vec<TargetObject>> {
    sample
        .referenced_objects()
        .into_iter()
        .map(|id| {
            let o = scene
                .object(id)
                .ok_or_else(|| Error::config(format!("text names missing object {id} in {}", scene.scene_id)))?;
            let span: Range<usize> = sample.span_of(id).ok_or(Error::EmptySpan)?;
            Ok(TargetObject {
                aabb: o.aabb(),
                span,
                object_id: id,
            })
        })
        .collect()
}

impl Dataset {
    pub fn prepare(corpus: &Corpus, vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Self> {
        if vocab.len() != cfg.vocab_size {
            return Err(Error::VocabularyMismatch(format!(
                "corpus has {} tokens, model expects {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        let mut scenes = Vec::with_capacity(corpus.scenes.len());
        let mut index = HashMap::new();
        for scene in &corpus.scenes {
            let cloud = render_point_cloud(scene, cfg.num_points, scene.seed);
            let geometry = SceneGeometry::prepare(&cloud, scene.extent, cfg)?;
            let boxes: Vec<Aabb> = scene.objects.iter().map(|o| o.aabb()).collect();
            let kps = kps_targets(&geometry.token_xyz, &boxes);
            let mut captions = HashMap::new();
            let mut caption_text = HashMap::new();
            for o in &scene.objects {
                let refs = corpus.captions_of(&scene.scene_id, o.id).unwrap_or(&[]).to_vec();
                let ids = refs.iter().map(|c| vocab.encode(c)).collect::<Result<Vec<_>>>()?;
                captions.insert(o.id, ids);
                caption_text.insert(o.id, refs);
            }
            index.insert(scene.scene_id.clone(), scenes.len());
            scenes.push(PreparedScene {
                scene: scene.clone(),
                geometry,
                kps,
                captions,
                caption_text,
            });
        }
        let mut texts = Vec::with_capacity(corpus.texts.len());
        let mut by_scene = vec![Vec::new(); scenes.len()];
        for sample in &corpus.texts {
            if let Some(&bad) = sample.token_ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(Error::VocabularyMismatch(format!("token id {bad} out of range")));
            }
            let &s = index
                .get(&sample.scene_id)
                .ok_or_else(|| Error::config(format!("text for unknown scene {}", sample.scene_id)))?;
            let targets = targets_of(&scenes[s].scene, sample)?;
            if targets.len() > cfg.num_queries {
                return Err(Error::TooManyTargets {
                    gts: targets.len(),
                    queries: cfg.num_queries,
                });
            }
            by_scene[s].push(texts.len());
            texts.push(PreparedText {
                scene: s,
                sample: sample.clone(),
                targets,
            });
        }
        Ok(Self { scenes, texts, by_scene })
    }

    /// Texts of `scenes` whose kind passes `keep`, in corpus order.
    pub fn texts_of(&self, scenes: &[usize], keep: impl Fn(TextKind) -> bool) -> Vec<usize> {
        scenes
            .iter()
            .flat_map(|&s| self.by_scene[s].iter().copied())
            .filter(|&t| keep(self.texts[t].kind()))
            .collect()
    }

    /// Every caption reference set, for CIDEr-D document frequencies.
    pub fn reference_sets(&self) -> Vec<Vec<String>> {
        self.scenes
            .iter()
            .flat_map(|s| s.scene.objects.iter().map(|o| s.caption_text[&o.id].clone()))
            .collect()
    }
}
