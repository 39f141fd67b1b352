use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, Scene, SceneConfig};
use super::text::{
    build_caption_prompt, caption_text, generate_reference, sample_negatives, TextSample,
    CAPTION_VARIANTS,
};
use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, COLORS};

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const TEXTS_FILE: &str = "texts.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Reference captions of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectCaptions {
    pub scene_id: String,
    pub object_id: u32,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub texts: Vec<TextSample>,
    pub captions: Vec<ObjectCaptions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_scenes: usize,
    pub first_seed: u64,
    pub scene: SceneConfig,
    pub max_negatives: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_scenes: 200,
            first_seed: 0,
            scene: SceneConfig::default(),
            max_negatives: 4,
        }
    }
}

const RECOLOR_ATTEMPTS: usize = 16;

impl Corpus {
    /// One prompt per scene and one reference per object. When an object
    /// cannot be singled out, its color is redrawn until a reference exists.
    pub fn generate(cfg: &CorpusConfig, vocab: &Vocabulary) -> Result<Self> {
        let mut corpus = Corpus::default();
        for i in 0..cfg.num_scenes {
            let seed = cfg.first_seed + i as u64;
            let mut scene = generate_scene(seed, &cfg.scene)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9));
            let mut attempt = 0;
            let references = loop {
                let results: Vec<Result<TextSample>> = scene
                    .objects
                    .iter()
                    .enumerate()
                    .map(|(idx, o)| generate_reference(&scene, o, seed + idx as u64, vocab))
                    .collect();
                let failing: Vec<usize> = results
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| matches!(r, Err(Error::Disambiguation { .. })))
                    .map(|(i, _)| i)
                    .collect();
                if failing.is_empty() || attempt == RECOLOR_ATTEMPTS {
                    break results.into_iter().collect::<Result<Vec<_>>>()?;
                }
                for idx in failing {
                    let color = COLORS[rng.random_range(0..COLORS.len())].to_string();
                    let o = &mut scene.objects[idx];
                    o.attributes[1] = color.clone();
                    o.color_name = color;
                }
                attempt += 1;
            };

            let negatives = sample_negatives(&scene, &cfg.scene.labels, cfg.max_negatives, seed);
            let prompt = build_caption_prompt(&scene, &scene.labels(), &negatives, Some(seed), vocab)?;
            corpus.texts.push(prompt);
            corpus.texts.extend(references);
            for o in &scene.objects {
                corpus.captions.push(ObjectCaptions {
                    scene_id: scene.scene_id.clone(),
                    object_id: o.id,
                    captions: (0..CAPTION_VARIANTS).map(|v| caption_text(&scene, o, v)).collect(),
                });
            }
            corpus.scenes.push(scene);
        }
        Ok(corpus)
    }

    pub fn scene(&self, scene_id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    pub fn captions_of(&self, scene_id: &str, object_id: u32) -> Option<&[String]> {
        self.captions
            .iter()
            .find(|c| c.scene_id == scene_id && c.object_id == object_id)
            .map(|c| c.captions.as_slice())
    }

    pub fn write(&self, dir: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_jsonl(dir.join(SCENES_FILE), &self.scenes)?;
        write_jsonl(dir.join(TEXTS_FILE), &self.texts)?;
        write_jsonl(dir.join(CAPTIONS_FILE), &self.captions)?;
        vocab.write(dir.join(VOCAB_FILE))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<(Self, Vocabulary)> {
        let dir = dir.as_ref();
        let corpus = Corpus {
            scenes: read_jsonl(dir.join(SCENES_FILE))?,
            texts: read_jsonl(dir.join(TEXTS_FILE))?,
            captions: read_jsonl(dir.join(CAPTIONS_FILE))?,
        };
        let vocab = Vocabulary::read(dir.join(VOCAB_FILE))?;
        Ok((corpus, vocab))
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}
