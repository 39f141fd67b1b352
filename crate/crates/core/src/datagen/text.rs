use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{ObjectSpec, Scene};
use crate::error::{Error, Result};
use crate::vocab::{self, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextKind {
    Reference,
    Prompt,
}

/// Whether the referent is the only object of its class in the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Unique,
    Multiple,
}

/// Half-open token range `[start, end)` over `token_ids` (SOS sits at index 0).
/// `object_id == None` marks a negative prompt label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub object_id: Option<u32>,
}

impl Span {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSample {
    pub scene_id: String,
    pub raw_text: String,
    pub token_ids: Vec<u32>,
    pub span_map: Vec<Span>,
    pub kind: TextKind,
    pub target_id: Option<u32>,
    pub stratum: Option<Stratum>,
}

impl TextSample {
    /// Token range for `object_id`, if the object is mentioned.
    pub fn span_of(&self, object_id: u32) -> Option<std::ops::Range<usize>> {
        self.span_map
            .iter()
            .find(|s| s.object_id == Some(object_id))
            .map(Span::range)
    }

    /// Object ids the text asks the model to localize.
    pub fn referenced_objects(&self) -> Vec<u32> {
        match self.kind {
            TextKind::Reference => self.target_id.into_iter().collect(),
            TextKind::Prompt => self.span_map.iter().filter_map(|s| s.object_id).collect(),
        }
    }

    pub fn validate(&self) -> bool {
        let in_range = self
            .span_map
            .iter()
            .all(|s| s.start < s.end && s.end <= self.token_ids.len());
        let targets = match (self.kind, self.target_id) {
            (TextKind::Reference, Some(t)) => {
                self.span_map.iter().filter(|s| s.object_id == Some(t)).count() == 1
            }
            (TextKind::Reference, None) => false,
            (TextKind::Prompt, _) => true,
        };
        in_range && targets
    }
}

const RELATION_PHRASES: [&str; 3] = ["near", "next to", "close to"];

/// Predicates a referring expression can use to single out an object.
#[derive(Debug, Clone, PartialEq)]
struct Description<'a> {
    class: &'a str,
    size: Option<&'a str>,
    color: Option<&'a str>,
    relation: Option<&'a str>,
}

impl Description<'_> {
    fn holds(&self, scene: &Scene, idx: usize) -> bool {
        let o = &scene.objects[idx];
        o.class_label == self.class
            && self.size.is_none_or(|s| o.size_word() == s)
            && self.color.is_none_or(|c| o.color_name == c)
            && self.relation.is_none_or(|r| {
                scene
                    .nearest_neighbor(idx)
                    .is_some_and(|j| scene.objects[j].class_label == r)
            })
    }

    fn satisfiers(&self, scene: &Scene) -> Vec<usize> {
        (0..scene.objects.len()).filter(|&i| self.holds(scene, i)).collect()
    }
}

/// Count of objects satisfying the predicates encoded in a reference text,
/// re-parsed from the words so it checks the emitted utterance itself.
pub fn reference_satisfiers(scene: &Scene, text: &str) -> Vec<u32> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let class = words.iter().copied().find(|w| vocab::is_label(w));
    let Some(class) = class else {
        return Vec::new();
    };
    let head = words.iter().position(|w| *w == class).unwrap();
    let size = words[..head].iter().copied().find(|w| vocab::SIZE_WORDS.contains(w));
    let color = words[..head].iter().copied().find(|w| vocab::COLORS.contains(w));
    let relation = words[head + 1..].iter().copied().find(|w| vocab::is_label(w));
    let d = Description {
        class,
        size,
        color,
        relation,
    };
    d.satisfiers(scene)
        .into_iter()
        .map(|i| scene.objects[i].id)
        .collect()
}

/// Templated referring expression for `target`, with the head noun as the target span.
pub fn generate_reference(
    scene: &Scene,
    target: &ObjectSpec,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<TextSample> {
    let idx = scene
        .objects
        .iter()
        .position(|o| o.id == target.id)
        .ok_or_else(|| Error::config(format!("object {} is not in the scene", target.id)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = target.class_label.as_str();
    let unique = scene.count_class(class) == 1;

    let description = if unique {
        Description {
            class,
            size: None,
            color: None,
            relation: None,
        }
    } else {
        let relation = scene
            .nearest_neighbor(idx)
            .map(|j| scene.objects[j].class_label.as_str());
        let (size, color) = (Some(target.size_word()), Some(target.color_name.as_str()));
        [(None, color), (size, None), (size, color)]
            .into_iter()
            .map(|(size, color)| Description {
                class,
                size,
                color,
                relation,
            })
            .find(|d| d.satisfiers(scene) == [idx])
            .ok_or_else(|| Error::Disambiguation {
                scene_id: scene.scene_id.clone(),
                object_id: target.id,
            })?
    };

    let mut words: Vec<&str> = vec!["the"];
    words.extend(description.size);
    words.extend(description.color);
    let head = words.len();
    words.push(class);
    if let Some(rel) = description.relation {
        let phrase = RELATION_PHRASES[rng.random_range(0..RELATION_PHRASES.len())];
        words.extend(phrase.split(' '));
        words.push("the");
        words.push(rel);
    }
    words.push(".");
    let raw_text = words.join(" ");
    let token_ids = vocab.encode(&raw_text)?;
    // +1 for the leading SOS
    let span = Span {
        start: head + 1,
        end: head + 2,
        object_id: Some(target.id),
    };
    Ok(TextSample {
        scene_id: scene.scene_id.clone(),
        raw_text,
        token_ids,
        span_map: vec![span],
        kind: TextKind::Reference,
        target_id: Some(target.id),
        stratum: Some(if unique {
            Stratum::Unique
        } else {
            Stratum::Multiple
        }),
    })
}

pub const MAX_CAPTION_TOKENS: usize = 30;
pub const CAPTION_VARIANTS: u64 = 3;

/// Ground-truth caption text; `seed` selects the template variant.
pub fn caption_text(scene: &Scene, object: &ObjectSpec, seed: u64) -> String {
    let idx = scene.objects.iter().position(|o| o.id == object.id);
    let neighbor = idx
        .and_then(|i| scene.nearest_neighbor(i))
        .map(|j| scene.objects[j].class_label.as_str());
    let (class, color, size) = (
        object.class_label.as_str(),
        object.color_name.as_str(),
        object.size_word(),
    );
    match (seed % CAPTION_VARIANTS, neighbor) {
        (0, Some(n)) => format!("this is a {size} {color} {class} . it is next to the {n} ."),
        (0, None) => format!("this is a {size} {color} {class} ."),
        (1, Some(n)) => format!("a {color} {class} . it is {size} and close to the {n} ."),
        (1, None) => format!("a {color} {class} . it is {size} ."),
        (_, Some(n)) => format!("the {class} is {color} and {size} . it is near the {n} ."),
        (_, None) => format!("the {class} is {color} and {size} ."),
    }
}

/// Caption token ids wrapped in SOS/EOS.
pub fn generate_caption(
    scene: &Scene,
    object: &ObjectSpec,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<Vec<u32>> {
    let ids = vocab.encode(&caption_text(scene, object, seed))?;
    debug_assert!(ids.len() <= MAX_CAPTION_TOKENS);
    Ok(ids)
}

/// Detection prompt such as `"cabinet . bed . chair . sofa ."`. Positive spans
/// map to every object of that class; negative spans map to `None`.
/// `shuffle_seed = None` keeps positives-then-negatives order.
pub fn build_caption_prompt(
    scene: &Scene,
    positives: &[String],
    negatives: &[String],
    shuffle_seed: Option<u64>,
    vocab: &Vocabulary,
) -> Result<TextSample> {
    for label in positives.iter().chain(negatives) {
        if !vocab::is_label(label) {
            return Err(Error::UnknownLabel(label.clone()));
        }
    }
    if let Some(both) = positives.iter().find(|p| negatives.contains(p)) {
        return Err(Error::config(format!("label `{both}` is both positive and negative")));
    }
    let mut labels: Vec<(&String, bool)> = positives
        .iter()
        .map(|l| (l, true))
        .chain(negatives.iter().map(|l| (l, false)))
        .collect();
    if let Some(seed) = shuffle_seed {
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    let mut words: Vec<&str> = Vec::new();
    let mut span_map = Vec::new();
    for (label, positive) in labels {
        let start = words.len() + 1;
        words.push(label);
        words.push(".");
        if positive {
            for o in scene.objects.iter().filter(|o| &o.class_label == label) {
                span_map.push(Span {
                    start,
                    end: start + 1,
                    object_id: Some(o.id),
                });
            }
        } else {
            span_map.push(Span {
                start,
                end: start + 1,
                object_id: None,
            });
        }
    }
    let raw_text = words.join(" ");
    Ok(TextSample {
        scene_id: scene.scene_id.clone(),
        token_ids: vocab.encode(&raw_text)?,
        raw_text,
        span_map,
        kind: TextKind::Prompt,
        target_id: None,
        stratum: None,
    })
}

/// Uniformly draws 0..=`max_negatives` labels absent from the scene.
pub fn sample_negatives(scene: &Scene, labels: &[String], max_negatives: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let present = scene.labels();
    let mut absent: Vec<String> = labels.iter().filter(|l| !present.contains(l)).cloned().collect();
    absent.shuffle(&mut rng);
    let count = rng.random_range(0..=max_negatives).min(absent.len());
    absent.truncate(count);
    absent
}
