//! Procedural scenes, referring expressions, captions and detection prompts.

mod corpus;
mod scene;
mod text;

pub use corpus::{
    read_jsonl, write_jsonl, Corpus, CorpusConfig, ObjectCaptions, CAPTIONS_FILE, SCENES_FILE,
    TEXTS_FILE, VOCAB_FILE,
};
pub use scene::{
    color_rgb, generate_scene, nearest_color, render_point_cloud, scene_id, size_prior,
    ObjectSpec, PointCloud, Scene, SceneConfig, MIN_POINTS_PER_OBJECT,
};
pub use text::{
    build_caption_prompt, caption_text, generate_caption, generate_reference,
    reference_satisfiers, sample_negatives, Span, Stratum, TextKind, TextSample,
    CAPTION_VARIANTS, MAX_CAPTION_TOKENS,
};
