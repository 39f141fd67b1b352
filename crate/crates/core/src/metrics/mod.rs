//! Box geometry, grounding accuracy and caption metrics.

mod boxes;
mod dense;
mod grounding;
mod language;

pub use boxes::{giou_aabb, iou_aabb, Aabb};
pub use dense::{detection_recall, m_at_k_iou, nms, CaptionMetric, DenseGt, DensePred, DenseScene};
pub use grounding::{acc_at_iou, EvalRecord, SampleOutcome, IOU_THRESHOLDS};
pub use language::{bleu4, cider_d, rouge_l, tokenize, CiderD};
