//! Model definition and execution: configuration, the static computation
//! graph, parameter storage, forward evaluation (plain and taped) and
//! detection decoding.

pub mod config;
pub mod decode;
pub mod exec;
pub mod graph;
pub mod model;

pub use config::{BackboneKind, ModelConfig, ANCHORS_PER_CELL, DET_STRIDES, SEG_CLASSES};
pub use decode::{decode_box, decode_detections, encode_box, iou_cxcywh, nms, Detection};
pub use exec::{taped_forward, Fused, Pyramid, RawPredictions, TapedForward};
pub use graph::{build_graph, Graph, Node, NodeOp, ParamSpec};
pub use model::Model;
