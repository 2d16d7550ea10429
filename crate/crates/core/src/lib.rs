//! Evidence-driven agentic multimodal reranking.
//!
//! The crate is organised along the retrieval pipeline:
//!
//! - [`store`]: candidate/query manifests, the binary embedding format and
//!   exhaustive cosine top-K retrieval (the coarse stage).
//! - [`protocol`]: the tagged turn language spoken by the policy, rank-list
//!   normalisation and prompt rendering.
//! - [`tools`]: the `select_image` and `zoom_in` visual tools.
//! - [`engine`] and [`policy`]: the interleaved reason / tool-call episode loop
//!   and the pluggable policy backends (scripted, replay, HTTP).
//! - [`rerank`]: sliding-window planning and carry-forward rank aggregation.
//! - [`eapo`]: composite rewards, group-normalised advantages, the scalar
//!   policy objective and the rejection-sampling filter.
//! - [`eval`]: Recall@K, MAP@K and benchmark reports.


pub mod eapo;
pub mod engine;
pub mod eval;
pub mod jsonl;
pub mod policy;
pub mod protocol;
pub mod rerank;
pub mod store;
pub mod tools;

/// Version stamped into trajectory logs; replay refuses logs from another version.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
