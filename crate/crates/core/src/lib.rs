//! Detection-quality assessment and refinement for large industrial diagrams.
//!
//! The pipeline takes ground-truth symbol annotations for P&ID-style
//! drawings, injects controlled detection errors to build a corrupted
//! baseline, judges that baseline tile by tile with a grounded
//! vision-language model (claims of missing symbols, keep/flag verdicts for
//! detected boxes), recovers flagged regions with a localized detector, and
//! scores both the judge and the end-to-end system.
//!
//! Module map:
//! - [`model`] — canonical data types, box geometry, dataset files
//! - [`corruption`] — seeded error injection with an exact answer key
//! - [`imaging`] — tiling, overlay rendering, erasure, region crops
//! - [`grounding`] — prompt assembly for the judge and detector roles
//! - [`gateway`] — VLM backends: HTTP adapter plus deterministic mocks
//! - [`assessor`] — per-box QA and tile-wise missing-object judging
//! - [`refinement`] — claim recovery, relocalization, and final merge
//! - [`metrics`] — judge precision/recall/F1 and mAP
//! - [`pipeline`] — run orchestration, manifests, reports, budget estimate
//! - [`synth`] — synthetic diagram generator used by tests and demos

pub mod assessor;
pub mod corruption;
pub mod gateway;
pub mod grounding;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod refinement;
pub mod seeding;
pub mod synth;

pub(crate) mod parallel;
