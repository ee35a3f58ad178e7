//! Window-stacking arbitration for windowed long-sequence classifiers.
//!
//! A recording is cut into fixed-length windows, a first-stage classifier
//! scores every window, and a second-stage meta-model learns how to combine
//! the per-window scores into one recording-level decision. Recordings that
//! belong to one session can be combined again by a third, non-parametric
//! stage.
//!
//! ```text
//! corpus -> windower -> firststage -> encodings -> meta_ann / meta_gbt
//!                                              \-> arbitration -> evaluation
//!                                                               -> explain
//! ```
//!
//! The `parallel` feature (on by default) runs data-parallel loops on rayon.
//! Every random draw is keyed by a derived seed, so results do not depend on
//! the feature or on the worker count.

pub mod arbitration;
pub mod corpus;
pub mod dataset;
pub mod encodings;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod explain;
pub mod firststage;
pub mod hexfloat;
pub mod io;
pub mod meta_ann;
pub mod meta_gbt;
pub mod par;
pub mod rng;
pub mod windower;

pub use arbitration::{ArbitrationMethod, RecordingDecision, SessionDecision, SessionMethod};
pub use corpus::{ClassWeights, Corpus, InclusionPolicy, Label, Recording, Session, Split};
pub use encodings::{EncodingKind, EncodingSpec, MetaInput};
pub use error::{Error, Result};
pub use evaluation::{ConfusionMatrix, EvalReport, Granularity};
pub use firststage::{SynthConfig, WindowOutput, WindowOutputs};
pub use meta_ann::{AnnArchitecture, AnnModel};
pub use meta_gbt::{GbtConfig, GbtModel};
pub use windower::{WindowIndexing, WindowingConfig};
