//! Text-centric multimodal alignment and robustness evaluation.
//!
//! Records with tabular, image and free-text modalities are turned into
//! text, optionally summarized and reasoned over by an LLM, and classified
//! by a hashed bag-of-words linear model. Robustness sweeps inject seeded
//! imperfections into each modality and report accuracy and drop ratio.

pub mod dataset;
pub mod eval;
pub mod llm;
pub mod model;
pub mod perturb;
pub mod pipeline;
pub mod prompt;
pub mod textify;
