//! Process-level reward stack for multiple-choice social reasoning.
//!
//! * [`dataset`]: benchmark instances, JSONL I/O, seeded splits
//! * [`trajectory`]: tag parsing, length / repetition statistics, option mentions
//! * [`rewards`]: reward components and curriculum-weighted synthesis
//! * [`judge`]: structural / content / segmentation judges behind one backend trait
//! * [`grpo`]: group-relative advantages and a tabular toy trainer
//! * [`pairs`]: tiering and preference-pair construction
//! * [`analysis`]: option-mention density, stage audits, perturbation study

pub mod analysis;
pub mod dataset;
pub mod grpo;
pub mod judge;
pub mod pairs;
pub mod provenance;
pub mod rewards;
pub mod trajectory;
