//! Grammar-driven neuroevolution of convolutional networks for gamma/proton
//! shower discrimination, with ROC-derived fitness, classic discriminant
//! baselines, and a synthetic event generator for desk-scale experiments.

pub mod datasets;
pub mod genotype;
pub mod grammar;
pub mod metrics;
pub mod phenotype;
pub mod variation;

pub use datasets::{ClassLabel, DatasetBundle, EventMatrix, Geometry, NormStats, SynthParams};
pub use genotype::{DsgeGene, EvoUnit, Genotype, Individual, Slot};
pub use grammar::{Grammar, OuterStructure, ParamBlock, DEFAULT_GRAMMAR};
pub use metrics::{EvalRecord, Fitness, RocCurve, RocPoint};
