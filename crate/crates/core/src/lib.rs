pub mod aspect;
mod digest;
pub mod data;
pub mod embedding;
pub mod eval;
pub mod infer;
pub mod models;
pub mod synth;
pub mod train;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/aspects.md")]
    struct Aspects;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/adapters.md")]
    struct Adapters;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/correction.md")]
    struct Correction;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
}
