//! Synthetic feature videos and desk-scale reproductions of the keep-rate,
//! token-reduction and needle-retention analyses.

pub mod generator;
pub mod needle;
pub mod report;

pub use generator::{
    calibrated_corpus, gen_video, orthogonal_corpus, reserved_direction, static_corpus, SynthSpec,
};
pub use needle::{
    aggregate, aligned_query, insert_needle, needle_frame, run_needle_cell, run_needle_grid,
    summarize_cells, NeedleAggregate, NeedleCellSummary, NeedleOutcome, NeedleSpec,
};
pub use report::{
    anchor_ablation, measure_video, reduction_report, render_ablation_table, AnchorAblationRow,
    Histogram, ReductionReport, VideoReduction,
};
