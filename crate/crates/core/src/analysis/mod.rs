//! Analyses over evaluation dumps: speech/silence gating, token-class
//! source-attention statistics and mask heatmaps. They only read the CSV
//! dumps, never the model.

pub mod dump;
mod heatmap;
mod stats;
mod tokens;
mod vad;

pub use dump::{EvalDump, FrameRecord, TokenRecord};
pub use heatmap::render_heatmap;
pub use stats::{format_p, mann_whitney_u, midranks, welch_t, StatTestResult, EXACT_LIMIT};
pub use tokens::{
    src_attention_token_stats, token_gate_records, GroupComparison, TokenGateRecord,
    TokenStatsReport,
};
pub use vad::{vad_likeness, VadReport, VadRow};
