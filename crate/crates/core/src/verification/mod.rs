//! Independent oracles, gradient checks and alignment metrics. All of it runs
//! in `f64`.

pub mod gradcheck;
pub mod metrics;
pub mod oracle;
pub mod suite;

pub use gradcheck::{finite_diff_grad, gradcheck_attention, gradcheck_hmoe, relative_error, GradCheckReport};
pub use metrics::{alignment_stats, cosine_similarity, symmetric_kl, AlignmentStats, LayerAlignment};
pub use oracle::{
    oracle_attention_forward, oracle_encoder_forward, oracle_hmoe_forward, OracleAttention, OracleEncoder, OracleHmoe,
};
pub use suite::{gradcheck_suite, oracle_suite, CheckModule, CheckRecord, ORACLE_TOLERANCE};
