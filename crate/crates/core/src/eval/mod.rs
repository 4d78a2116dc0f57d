//! Retrieval metrics, evaluation reports and token ranking.

mod attention;
mod metrics;
mod retrieval;

pub use attention::{analyze_attention, attention_csv, attention_rank, AttentionAnalysis, RankedToken, SampleAttention};
pub use metrics::{
    average_ranks, map_at_k, pearson, recall_at_k, rsum, similarity_matrix, spearman, sts_scores, SimilarityMatrix,
    StsScores,
};
pub use retrieval::{
    dump_embeddings, eval_retrieval, image_map, matching_matrices, matching_recalls, report_from_dump, spec_groups,
    validation_rsum, EmbeddingDump, EvalConfig, QueryRanks, RetrievalReport,
};
