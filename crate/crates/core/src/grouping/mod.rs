//! Head groupings and the strategies that produce them: neighbour
//! grouping, similarity-guided symmetric and asymmetric search, and an
//! exhaustive baseline.

mod partition;
mod search;

pub use partition::{
    count_equal_partitions, enumerate_equal_partitions, enumerate_partitions, neighbour_grouping,
    random_grouping, HeadGrouping,
};
pub use search::{
    asymmetric_search, asymmetric_search_with, brute_force_search, symmetric_search, symmetric_search_with,
    AccuracyOracle, SearchConfig, SearchResult, SimilarityFeed, TraceEntry, BRUTE_FORCE_CAP,
};
