//! Synthetic classification tasks, training, recovery fine-tuning and the
//! accuracy oracle used by the grouping search.

mod data;
mod eval;
mod train;

pub use data::{gen_dataset, Dataset, Split, Splits, TaskKind, TaskSpec, DATASET_FORMAT_VERSION, ORACLE_SPLIT_SIZE};
pub use eval::{evaluate, make_search_oracle, SearchOracle};
pub use train::{finetune, train, AdamW, EpochRecord, TrainConfig, TrainHistory, FINETUNE_EPOCHS};
