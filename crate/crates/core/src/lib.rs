pub mod config;
pub mod credit;
pub mod error;
pub mod eval;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod pruning;
pub mod reporting;
pub mod rollout_tree;
pub mod seed;
pub mod trainer;
pub mod toy_env;
