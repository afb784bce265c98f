pub mod compare;
pub mod estimator;
pub mod oracle_gap;
pub mod robustness;
pub mod theorem1;
