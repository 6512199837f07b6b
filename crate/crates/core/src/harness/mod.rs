//! Optimizer, schedule, synthetic tasks, training loop and benchmark.

pub mod bench;
pub mod optim;
pub mod tasks;
pub mod train;

pub use bench::{bench_csv, bench_throughput, BenchConfig, BenchKind, BenchRow, BENCH_HEADER};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use tasks::{make_batch, mqar_generate, selective_copy_generate, Batch, MqarConfig, SelectiveCopyConfig, TaskConfig, TaskSample};
pub use train::{argmax, eval_set, evaluate, masked_accuracy, EvalResult, MetricsRow, TrainConfig, TrainReport, Trainer, METRICS_HEADER};
