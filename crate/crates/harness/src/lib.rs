//! Run configuration, artifacts and command implementations behind the
//! `dlpt` binary.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `run.json` | command and config digest of the owning run |
//! | `config.toml` | the fully resolved config |
//! | `metrics.jsonl` | header line, then one record per step |
//! | `checkpoint.ckpt` | latest training state |
//! | `report.json`, `curves.csv` | summary derived from the metrics log |
//! | `run.lock` | pid of the live owner |

pub mod config;
pub mod error;
pub mod lock;
pub mod metrics;
pub mod report;
pub mod run;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
