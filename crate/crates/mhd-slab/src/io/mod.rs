//! Persistent formats and run configuration.
//!
//! Three formats, all versioned by this crate's major version: binary
//! checkpoints ([`checkpoint`]), CSV ledger series with a pinned column
//! order ([`ledger_csv`]), and deterministic JSON study reports
//! ([`report`]). [`config`] holds the flat `key = value` run configuration
//! shared by every CLI subcommand.

pub mod checkpoint;
pub mod config;
pub mod ledger_csv;
pub mod report;

pub use checkpoint::{
    read_checkpoint, read_checkpoint_from, read_checkpoint_on, write_checkpoint,
    write_checkpoint_to, FORMAT_VERSION,
};
pub use config::{apply_config_text, load_config, parse_config, RunConfig};
pub use ledger_csv::{read_ledger_csv, write_ledger_csv, write_ledger_csv_to, LEDGER_COLUMNS};
pub use report::{report_string, write_json_report};
