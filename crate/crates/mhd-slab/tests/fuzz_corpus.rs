//! Replays the checked-in fuzz corpora through the parser entry points.
//!
//! The fuzz targets themselves need a nightly toolchain; this test keeps the
//! seeds honest on stable: every seed must parse without panicking, and the
//! seeds named `valid*` must actually parse, so a format change that orphans
//! the corpus fails here instead of rotting silently.

use std::fs;
use std::path::PathBuf;

use mhd_slab::io::{parse_config, read_checkpoint_from};

fn corpus_dir(target: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target)
}

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = corpus_dir(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("corpus dir {}: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus for {target}");
    out
}

#[test]
fn checkpoint_corpus_replays_without_panic() {
    for (name, bytes) in seeds("checkpoint_read") {
        let mut cursor = std::io::Cursor::new(bytes.as_slice());
        let result = read_checkpoint_from(&mut cursor);
        if name.starts_with("valid") {
            let state = result.unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(state.t.is_finite());
        } else {
            assert!(result.is_err(), "{name}: corrupt seed was accepted");
        }
    }
}

#[test]
fn config_corpus_replays_without_panic() {
    for (name, bytes) in seeds("config_parse") {
        let text = String::from_utf8_lossy(&bytes);
        let result = parse_config(&text);
        if name.starts_with("valid") || name.starts_with("minimal") {
            result.unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
