//! The config parser takes untrusted text files; any input must produce
//! either a RunConfig or a config error, never a panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mhd_slab::io::parse_config;

fuzz_target!(|text: &str| {
    let _ = parse_config(text);
});
