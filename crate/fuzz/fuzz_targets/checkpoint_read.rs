//! The checkpoint reader must reject arbitrary bytes with an error, never
//! panic, abort, or allocate proportionally to unvalidated header fields.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mhd_slab::io::read_checkpoint_from;

fuzz_target!(|data: &[u8]| {
    let mut cursor = std::io::Cursor::new(data);
    let _ = read_checkpoint_from(&mut cursor);
});
