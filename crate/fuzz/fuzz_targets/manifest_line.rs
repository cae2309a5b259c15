//! Fuzz the dataset manifest-line parser; when a parsed entry
//! re-serializes to something parseable, serialization must be a fixed
//! point (non-finite floats legitimately fail the re-parse, so they are
//! skipped rather than asserted).

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entry) = adept_core::synthdata::parse_manifest_line(text) {
        let line = adept_core::synthdata::to_manifest_line(&entry);
        if let Ok(again) = adept_core::synthdata::parse_manifest_line(&line) {
            assert_eq!(entry.index, again.index);
            assert_eq!(entry.seed, again.seed);
            assert_eq!(adept_core::synthdata::to_manifest_line(&again), line);
        }
    }
});
