//! Fuzz the checkpoint container decoder; anything it accepts must
//! re-encode and decode back to bit-identical entries.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = adept_core::checkpoint::decode_checkpoint(data) {
        let bytes = adept_core::checkpoint::encode_checkpoint(&entries)
            .expect("decoded entries must re-encode");
        let again = adept_core::checkpoint::decode_checkpoint(&bytes)
            .expect("re-encoded container must decode");
        assert_eq!(again.len(), entries.len());
        for (a, b) in entries.iter().zip(&again) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert!(a.data.iter().map(|v| v.to_bits()).eq(b.data.iter().map(|v| v.to_bits())));
        }
    }
});
