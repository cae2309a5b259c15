//! Fuzz the sniffing image decoder (binary PPM and PNG paths).

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = adept_core::imageio::decode_image(data) {
        // decoded images must satisfy the crate's dimension guards
        assert!(img.height() > 0 && img.width() > 0);
        assert_eq!(img.pixels().len(), img.height() * img.width() * 3);
    }
});
