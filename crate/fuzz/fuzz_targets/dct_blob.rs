//! Fuzz the coefficient-blob header parser and payload decoder. The input
//! is split at the first 0xFF byte (never valid in UTF-8): header text
//! before it, raw payload after it.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0xff).unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else { return };
    if let Ok(header) = adept_core::dct::parse_dct_header(text) {
        assert_eq!(adept_core::dct::parse_dct_header(&header.to_text()).unwrap(), header);
        let payload = data.get(split + 1..).unwrap_or(&[]);
        if let Ok(map) = adept_core::dct::decode_dct_blob(&header, payload) {
            assert_eq!(map.data.len(), header.expected_values());
        }
    }
});
