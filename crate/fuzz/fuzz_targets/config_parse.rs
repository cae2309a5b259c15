//! Fuzz the TOML run-config parser; configs that parse and validate must
//! survive a serialize/parse cycle (validation screens out non-finite
//! floats, so equality is well defined).

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = adept_core::config::parse_run_config(text) {
        if cfg.validate().is_ok() {
            let again = adept_core::config::parse_run_config(&cfg.to_toml_string())
                .expect("serialized config must parse");
            assert_eq!(cfg, again);
        }
    }
});
