#![no_main]

use actret_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_toml_str(text) {
            let again = RunConfig::from_toml_str(&cfg.to_toml()).expect("round trip");
            assert_eq!(again.to_toml(), cfg.to_toml());
        }
    }
});
