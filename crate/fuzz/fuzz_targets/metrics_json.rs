#![no_main]

use actret_core::evaluation::validate_metrics_json;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(doc) = serde_json::from_slice::<serde_json::Value>(data) {
        let _ = validate_metrics_json(&doc);
    }
});
