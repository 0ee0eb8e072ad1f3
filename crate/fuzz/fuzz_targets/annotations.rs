#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(samples) = actret_core::dataset::parse_annotations(text, "fuzz") {
            for s in &samples {
                assert!(s.person_box.area() > 0.0);
            }
        }
        let _ = actret_core::dataset::parse_classes(text);
    }
});
