#![no_main]

use actret_core::backbone::FeatureMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(fm) = FeatureMap::decode(data) {
        let again = FeatureMap::decode(&fm.encode()).expect("re-encoded map decodes");
        assert_eq!(again.encode(), fm.encode());
    }
});
