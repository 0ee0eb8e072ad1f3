#![no_main]

use actret_core::retrieval::EmbeddingStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = EmbeddingStore::decode(data) {
        let again = EmbeddingStore::decode(&store.encode()).expect("re-encoded store decodes");
        assert_eq!(again.ids(), store.ids());
        assert_eq!(again.matrix(), store.matrix());
    }
});
