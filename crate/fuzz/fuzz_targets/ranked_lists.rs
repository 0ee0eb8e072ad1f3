#![no_main]

use actret_core::retrieval::{parse_ranked_lists, ranked_lists_to_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(lists) = parse_ranked_lists(text) {
            let limit = lists.iter().map(|l| l.ranked_ids.len()).max().unwrap_or(0);
            let again = parse_ranked_lists(&ranked_lists_to_jsonl(&lists, limit)).expect("round trip");
            assert_eq!(again, lists);
        }
    }
});
