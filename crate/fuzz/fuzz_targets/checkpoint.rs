#![no_main]

use actret_core::training::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let _ = ckpt.into_model();
    }
});
