#![no_main]

use lgcn_core::io::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let _ = ck.encode();
        let _ = ck.into_model();
    }
});
