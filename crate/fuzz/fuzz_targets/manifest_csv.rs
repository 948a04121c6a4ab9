#![no_main]

use lgcn_core::manifest::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Manifest::from_reader("fuzz", data) {
        // anything accepted must survive a write/read cycle unchanged
        let mut buf = Vec::new();
        m.to_writer(&mut buf).expect("accepted manifest writes");
        let back = Manifest::from_reader("fuzz", buf.as_slice()).expect("written manifest reads");
        assert_eq!(m, back);
    }
});
