#![no_main]

use lgcn_core::io::descriptors::DescriptorDump;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = DescriptorDump::decode(data) {
        let again = DescriptorDump::decode(&d.encode()).expect("re-encoded dump decodes");
        assert_eq!(d.encode(), again.encode());
    }
});
