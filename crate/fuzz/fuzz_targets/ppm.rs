#![no_main]

use lgcn_core::io::ppm::Ppm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Ppm::decode(data) {
        let again = Ppm::decode(&img.encode()).expect("re-encoded image decodes");
        assert_eq!(img, again);
        let _ = img.to_tensor();
    }
});
