#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use mtlsar::data::decode_gray_png;

fuzz_target!(|data: &[u8]| {
    if let Ok((h, w, depth, values)) = decode_gray_png(data, Path::new("fuzz.png")) {
        assert_eq!(values.len(), h * w);
        assert!(depth == 8 || depth == 16);
    }
});
