#![no_main]

use libfuzzer_sys::fuzz_target;
use mtlsar::data::parse_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_manifest(data) {
        for r in rows {
            assert!(r.depression.is_finite());
        }
    }
});
