#![no_main]

use libfuzzer_sys::fuzz_target;
use mtlsar::data::SyntheticSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = serde_json::from_slice::<SyntheticSpec>(data) else { return };
    if spec.validate().is_ok() {
        for c in spec.resolved_classes().unwrap() {
            let (lo, hi) = c.area_range();
            assert!(lo <= hi);
        }
    }
});
