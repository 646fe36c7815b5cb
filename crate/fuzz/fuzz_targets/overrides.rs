#![no_main]

use libfuzzer_sys::fuzz_target;
use mtlsar::config::{apply_overrides, parse_override};
use mtlsar::data::SyntheticSpec;
use mtlsar::NetworkConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let items: Vec<String> = text.lines().map(String::from).collect();
    for item in &items {
        let _ = parse_override(item);
    }
    let _ = apply_overrides(&NetworkConfig::default(), &items);
    let _ = apply_overrides(&SyntheticSpec::default(), &items);
});
