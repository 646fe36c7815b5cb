#![no_main]

use libfuzzer_sys::fuzz_target;
use mtlsar::NetworkConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(cfg) = serde_json::from_slice::<NetworkConfig>(data) else { return };
    if cfg.validate().is_ok() {
        let _ = cfg.spatial_plan();
        let _ = cfg.parameter_count();
    }
});
