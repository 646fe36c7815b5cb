#![no_main]

use libfuzzer_sys::fuzz_target;
use mtlsar::checkpoint::{network_from_json, Checkpoint};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((ckpt, net)) = network_from_json(text) {
        // Anything accepted must survive a save/load cycle unchanged.
        let again = Checkpoint::capture(&net, ckpt.epoch, &ckpt.class_names).unwrap();
        let back = Checkpoint::from_json(&again.to_json().unwrap()).unwrap();
        assert_eq!(back, again);
    }
});
