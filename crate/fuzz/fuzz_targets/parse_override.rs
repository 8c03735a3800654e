#![no_main]

use ckequant_core::config::{parse_override, ExperimentConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if parse_override(s).is_ok() {
        // Whatever the override does, the result is either an error or a valid config.
        if let Ok(cfg) = ExperimentConfig::p1(4).with_overrides(&[s]) {
            cfg.validate().expect("overrides revalidate");
        }
    }
});
