#![no_main]

use ckequant_core::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_json(s) {
        // Accepted configs survive a serialize/parse round trip unchanged.
        let back = ExperimentConfig::from_json(&cfg.to_json_pretty()).expect("round trip");
        assert_eq!(back, cfg);
    }
});
