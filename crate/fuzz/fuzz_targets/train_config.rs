#![no_main]

use libfuzzer_sys::fuzz_target;
use repose_core::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = TrainConfig::from_toml(text) {
            assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }
});
