#![no_main]

use libfuzzer_sys::fuzz_target;
use repose_core::train::{log_from_csv, log_to_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = log_from_csv(text) {
            let again = log_from_csv(&log_to_csv(&rows)).unwrap();
            assert_eq!(again.len(), rows.len());
        }
    }
});
