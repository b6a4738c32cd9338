#![no_main]

use libfuzzer_sys::fuzz_target;
use repose_core::correspondence::KeypointFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = KeypointFile::parse(text) {
            assert_eq!(c.a.len(), c.p.len());
        }
    }
});
