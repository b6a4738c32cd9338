#![no_main]

use libfuzzer_sys::fuzz_target;
use repose_tensor::Archive;

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = Archive::from_bytes(data) {
        let bytes = a.to_bytes();
        assert_eq!(Archive::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
});
