#![no_main]

use libfuzzer_sys::fuzz_target;
use repose_core::warp::{decode_flow, encode_flow};

fuzz_target!(|data: &[u8]| {
    if let Ok(flow) = decode_flow(data) {
        assert_eq!(encode_flow(&flow).unwrap(), data);
    }
});
