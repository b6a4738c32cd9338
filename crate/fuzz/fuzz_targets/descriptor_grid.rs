#![no_main]

use libfuzzer_sys::fuzz_target;
use repose_core::descriptor::DescriptorGrid;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = DescriptorGrid::from_bytes(data) {
        assert_eq!(g.salience_map().len(), g.cells());
        let again = DescriptorGrid::from_bytes(&g.to_bytes()).expect("re-encoded grid decodes");
        assert_eq!(again.to_bytes(), g.to_bytes());
    }
});
