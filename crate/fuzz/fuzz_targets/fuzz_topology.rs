#![no_main]

use dmc_core::topology::parse_topology;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = parse_topology(text) {
        assert!(t.is_connected());
        let again = parse_topology(&t.to_text()).expect("rendered topology parses");
        assert_eq!(again.edges(), t.edges());
    }
});
