#![no_main]

use dmc_core::data::{format_ratings, parse_ratings};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(loaded) = parse_ratings(text) {
        // Whatever parses must survive a save/load round trip.
        let again = parse_ratings(&format_ratings(&loaded.ratings)).expect("formatted ratings parse");
        assert_eq!(again.ratings, loaded.ratings);
    }
});
