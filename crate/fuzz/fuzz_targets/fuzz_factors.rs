#![no_main]

use dmc_core::factors::FactorDump;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(dump) = FactorDump::parse(text) {
        let _ = dump.into_model();
    }
});
