#![no_main]

use std::path::Path;

use dmc_core::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::parse(text, Path::new("/")) {
        let again = ExperimentConfig::parse(&cfg.to_ini(), Path::new("/")).expect("echo parses");
        assert_eq!(again.to_ini(), cfg.to_ini());
    }
});
