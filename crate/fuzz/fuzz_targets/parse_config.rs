#![no_main]

use libfuzzer_sys::fuzz_target;
use qflow::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = RunConfig::parse(text) {
        assert!(c.validate().is_ok());
    }
});
