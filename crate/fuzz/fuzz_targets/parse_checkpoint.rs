#![no_main]

use libfuzzer_sys::fuzz_target;
use qflow::checkpoint::{checkpoint_to_string, parse_checkpoint};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = parse_checkpoint(text) {
        let back = parse_checkpoint(&checkpoint_to_string(&c)).expect("written checkpoint parses");
        assert_eq!(back.params, c.params);
    }
});
