#![no_main]

use libfuzzer_sys::fuzz_target;
use qflow::evaluation::AttentionHistogram;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(h) = AttentionHistogram::parse_csv(text) {
        let once = h.to_csv();
        let again = AttentionHistogram::parse_csv(&once).expect("written histogram parses");
        assert_eq!(again.to_csv(), once);
    }
});
