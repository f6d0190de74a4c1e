#![no_main]

use libfuzzer_sys::fuzz_target;
use qflow::synthdata::{dataset_to_string, parse_dataset};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = parse_dataset(text) {
        // writing quantizes, so the second generation must be a fixed point
        let once = dataset_to_string(&d);
        let again = parse_dataset(&once).expect("written dataset parses");
        assert_eq!(dataset_to_string(&again), once);
    }
});
