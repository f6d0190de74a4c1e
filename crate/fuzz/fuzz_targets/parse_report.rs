#![no_main]

use libfuzzer_sys::fuzz_target;
use qflow::evaluation::EvalReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = EvalReport::parse(text) {
        let once = r.to_file_string();
        let again = EvalReport::parse(&once).expect("written report parses");
        assert_eq!(again.to_file_string(), once);
    }
});
