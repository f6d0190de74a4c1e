#![no_main]

use libfuzzer_sys::fuzz_target;
use qflow::captions::{detokenize, tokenize, Vocabulary};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let vocab = Vocabulary::default();
    if let Ok(c) = tokenize(text, &vocab) {
        assert!(c.validate(&vocab).is_ok());
        assert_eq!(tokenize(&detokenize(&c, &vocab), &vocab).expect("detokenized text parses"), c);
    }
});
