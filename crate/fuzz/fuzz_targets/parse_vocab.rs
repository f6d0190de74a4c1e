#![no_main]

use libfuzzer_sys::fuzz_target;
use qflow::captions::{Vocabulary, DEFAULT_MAX_CAPTION_LEN};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = Vocabulary::parse(text, DEFAULT_MAX_CAPTION_LEN) {
        let back = Vocabulary::parse(&v.to_file_string(), DEFAULT_MAX_CAPTION_LEN).expect("written vocabulary parses");
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.score_word_ids(), v.score_word_ids());
    }
});
