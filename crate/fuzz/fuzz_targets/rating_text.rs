#![no_main]

use controlrec::eval::parse_rating;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let r = parse_rating(text);
    assert!((1.0..=5.0).contains(&r.value));
    if !text.bytes().any(|b| b.is_ascii_digit()) {
        assert!(r.fallback);
    }
});
