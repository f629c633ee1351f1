#![no_main]

use controlrec::data::placeholders;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(names) = placeholders(text) {
        for n in names {
            assert!(!n.is_empty());
            assert!(text.contains(&format!("{{{n}}}")));
        }
    }
});
