#![no_main]

use controlrec::augment::extract_completion;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(body) = std::str::from_utf8(data) {
        let _ = extract_completion(body);
    }
});
