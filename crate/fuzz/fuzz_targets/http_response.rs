#![no_main]

use controlrec::augment::parse_http_response;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((status, body)) = parse_http_response(data) {
        assert!((100..1000).contains(&status));
        assert!(body.len() <= data.len());
    }
});
