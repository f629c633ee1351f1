#![no_main]

use controlrec::data::{read_templates_jsonl, write_templates_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(templates) = read_templates_jsonl(data) {
        let mut out = Vec::new();
        write_templates_jsonl(&templates, &mut out).unwrap();
        assert_eq!(read_templates_jsonl(out.as_slice()).unwrap(), templates);
    }
});
