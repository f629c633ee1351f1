#![no_main]

use controlrec::data::Catalog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(catalog) = Catalog::read_jsonl(data) {
        let mut out = Vec::new();
        catalog.write_jsonl(&mut out).unwrap();
        assert_eq!(Catalog::read_jsonl(out.as_slice()).expect("written catalog must parse"), catalog);
    }
});
