#![no_main]

use controlrec::model::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ckpt.encode()).expect("re-encoded checkpoint must decode");
        assert_eq!(again, ckpt);
    }
});
