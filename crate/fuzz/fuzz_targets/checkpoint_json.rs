//! Arbitrary bytes through the checkpoint decoder. Anything that validates
//! must instantiate without panicking and survive a serialization round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = uadapter::checkpoint::from_json_bytes(data) {
        let _ = ckpt.instantiate();
        let bytes = ckpt.to_json_bytes();
        let again = uadapter::checkpoint::from_json_bytes(&bytes)
            .expect("accepted checkpoint must re-parse");
        assert_eq!(ckpt, again, "checkpoint serialization must round-trip");
    }
});
