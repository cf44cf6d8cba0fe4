//! Arbitrary bytes through every JSON config the CLI accepts.

#![no_main]

use libfuzzer_sys::fuzz_target;

use uadapter::backbone::PretrainConfig;
use uadapter::graph::synthetic::SyntheticConfig;
use uadapter::training::FineTuneConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<FineTuneConfig>(data) {
        let _ = cfg.validate();
    }
    let _ = serde_json::from_slice::<SyntheticConfig>(data);
    let _ = serde_json::from_slice::<PretrainConfig>(data);
});
