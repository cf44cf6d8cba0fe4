//! Arbitrary bytes through the JSONL graph-record parser: must yield a valid
//! graph or a structured error, never a panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(graph) = uadapter::graph::io::graph_from_json_line(line) {
            graph
                .validate("fuzz")
                .expect("accepted record must satisfy graph invariants");
        }
    }
});
