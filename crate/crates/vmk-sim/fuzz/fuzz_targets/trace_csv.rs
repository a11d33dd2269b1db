//! Trace files are reparsed by external tooling and by the metrics
//! aggregator. Parsing arbitrary bytes must never panic, and any
//! records that do parse must aggregate cleanly.

#![no_main]

use libfuzzer_sys::fuzz_target;
use vmk_sim::metrics::{parse_trace_csv, RunMetrics};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(records) = parse_trace_csv(text) else {
        return;
    };
    let _ = RunMetrics::from_records(&records);
});
