//! Scenario files come from users, so the parser must be total:
//! arbitrary bytes either parse or return an error, and anything that
//! parses must validate without panicking and survive a round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use vmk_sim::scenario::Scenario;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(scn) = Scenario::from_json(text) else {
        return;
    };
    let _ = scn.validate();
    let back = Scenario::from_json(&scn.to_json()).expect("serialized form reparses");
    assert_eq!(scn, back, "round trip changed the scenario");
});
