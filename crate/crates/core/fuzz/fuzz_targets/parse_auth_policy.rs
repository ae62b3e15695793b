#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = gatekit::auth::parse_policy_document(data);
});
