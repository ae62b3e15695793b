#![no_main]

use libfuzzer_sys::fuzz_target;

// Input: pattern and subject separated by the first newline.
fuzz_target!(|data: &str| {
    let (pattern, subject) = data.split_once('\n').unwrap_or((data, ""));
    if let Ok(p) = gatekit::auth::DnPattern::new(pattern) {
        let _ = p.matches(subject);
    }
});
