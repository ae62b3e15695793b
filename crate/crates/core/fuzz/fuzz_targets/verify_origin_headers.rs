#![no_main]

use gatekit::origin::{check_origin, loopback_peers, OriginConfig, OriginSecret};
use http::{HeaderMap, HeaderName, HeaderValue};
use libfuzzer_sys::fuzz_target;

// Input: lines of `name: value`; the first line is `METHOD PATH`.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut lines = text.lines();
    let (method, path) = lines
        .next()
        .and_then(|l| l.split_once(' '))
        .unwrap_or(("GET", "/"));
    let mut headers = HeaderMap::new();
    for line in lines {
        if let Some((k, v)) = line.split_once(':') {
            if let (Ok(k), Ok(v)) = (
                HeaderName::from_bytes(k.trim().as_bytes()),
                HeaderValue::from_str(v.trim()),
            ) {
                headers.append(k, v);
            }
        }
    }
    let secret = OriginSecret::new(vec![0x5a; 32]).unwrap();
    let config = OriginConfig::new(secret, loopback_peers(), 60).unwrap();
    let _ = check_origin(method, path, &headers, [127, 0, 0, 1].into(), &config, 1_700_000_000);
});
