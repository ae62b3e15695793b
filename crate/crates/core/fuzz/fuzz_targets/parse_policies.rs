#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(policies) = gatekit::autoscaler::load_policies(data) {
        for p in &policies {
            for current in [0, 1, p.max_replicas, u32::MAX] {
                let d = gatekit::autoscaler::desired_replicas(current, 3.0, p);
                assert!(d >= p.min_replicas && d <= p.max_replicas);
            }
        }
    }
});
