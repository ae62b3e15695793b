#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(topology) = gatekit::topology::load_topology(data) {
        // anything that validates must compile into a table and route
        let table = gatekit::topology::RoutingTable::build(&topology, None);
        for prefix in table.prefixes().map(str::to_owned).collect::<Vec<_>>() {
            let _ = table.resolve(&prefix, 0.5);
        }
    }
});
