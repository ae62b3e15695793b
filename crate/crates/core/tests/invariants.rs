//! Property tests for the invariants the components promise each other.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::IpAddr;

use gatekit::admission::{admit_connection, AdmissionState};
use gatekit::auth::Identity;
use gatekit::autoscaler::{desired_replicas, ScalePolicy};
use gatekit::frontend::inject_headers;
use gatekit::metrics::{parse_exposition, MetricKind, MetricSample, MetricsError, Registry};
use gatekit::origin::{check_origin, loopback_peers, OriginConfig};
use gatekit::topology::{
    load_topology, validate, Endpoint, ReleaseTrack, RoutingTable, ServiceSpec, Topology,
    WorkloadKind,
};
use http::HeaderMap;
use proptest::prelude::*;

fn spec(name: String, prefix: String, tracks: Vec<ReleaseTrack>) -> ServiceSpec {
    ServiceSpec {
        name,
        path_prefix: prefix,
        tracks,
        legacy_endpoint: None,
        min_replicas: 1,
        max_replicas: 4,
        burn_ms: None,
        kind: WorkloadKind::Echo,
        required_roles: BTreeSet::new(),
    }
}

fn track(label: &str, weight: u32, port: u16) -> ReleaseTrack {
    ReleaseTrack {
        label: label.into(),
        weight,
        endpoints: vec![Endpoint::parse(&format!("127.0.0.1:{port}")).unwrap()],
    }
}

fn segments() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "ab", "db", "x"]), 0..4)
        .prop_map(|v| v.into_iter().map(str::to_owned).collect())
}

fn to_path(segs: &[String]) -> String {
    if segs.is_empty() {
        "/".into()
    } else {
        format!("/{}", segs.join("/"))
    }
}

fn oracle_matches(prefix: &str, path: &str) -> bool {
    prefix == "/"
        || path == prefix
        || path.starts_with(&format!("{prefix}/"))
        || path.starts_with(&format!("{prefix}?"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn routing_picks_longest_matching_prefix(
        prefixes in prop::collection::btree_set(segments().prop_map(|s| to_path(&s)), 1..8),
        path_segs in segments(),
        tail in prop::sample::select(vec!["", "/", "?q=1", "s", "/deep/er"]),
    ) {
        let path = format!("{}{}", to_path(&path_segs), tail);
        let services: Vec<ServiceSpec> = prefixes
            .iter()
            .enumerate()
            .map(|(i, p)| spec(format!("s{i}"), p.clone(), vec![track("stable", 1, 1000 + i as u16)]))
            .collect();
        let topology = Topology { services };
        validate(&topology).unwrap();
        let table = RoutingTable::build(&topology, None);
        let expected = topology
            .services
            .iter()
            .filter(|s| oracle_matches(&s.path_prefix, &path))
            .max_by_key(|s| s.path_prefix.len())
            .map(|s| s.name.clone());
        let got = table.resolve(&path, 0.5).ok().map(|d| d.service_name);
        prop_assert_eq!(got, expected, "path {}", path);
    }

    #[test]
    fn weighted_selection_lands_in_cumulative_band(
        weights in prop::collection::vec(0u32..50, 1..6)
            .prop_filter("positive total", |w| w.iter().any(|x| *x > 0)),
        draw in 0.0f64..1.0,
    ) {
        let tracks: Vec<ReleaseTrack> = weights
            .iter()
            .enumerate()
            .map(|(i, w)| track(&format!("t{i}"), *w, 2000 + i as u16))
            .collect();
        let topology = Topology { services: vec![spec("svc".into(), "/svc".into(), tracks)] };
        let table = RoutingTable::build(&topology, None);
        let label = table.resolve("/svc", draw).unwrap().track_label;
        let i: usize = label[1..].parse().unwrap();
        prop_assert!(weights[i] > 0, "zero-weight track {} chosen", i);
        let total: u32 = weights.iter().sum();
        let lower: u32 = weights[..i].iter().sum();
        let point = draw * f64::from(total);
        // exact band, allowing one ulp of slack at the edges
        prop_assert!(point >= f64::from(lower) - 1e-9 && point < f64::from(lower + weights[i]) + 1e-9);
    }

    #[test]
    fn desired_replicas_matches_rational_oracle(
        current in 1u32..20,
        observed in 0u32..400,
        target in 1u32..20,
        min in 1u32..5,
        span in 0u32..12,
    ) {
        let p = ScalePolicy {
            service_name: "s".into(),
            metric_name: "m".into(),
            target_per_replica: f64::from(target),
            min_replicas: min,
            max_replicas: min + span,
            tolerance: 0.1,
            cooldown_seconds: 30.0,
            evaluation_interval_seconds: 5.0,
        };
        let got = desired_replicas(current, f64::from(observed), &p);
        let capacity = u64::from(current) * u64::from(target);
        // |observed/capacity - 1| <= 1/10  <=>  10*|observed - capacity| <= capacity
        let in_band = 10 * u64::from(observed).abs_diff(capacity) <= capacity;
        let raw = if in_band {
            current
        } else {
            u64::from(observed).div_ceil(u64::from(target)) as u32
        };
        prop_assert_eq!(got, raw.clamp(p.min_replicas, p.max_replicas));
        prop_assert!(got >= p.min_replicas && got <= p.max_replicas);
    }

    #[test]
    fn desired_replicas_is_monotone_in_load(
        current in 1u32..20,
        a in 0.0f64..500.0,
        b in 0.0f64..500.0,
        target in 0.5f64..20.0,
        tolerance in 0.01f64..0.5,
    ) {
        let p = ScalePolicy {
            service_name: "s".into(),
            metric_name: "m".into(),
            target_per_replica: target,
            min_replicas: 1,
            max_replicas: 64,
            tolerance,
            cooldown_seconds: 30.0,
            evaluation_interval_seconds: 5.0,
        };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(desired_replicas(current, lo, &p) <= desired_replicas(current, hi, &p));
    }

    #[test]
    fn exposition_round_trips(
        series in prop::collection::vec(
            (
                prop::sample::select(vec!["alpha_total", "beta", "gamma_seconds", "delta:rate"]),
                prop::collection::btree_map("[a-z_][a-z0-9_]{0,6}", "[ -~\\n\"\\\\]{0,10}", 0..3),
                0.0f64..1e12,
            ),
            0..24,
        ),
    ) {
        let reg = Registry::new();
        let mut kinds = HashMap::new();
        for (name, labels, value) in &series {
            let kind = *kinds.entry(*name).or_insert(match *name {
                "alpha_total" => MetricKind::Counter,
                "gamma_seconds" => MetricKind::Histogram,
                _ => MetricKind::Gauge,
            });
            let labels: Vec<(&str, &str)> = labels
                .iter()
                .filter(|(k, _)| k.as_str() != "le")
                .map(|(k, v)| (k.as_str(), v.as_str()))
                .collect();
            reg.record(&MetricSample::new(name, &labels, *value, kind)).unwrap();
        }
        let text = reg.render();
        let parsed = parse_exposition(&text).unwrap();
        let key = |s: &MetricSample| (s.name.clone(), s.labels.clone(), s.value.to_bits());
        let got: Vec<_> = parsed.iter().map(key).collect();
        let want: Vec<_> = reg.samples().iter().map(key).collect();
        prop_assert_eq!(got, want);
        prop_assert_eq!(reg.render(), text);
    }

    #[test]
    fn counters_never_decrease(start in 0.0f64..1e6, delta in -1e6f64..-1e-9) {
        let reg = Registry::new();
        reg.add("c_total", &[], start);
        let err = reg
            .record(&MetricSample::new("c_total", &[], delta, MetricKind::Counter))
            .unwrap_err();
        prop_assert_eq!(err, MetricsError::CounterDecrease("c_total".into()));
        prop_assert_eq!(reg.scalar("c_total", &[]), Some(start));
    }

    #[test]
    fn admission_tracks_a_bounded_model(
        limit in 1usize..20,
        ops in prop::collection::vec(prop::bool::weighted(0.6), 0..200),
    ) {
        let state = AdmissionState::new(limit);
        let mut held = Vec::new();
        let mut rejected = 0u64;
        for admit in ops {
            if admit {
                let a = admit_connection(&state);
                prop_assert_eq!(a.is_admitted(), held.len() < limit);
                if a.is_admitted() { held.push(a) } else { rejected += 1 }
            } else if !held.is_empty() {
                held.remove(held.len() / 2);
            }
            prop_assert_eq!(state.active(), held.len());
            prop_assert!(state.peak() <= limit);
        }
        prop_assert_eq!(state.rejected_total(), rejected);
    }

    #[test]
    fn injected_headers_are_deterministic_and_verifiable(
        method in prop::sample::select(vec!["GET", "POST", "PUT", "DELETE"]),
        path in "/[a-z0-9/]{0,20}(\\?[a-z]=[0-9]{1,3})?",
        cn in "[a-z][a-z0-9-]{0,10}",
        roles in prop::collection::btree_set("[a-z]{1,8}", 0..3),
        spoof in prop::option::of("[ -~]{1,20}"),
        ts in 1_600_000_000u64..2_000_000_000,
    ) {
        let identity = Identity {
            subject_dn: format!("CN={cn},O=Gatekit Test"),
            common_name: cn.clone(),
            issuer_dn: "CN=Root".into(),
            roles: roles.into_iter().collect(),
            not_after: ts + 3600,
        };
        let secret = common::secret();
        let build = || {
            let mut h = HeaderMap::new();
            if let Some(s) = &spoof {
                h.insert("x-auth-dn", s.parse().unwrap());
                h.insert("x-origin-sig", s.parse().unwrap());
            }
            inject_headers(&mut h, method, &path, &identity, &secret, ts).unwrap();
            h
        };
        let (first, second) = (build(), build());
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(first.get_all("x-auth-dn").iter().count(), 1);
        let expected = common::hmac_sha256_hex(secret.as_bytes(), format!("{method}|{path}|{ts}").as_bytes());
        prop_assert_eq!(first["x-origin-sig"].to_str().unwrap(), expected.as_str());
        let cfg = OriginConfig::new(secret.clone(), loopback_peers(), 60).unwrap();
        let peer: IpAddr = [127, 0, 0, 1].into();
        prop_assert!(check_origin(method, &path, &first, peer, &cfg, ts).is_ok());
        let other = format!("{path}x");
        prop_assert!(check_origin(method, &other, &first, peer, &cfg, ts).is_err());
        prop_assert!(check_origin(method, &path, &first, peer, &cfg, ts + 61).is_err());
    }

    #[test]
    fn topology_json_round_trips(
        prefixes in prop::collection::btree_set(segments().prop_map(|s| to_path(&s)), 1..6),
        weights in prop::collection::vec(1u32..100, 1..3),
    ) {
        let services: Vec<ServiceSpec> = prefixes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let tracks = weights
                    .iter()
                    .enumerate()
                    .map(|(j, w)| track(&format!("t{j}"), *w, 3000 + j as u16))
                    .collect();
                spec(format!("svc-{i}"), p.clone(), tracks)
            })
            .collect();
        let topology = Topology { services };
        let text = serde_json::to_string(&topology).unwrap();
        let back = load_topology(&text).unwrap();
        prop_assert_eq!(back, topology);
    }
}

#[test]
fn routing_oracle_agrees_on_segment_boundaries() {
    let topology = Topology {
        services: vec![
            spec("db".into(), "/db".into(), vec![track("stable", 1, 1)]),
            spec("dbs".into(), "/dbs".into(), vec![track("stable", 1, 2)]),
        ],
    };
    let table = RoutingTable::build(&topology, None);
    let names: BTreeMap<&str, Option<String>> = ["/db", "/db/x", "/dbs", "/dbsx", "/d"]
        .into_iter()
        .map(|p| (p, table.resolve(p, 0.0).ok().map(|d| d.service_name)))
        .collect();
    assert_eq!(names["/db"].as_deref(), Some("db"));
    assert_eq!(names["/db/x"].as_deref(), Some("db"));
    assert_eq!(names["/dbs"].as_deref(), Some("dbs"));
    assert_eq!(names["/dbsx"], None);
    assert_eq!(names["/d"], None);
}
