use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use bytes::Bytes;
use proptest::prelude::*;

use chunkrelay::codec::SenderId;
use chunkrelay::transport::*;

/// Plain recursive matcher used as the oracle for the trie.
fn oracle(filter: &[&str], topic: &[&str]) -> bool {
    match (filter.first(), topic.first()) {
        (Some(&"#"), _) => true,
        (None, None) => true,
        (Some(&"+"), Some(_)) => oracle(&filter[1..], &topic[1..]),
        (Some(f), Some(t)) => f == t && oracle(&filter[1..], &topic[1..]),
        _ => false,
    }
}

fn filter_text() -> impl Strategy<Value = String> {
    let level = prop_oneof![Just("a"), Just("b"), Just("c"), Just("+")];
    (proptest::collection::vec(level, 0..4), any::<bool>()).prop_filter_map("non-empty", |(mut lv, hash)| {
        if hash {
            lv.push("#");
        }
        (!lv.is_empty()).then(|| lv.join("/"))
    })
}

fn topic_text() -> impl Strategy<Value = String> {
    let level = prop_oneof![Just("a"), Just("b"), Just("c")];
    proptest::collection::vec(level, 1..5).prop_map(|lv| lv.join("/"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn trie_matches_brute_force(
        filters in proptest::collection::vec(filter_text(), 1..12),
        topics in proptest::collection::vec(topic_text(), 1..8),
    ) {
        let mut trie = SubscriptionTrie::new();
        for (i, f) in filters.iter().enumerate() {
            trie.insert(&TopicFilter::new(f.as_str()).unwrap(), i);
        }
        for t in &topics {
            let levels: Vec<&str> = t.split('/').collect();
            let expected: BTreeSet<usize> = filters
                .iter()
                .enumerate()
                .filter(|(_, f)| oracle(&f.split('/').collect::<Vec<_>>(), &levels))
                .map(|(i, _)| i)
                .collect();
            prop_assert_eq!(trie.matches(&TopicName::new(t.as_str()).unwrap()), expected);
        }
    }
}

const TOPICS: [&str; 3] = ["t/a", "t/b", "u/a"];
const FILTERS: [&str; 5] = ["t/#", "t/a", "+/a", "u/+", "#"];

/// Subscribes on connect and records every callback's clock reading.
#[derive(Default)]
struct Probe {
    filters: Vec<TopicFilter>,
    got: Vec<(String, String)>,
    clock: Vec<SimTime>,
}

impl Actor for Probe {
    fn on_connect(&mut self, ctx: &mut dyn NodeContext, present: bool) {
        self.clock.push(ctx.now());
        if !present {
            for f in &self.filters {
                ctx.subscribe(f).unwrap();
            }
        }
    }

    fn on_disconnect(&mut self, ctx: &mut dyn NodeContext) {
        self.clock.push(ctx.now());
    }

    fn on_message(&mut self, ctx: &mut dyn NodeContext, topic: &TopicName, payload: &Bytes) {
        self.clock.push(ctx.now());
        self.got
            .push((topic.to_string(), String::from_utf8(payload.to_vec()).unwrap()));
    }

    fn on_timer(&mut self, ctx: &mut dyn NodeContext, _token: u64) {
        self.clock.push(ctx.now());
    }
}

#[derive(Debug, Clone)]
struct Pub {
    at_ms: u64,
    from: usize,
    topic: usize,
    qos1: bool,
    size: usize,
}

#[derive(Debug, Clone)]
struct Workload {
    persistent: bool,
    subs: Vec<Vec<usize>>,
    pubs: Vec<Pub>,
    /// (node index or `None` for the broker, down at, down for) in ms.
    faults: Vec<(Option<usize>, u64, u64)>,
}

fn workload() -> impl Strategy<Value = Workload> {
    (2usize..=5).prop_flat_map(|n| {
        let subs = proptest::collection::vec(proptest::collection::vec(0..FILTERS.len(), 0..3), n);
        let pubs = proptest::collection::vec(
            (1u64..3_000, 0..n, 0..TOPICS.len(), any::<bool>(), 1usize..200_000)
                .prop_map(|(at_ms, from, topic, qos1, size)| Pub { at_ms, from, topic, qos1, size }),
            1..40,
        );
        let faults = proptest::collection::vec(
            (proptest::option::of(0..n), 1u64..2_500, 1u64..4_000),
            0..3,
        );
        (any::<bool>(), subs, pubs, faults).prop_map(|(persistent, subs, mut pubs, faults)| {
            pubs.sort_by_key(|p| p.at_ms);
            // one fault window per node keeps Down/Up alternation valid
            let mut seen = BTreeSet::new();
            let faults = faults.into_iter().filter(|f| seen.insert(f.0)).collect();
            Workload { persistent, subs, pubs, faults }
        })
    })
}

fn node(i: usize) -> SenderId {
    SenderId::new(format!("n{i}")).unwrap()
}

struct Outcome {
    sim: Simulator,
    /// (publisher, seq, topic, qos1) for every publish that was accepted.
    accepted: Vec<(usize, usize, usize, bool)>,
}

fn run(w: &Workload, seed: u64) -> Outcome {
    let mut sim = Simulator::new(SimConfig {
        seed,
        session_mode: if w.persistent { SessionMode::Persistent } else { SessionMode::Clean },
        record_deliveries: true,
        ..SimConfig::default()
    })
    .unwrap();
    for (i, subs) in w.subs.iter().enumerate() {
        let probe = Probe {
            filters: subs.iter().map(|f| TopicFilter::new(FILTERS[*f]).unwrap()).collect(),
            ..Probe::default()
        };
        let link = LinkState::new(node(i), 100_000_000, Duration::from_micros(300)).unwrap();
        sim.add_node(link, Box::new(probe)).unwrap();
    }
    let mut events = Vec::new();
    for &(who, at, dur) in &w.faults {
        let id = who.map_or_else(|| SenderId::new("broker").unwrap(), node);
        events.push(FaultEvent { at: SimTime::from_millis(at), node: id.clone(), action: FaultAction::Down });
        events.push(FaultEvent { at: SimTime::from_millis(at + dur), node: id, action: FaultAction::Up });
    }
    events.sort_by_key(|e| e.at);
    sim.apply_faults(&FaultSchedule::new(events).unwrap()).unwrap();

    let mut accepted = Vec::new();
    for (seq, p) in w.pubs.iter().enumerate() {
        sim.run_until(SimTime::from_millis(p.at_ms));
        let mut body = format!("{}:{}:", p.from, seq).into_bytes();
        body.resize(p.size.max(body.len()), b'.');
        let qos = if p.qos1 { QoS::AtLeastOnce } else { QoS::AtMostOnce };
        let ok = sim
            .invoke::<Probe, _>(&node(p.from), |_, ctx| {
                ctx.publish(&TopicName::new(TOPICS[p.topic]).unwrap(), Bytes::from(body), qos)
            })
            .unwrap()
            .is_ok();
        if ok {
            accepted.push((p.from, seq, p.topic, p.qos1));
        }
    }
    sim.run_to_quiescence(SimTime::MAX);
    Outcome { sim, accepted }
}

fn key(payload: &str) -> (usize, usize) {
    let mut it = payload.split(':');
    (it.next().unwrap().parse().unwrap(), it.next().unwrap().parse().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn simulated_broker_invariants(w in workload(), seed: u64) {
        let out = run(&w, seed);
        let sim = &out.sim;
        let st = sim.stats();
        prop_assert!(st.is_conserved(), "{:?}", st);
        prop_assert_eq!(st.in_flight, 0);
        prop_assert_eq!(st.uplink_pending, 0);
        prop_assert!(st.delivered <= st.published * w.subs.len() as u64);

        let matching = |i: usize, topic: usize| {
            w.subs[i].iter().any(|f| {
                TopicFilter::new(FILTERS[*f]).unwrap().matches(&TopicName::new(TOPICS[topic]).unwrap())
            })
        };
        for i in 0..w.subs.len() {
            let p = sim.actor::<Probe>(&node(i)).unwrap();
            prop_assert!(p.clock.windows(2).all(|c| c[0] <= c[1]), "clock went backwards");

            let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            let mut last: BTreeMap<(usize, &str), usize> = BTreeMap::new();
            for (topic, payload) in &p.got {
                let (from, seq) = key(payload);
                *counts.entry((from, seq)).or_default() += 1;
                // per publisher, per topic order
                if let Some(prev) = last.insert((from, topic.as_str()), seq) {
                    prop_assert!(prev < seq, "n{} saw {} after {} from n{}", i, seq, prev, from);
                }
            }
            for &(from, seq, topic, qos1) in &out.accepted {
                let n = counts.get(&(from, seq)).copied().unwrap_or(0);
                prop_assert!(n <= 1, "n{} got ({}, {}) {} times", i, from, seq, n);
                if w.persistent && qos1 && matching(i, topic) {
                    prop_assert_eq!(n, 1, "n{} lost QoS 1 message ({}, {})", i, from, seq);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_trace(w in workload(), seed: u64) {
        let a = run(&w, seed);
        let b = run(&w, seed);
        prop_assert_eq!(a.sim.trace_digest(), b.sim.trace_digest());
        prop_assert_eq!(a.accepted, b.accepted);
        for i in 0..w.subs.len() {
            prop_assert_eq!(
                &a.sim.actor::<Probe>(&node(i)).unwrap().got,
                &b.sim.actor::<Probe>(&node(i)).unwrap().got
            );
        }
    }
}
