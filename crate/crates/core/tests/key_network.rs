use proptest::prelude::*;

use qlink_core::qkd::{reference_fit, BitString, QkdError, QkdLinkConfig, QkdNetwork, MAC_KEY_BITS};
use qlink_core::{SimTime, ValidatorId};

const NODES: u64 = 4;

/// Hub v0 linked to every other node; v1 also links to v2.
fn network(seed: u64, distance_km: f64) -> QkdNetwork {
    let fit = reference_fit();
    let mut configs: Vec<_> = (1..NODES)
        .map(|i| QkdLinkConfig::with_fit(ValidatorId(0), ValidatorId(i), distance_km, &fit))
        .collect();
    configs.push(QkdLinkConfig::with_fit(ValidatorId(1), ValidatorId(2), distance_km, &fit));
    let mut net = QkdNetwork::new(seed, configs, SimTime::ZERO).unwrap();
    net.set_relays(vec![ValidatorId(0)]);
    net.rebuild_routes(&ids());
    net
}

fn ids() -> Vec<ValidatorId> {
    (0..NODES).map(ValidatorId).collect()
}

#[derive(Clone, Debug)]
enum Op {
    Advance(u64),
    Send { from: u64, to: u64, bits: u64, fill: u8 },
    Cut(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (1u64..5_000).prop_map(Op::Advance),
        4 => (0..NODES, 0..NODES, 1u64..4_000, any::<u8>()).prop_map(|(from, to, bits, fill)| Op::Send { from, to, bits, fill }),
        1 => (1..NODES).prop_map(Op::Cut),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn accounting_holds_under_any_schedule(
        seed in any::<u64>(),
        distance in 1.0f64..120.0,
        ops in proptest::collection::vec(op(), 1..60),
    ) {
        let mut net = network(seed, distance);
        let mut now = SimTime::ZERO;
        let mut hops_sealed = 0u64;
        let mut key_bits = 0u64;
        for op in ops {
            match op {
                Op::Advance(us) => {
                    now += SimTime(us);
                    net.advance_to(now);
                }
                Op::Send { from, to, bits, fill } => {
                    if from == to {
                        continue;
                    }
                    let bytes = vec![fill; bits.div_ceil(8) as usize];
                    let m = BitString::from_bytes_truncated(&bytes, bits);
                    match net.transmit(ValidatorId(from), ValidatorId(to), &m) {
                        Ok(d) => {
                            prop_assert_eq!(d.plaintext, m);
                            prop_assert_eq!(d.key_bits, d.hops as u64 * (bits + MAC_KEY_BITS));
                            hops_sealed += d.hops as u64;
                            key_bits += d.key_bits;
                        }
                        Err(QkdError::InsufficientKey { .. }) | Err(QkdError::NoRoute(..)) => {}
                        Err(e) => prop_assert!(false, "unexpected {e:?}"),
                    }
                }
                Op::Cut(node) => {
                    net.sever_node(ValidatorId(node));
                    net.rebuild_routes(&ids());
                }
            }
            for l in net.links() {
                let b = &l.buffer;
                prop_assert_eq!(b.generated_total, b.consumed_total + b.available_bits + b.overflow_discarded);
                prop_assert!(b.available_bits <= b.capacity);
            }
        }
        prop_assert_eq!(net.overlap_count(), 0);
        prop_assert_eq!(net.audit().violations, 0);
        // A relayed send that fails on its second hop has still sealed the first.
        prop_assert!(net.messages_sealed() >= hops_sealed);
        prop_assert!(net.bits_consumed() >= key_bits);
    }
}

#[test]
fn relayed_delivery_spends_key_on_both_hops() {
    let mut net = network(3, 10.0);
    net.advance_to(SimTime::from_secs(1));
    let m = BitString::from_bytes_truncated(&[0xA5; 63], 500);
    net.sever_node(ValidatorId(3));
    // v1 to v3 has no live path once v3 is cut off.
    net.rebuild_routes(&ids());
    assert!(matches!(
        net.transmit(ValidatorId(1), ValidatorId(3), &m),
        Err(QkdError::NoRoute(..))
    ));
    let mut net = network(3, 10.0);
    net.advance_to(SimTime::from_secs(1));
    let d = net.transmit(ValidatorId(2), ValidatorId(3), &m).unwrap();
    assert_eq!(d.hops, 2);
    assert_eq!(d.plaintext, m);
    assert_eq!(net.bits_consumed(), 2 * (500 + MAC_KEY_BITS));
}
