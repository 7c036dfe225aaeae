use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{otp_open, BitString, KeyBlock, LinkId, OffsetLedger, QkdError, QkdLink};
use super::{QkdLinkConfig, SealedMessage, MAC_KEY_BITS};
use crate::time::SimTime;
use crate::types::ValidatorId;

/// Key path between two validators, either a direct link or a relay through a
/// trusted hub that decrypts and re-seals on the next hop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    /// Nodes from the lower id to the higher id.
    pub path: Vec<ValidatorId>,
    pub hops: Vec<LinkId>,
}

impl Route {
    pub fn is_relayed(&self) -> bool {
        self.hops.len() > 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub plaintext: BitString,
    pub hops: usize,
    pub key_bits: u64,
}

fn pair(a: ValidatorId, b: ValidatorId) -> (ValidatorId, ValidatorId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// All QKD links of a deployment plus routing, receiver-side replay ledgers and
/// an optional wiretap that records every ciphertext put on the fibre.
#[derive(Clone, Debug)]
pub struct QkdNetwork {
    links: Vec<QkdLink>,
    routes: BTreeMap<(ValidatorId, ValidatorId), Route>,
    relays: Vec<ValidatorId>,
    received: BTreeMap<(ValidatorId, LinkId), OffsetLedger>,
    tap: Vec<SealedMessage>,
    tap_limit: usize,
    audit: ConservationAudit,
}

/// Conservation and ledger-disjointness checks run after every generation
/// step and every seal.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConservationAudit {
    pub checks: u64,
    pub violations: u64,
}

impl QkdNetwork {
    pub fn new(
        seed: u64,
        configs: Vec<QkdLinkConfig>,
        gen_start: SimTime,
    ) -> Result<Self, QkdError> {
        let mut links = Vec::with_capacity(configs.len());
        for (i, cfg) in configs.into_iter().enumerate() {
            let (a, b) = (cfg.endpoint_a, cfg.endpoint_b);
            if links
                .iter()
                .any(|l: &QkdLink| l.connects(a) && l.other_end(a) == Some(b))
            {
                return Err(QkdError::InvalidParameter(format!(
                    "duplicate link between {a} and {b}"
                )));
            }
            links.push(QkdLink::new(LinkId(i as u32), cfg, seed, gen_start)?);
        }
        Ok(QkdNetwork {
            links,
            routes: BTreeMap::new(),
            relays: Vec::new(),
            received: BTreeMap::new(),
            tap: Vec::new(),
            tap_limit: 0,
            audit: ConservationAudit::default(),
        })
    }

    pub fn links(&self) -> &[QkdLink] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> Option<&QkdLink> {
        self.links.get(id.0 as usize)
    }

    pub fn link_between(&self, a: ValidatorId, b: ValidatorId) -> Option<LinkId> {
        self.links
            .iter()
            .find(|l| l.connects(a) && l.other_end(a) == Some(b))
            .map(|l| l.id)
    }

    pub fn advance_to(&mut self, t: SimTime) {
        for l in &mut self.links {
            l.advance_to(t);
        }
        self.check();
    }

    fn check(&mut self) {
        self.audit.checks += 1;
        if !self.is_consistent() {
            self.audit.violations += 1;
        }
    }

    pub fn audit(&self) -> &ConservationAudit {
        &self.audit
    }

    /// Relay preference order used when two nodes lack a live direct link.
    pub fn set_relays(&mut self, relays: Vec<ValidatorId>) {
        self.relays = relays;
    }

    pub fn relays(&self) -> &[ValidatorId] {
        &self.relays
    }

    fn live_link(&self, a: ValidatorId, b: ValidatorId) -> Option<LinkId> {
        self.link_between(a, b)
            .filter(|id| self.links[id.0 as usize].is_up())
    }

    /// Recomputes a route for every pair of `nodes`. Pairs without any live path
    /// are left unrouted.
    pub fn rebuild_routes(&mut self, nodes: &[ValidatorId]) {
        self.routes.clear();
        for (i, &a) in nodes.iter().enumerate() {
            for &b in &nodes[i + 1..] {
                let (a, b) = pair(a, b);
                if let Some(direct) = self.live_link(a, b) {
                    self.routes.insert(
                        (a, b),
                        Route {
                            path: vec![a, b],
                            hops: vec![direct],
                        },
                    );
                    continue;
                }
                for &r in &self.relays {
                    if r == a || r == b {
                        continue;
                    }
                    if let (Some(h1), Some(h2)) = (self.live_link(a, r), self.live_link(r, b)) {
                        self.routes.insert(
                            (a, b),
                            Route {
                                path: vec![a, r, b],
                                hops: vec![h1, h2],
                            },
                        );
                        break;
                    }
                }
            }
        }
    }

    pub fn route(&self, a: ValidatorId, b: ValidatorId) -> Option<&Route> {
        self.routes.get(&pair(a, b))
    }

    pub fn routes(&self) -> impl Iterator<Item = (&(ValidatorId, ValidatorId), &Route)> {
        self.routes.iter()
    }

    /// Records up to `limit` ciphertexts seen on the wire from now on.
    pub fn enable_tap(&mut self, limit: usize) {
        self.tap_limit = limit;
    }

    pub fn tapped(&self) -> &[SealedMessage] {
        &self.tap
    }

    /// Seals `plaintext` on one link without delivering it.
    pub fn seal_on_link(
        &mut self,
        link: LinkId,
        from: ValidatorId,
        to: ValidatorId,
        plaintext: &BitString,
    ) -> Result<SealedMessage, QkdError> {
        let l = self
            .links
            .get_mut(link.0 as usize)
            .ok_or_else(|| QkdError::InvalidParameter(format!("unknown link {link}")))?;
        let msg = l.seal(from, to, plaintext);
        self.check();
        let msg = msg?;
        if self.tap.len() < self.tap_limit {
            self.tap.push(msg.clone());
        }
        Ok(msg)
    }

    /// Receiver side: rebuilds the key ranges named by `msg`, refuses ranges it
    /// has already used, then authenticates and decrypts.
    pub fn open(&mut self, receiver: ValidatorId, msg: &SealedMessage) -> Result<BitString, QkdError> {
        if msg.receiver != receiver {
            return Err(QkdError::KeyDesync(format!(
                "message addressed to {} opened by {receiver}",
                msg.receiver
            )));
        }
        let link = self
            .links
            .get(msg.link.0 as usize)
            .ok_or_else(|| QkdError::KeyDesync(format!("unknown link {}", msg.link)))?;
        if !link.connects(receiver) || link.other_end(receiver) != Some(msg.sender) {
            return Err(QkdError::KeyDesync(format!(
                "{} does not join {} and {receiver}",
                msg.link, msg.sender
            )));
        }
        let n = msg.ciphertext.len();
        let total = n + MAC_KEY_BITS;
        if msg.key_offset + total > link.buffer.next_offset {
            return Err(QkdError::KeyDesync(format!(
                "offset {} beyond distilled key on {}",
                msg.key_offset, msg.link
            )));
        }
        let ledger = self.received.entry((receiver, msg.link)).or_default();
        if ledger.intersects(msg.key_offset, total) {
            return Err(QkdError::KeyDesync(format!(
                "key range at {} on {} already used",
                msg.key_offset, msg.link
            )));
        }
        let stream = link.stream();
        let pad = KeyBlock {
            offset: msg.key_offset,
            length: n,
            bits: stream.bits_at(msg.key_offset, n),
        };
        let mac_key = KeyBlock {
            offset: msg.mac_key_offset(),
            length: MAC_KEY_BITS,
            bits: stream.bits_at(msg.mac_key_offset(), MAC_KEY_BITS),
        };
        let plaintext = otp_open(msg, &pad, &mac_key)?;
        ledger.insert(msg.key_offset, total);
        Ok(plaintext)
    }

    /// Sends `plaintext` along the current route, re-sealing at each relay.
    pub fn transmit(
        &mut self,
        from: ValidatorId,
        to: ValidatorId,
        plaintext: &BitString,
    ) -> Result<Delivery, QkdError> {
        let route = self
            .route(from, to)
            .cloned()
            .ok_or(QkdError::NoRoute(from, to))?;
        let mut path = route.path.clone();
        let mut hops = route.hops.clone();
        if path[0] != from {
            path.reverse();
            hops.reverse();
        }
        let mut data = plaintext.clone();
        let mut key_bits = 0;
        for (i, &hop) in hops.iter().enumerate() {
            let msg = self.seal_on_link(hop, path[i], path[i + 1], &data)?;
            key_bits += msg.key_bits();
            data = self.open(path[i + 1], &msg)?;
        }
        Ok(Delivery {
            plaintext: data,
            hops: hops.len(),
            key_bits,
        })
    }

    /// Takes every link touching `node` out of service. Returns the links cut.
    pub fn sever_node(&mut self, node: ValidatorId) -> Vec<LinkId> {
        let mut cut = Vec::new();
        for l in &mut self.links {
            if l.connects(node) && l.is_up() {
                l.sever(node);
                cut.push(l.id);
            }
        }
        cut
    }

    pub fn sever_link(&mut self, link: LinkId, provider: ValidatorId) {
        if let Some(l) = self.links.get_mut(link.0 as usize) {
            l.sever(provider);
        }
    }

    /// Buffer conservation and sender-ledger disjointness on every link.
    pub fn is_consistent(&self) -> bool {
        self.links.iter().all(|l| l.is_consistent())
    }

    pub fn overlap_count(&self) -> u64 {
        self.links.iter().map(|l| l.consumed.overlap_count()).sum()
    }

    pub fn messages_sealed(&self) -> u64 {
        self.links.iter().map(|l| l.messages_sealed).sum()
    }

    pub fn bits_generated(&self) -> u64 {
        self.links.iter().map(|l| l.buffer.generated_total).sum()
    }

    pub fn bits_consumed(&self) -> u64 {
        self.links.iter().map(|l| l.buffer.consumed_total).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(i: u64) -> ValidatorId {
        ValidatorId(i)
    }

    fn cfg(a: u64, b: u64) -> QkdLinkConfig {
        QkdLinkConfig {
            endpoint_a: v(a),
            endpoint_b: v(b),
            distance_km: 5.0,
            base_rate_r0: 1.0e6,
            attenuation_lambda: 0.05,
            buffer_capacity: 50_000_000,
        }
    }

    fn hub_net() -> QkdNetwork {
        let mut n = QkdNetwork::new(
            9,
            vec![cfg(0, 1), cfg(0, 2), cfg(0, 3), cfg(1, 2), cfg(1, 3)],
            SimTime::ZERO,
        )
        .unwrap();
        n.set_relays(vec![v(0), v(1)]);
        n.rebuild_routes(&[v(0), v(1), v(2), v(3)]);
        n.advance_to(SimTime::from_secs(1));
        n
    }

    #[test]
    fn relayed_delivery() {
        let mut n = hub_net();
        let r = n.route(v(3), v(2)).unwrap().clone();
        assert_eq!(r.path, vec![v(2), v(0), v(3)]);
        let m = BitString::from_bytes(b"vote");
        let d = n.transmit(v(3), v(2), &m).unwrap();
        assert_eq!(d.plaintext, m);
        assert_eq!(d.hops, 2);
        assert_eq!(d.key_bits, 2 * (32 + 256));
        assert!(n.is_consistent());
    }

    #[test]
    fn reroute_after_hub_loss() {
        let mut n = hub_net();
        let cut = n.sever_node(v(0));
        assert_eq!(cut.len(), 3);
        assert!(matches!(
            n.transmit(v(2), v(3), &BitString::zeros(8)),
            Err(QkdError::LinkDown { provider, .. }) if provider == v(0)
        ));
        n.set_relays(vec![v(1)]);
        n.rebuild_routes(&[v(1), v(2), v(3)]);
        assert_eq!(n.route(v(2), v(3)).unwrap().path, vec![v(2), v(1), v(3)]);
        assert!(n.transmit(v(2), v(3), &BitString::zeros(8)).is_ok());
    }

    #[test]
    fn replayed_ciphertext_is_refused() {
        let mut n = hub_net();
        let link = n.link_between(v(1), v(2)).unwrap();
        let msg = n
            .seal_on_link(link, v(1), v(2), &BitString::from_bytes(b"x"))
            .unwrap();
        assert!(n.open(v(2), &msg).is_ok());
        assert!(matches!(n.open(v(2), &msg), Err(QkdError::KeyDesync(_))));
    }

    #[test]
    fn forged_offset_is_refused() {
        let mut n = hub_net();
        let link = n.link_between(v(1), v(2)).unwrap();
        let mut msg = n
            .seal_on_link(link, v(1), v(2), &BitString::from_bytes(b"x"))
            .unwrap();
        msg.key_offset += 1_000_000;
        assert!(matches!(n.open(v(2), &msg), Err(QkdError::KeyDesync(_))));
    }

    #[test]
    fn tap_records_wire_traffic() {
        let mut n = hub_net();
        n.enable_tap(2);
        for _ in 0..3 {
            n.transmit(v(1), v(2), &BitString::zeros(16)).unwrap();
        }
        assert_eq!(n.tapped().len(), 2);
        assert_eq!(n.messages_sealed(), 3);
    }
}
