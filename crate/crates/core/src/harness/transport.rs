//! Simulated network: a priority queue of deliveries keyed by
//! `(tick, insertion order)`, with seeded delay, duplication and loss.
//!
//! Every logical message has an id. Copies made by the network (duplicates,
//! retransmissions) share it and the receiver drops ids it has seen, so the
//! protocol sees each message once. A replay by an adversary is a new
//! message and gets a new id.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client_node::PeerMessage;
use crate::currency_manager::{BalanceReport, MhtrAttestation};
use crate::integrity_manager::{CommitFailureNotice, TransactionReport};
use crate::types::{ClientId, Tick};

use super::Actor;

/// After this many sends a message is no longer dropped.
const MAX_LOSSY_ATTEMPTS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeliveryPolicy {
    pub min_delay: Tick,
    pub max_delay: Tick,
    /// Probability that a send is delivered twice.
    pub duplicate: f64,
    /// Probability that a send is lost; lost messages are retransmitted.
    pub drop: f64,
}

impl Default for DeliveryPolicy {
    fn default() -> Self {
        DeliveryPolicy::INSTANT
    }
}

impl DeliveryPolicy {
    /// Every message arrives one tick after it was sent.
    pub const INSTANT: DeliveryPolicy = DeliveryPolicy {
        min_delay: 1,
        max_delay: 1,
        duplicate: 0.0,
        drop: 0.0,
    };

    pub fn validate(&self) -> Result<(), String> {
        if self.min_delay == 0 || self.max_delay < self.min_delay {
            return Err(format!("delay range {}..{} must satisfy 1 <= min <= max", self.min_delay, self.max_delay));
        }
        for (name, p) in [("duplicate", self.duplicate), ("drop", self.drop)] {
            if !(0.0..1.0).contains(&p) {
                return Err(format!("{name} probability {p} must be in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Backoff doubles twice then stays flat, so the guaranteed final
    /// attempt goes out within `27 * (2 * max_delay + 1)` ticks of the send.
    fn retransmit_after(&self, attempt: u32) -> Tick {
        (2 * self.max_delay + 1) << attempt.min(2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Peer(PeerMessage),
    Report(TransactionReport),
    Balance(BalanceReport),
    CommitFailure(CommitFailureNotice),
    Attest(MhtrAttestation),
    Ack(u64),
}

impl Payload {
    pub fn name(&self) -> &'static str {
        match self {
            Payload::Peer(m) => m.name(),
            Payload::Report(_) => "report",
            Payload::Balance(_) => "balance",
            Payload::CommitFailure(_) => "commit-failure",
            Payload::Attest(_) => "attest",
            Payload::Ack(_) => "ack",
        }
    }

    /// Short, deterministic description for the log.
    pub fn summary(&self) -> String {
        match self {
            Payload::Peer(PeerMessage::Propose(p)) => {
                format!("{}->{} amount={} seq={}", p.payer_id, p.payee_id, p.amount, p.pair_seq)
            }
            Payload::Peer(PeerMessage::Accept { record, root }) => format!("seq={} root={root}", record.pair_seq),
            Payload::Peer(PeerMessage::Reject { pair, pair_seq, reason }) => format!("pair={pair} seq={pair_seq} reason={reason}"),
            Payload::Peer(PeerMessage::Confirm { pair, pair_seq, root }) => format!("pair={pair} seq={pair_seq} root={root}"),
            Payload::Peer(PeerMessage::Abort { pair, pair_seq, .. }) => format!("pair={pair} seq={pair_seq}"),
            Payload::Report(r) => format!("pair={} seq={} pttr={}", r.pair, r.pair_seq, r.pttr),
            Payload::Balance(b) => format!(
                "client={} rseq={} delta={} balance={} mhtr={}",
                b.client, b.report_seq, b.delta, b.new_balance, b.mhtr
            ),
            Payload::CommitFailure(n) => format!("pair={} seq={}", n.pair, n.pair_seq),
            Payload::Attest(a) => format!("client={} mhtr={}", a.client, a.mhtr),
            Payload::Ack(id) => format!("msg={id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub id: u64,
    pub from: Actor,
    pub to: Actor,
    pub payload: Payload,
}

#[derive(Debug, Clone)]
pub(crate) enum Pending {
    Deliver(Envelope),
    Retransmit(u64),
}

/// What happened to one send, for the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SendFate {
    Scheduled { at: Tick, duplicate_at: Option<Tick> },
    Dropped,
}

#[derive(Debug, Clone)]
struct Unacked {
    env: Envelope,
    attempt: u32,
    not_before: Tick,
}

#[derive(Debug, Clone)]
pub(crate) struct Network {
    policy: DeliveryPolicy,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(Tick, u64)>>,
    events: BTreeMap<u64, Pending>,
    next_event: u64,
    next_msg: u64,
    unacked: BTreeMap<u64, Unacked>,
    seen: BTreeSet<(Actor, u64)>,
}

impl Network {
    pub fn new(seed: u64, policy: DeliveryPolicy) -> Self {
        Network {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            next_event: 0,
            next_msg: 1,
            unacked: BTreeMap::new(),
            seen: BTreeSet::new(),
        }
    }

    pub fn policy(&self) -> DeliveryPolicy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: DeliveryPolicy) {
        self.policy = policy;
    }

    fn lossy(&self) -> bool {
        self.policy.drop > 0.0
    }

    fn push(&mut self, at: Tick, p: Pending) {
        let seq = self.next_event;
        self.next_event += 1;
        self.queue.push(Reverse((at, seq)));
        self.events.insert(seq, p);
    }

    /// Sends a new message. Delivery happens no earlier than `not_before`.
    pub fn send(&mut self, now: Tick, from: Actor, to: Actor, payload: Payload, not_before: Tick) -> (u64, SendFate) {
        let id = self.next_msg;
        self.next_msg += 1;
        let env = Envelope { id, from, to, payload };
        let tracked = self.lossy() && !matches!(env.payload, Payload::Ack(_));
        let fate = self.transmit(now, env.clone(), 0, not_before);
        if tracked {
            self.unacked.insert(
                id,
                Unacked {
                    env,
                    attempt: 0,
                    not_before,
                },
            );
            let after = self.policy.retransmit_after(0);
            self.push(now + after, Pending::Retransmit(id));
        }
        (id, fate)
    }

    fn transmit(&mut self, now: Tick, env: Envelope, attempt: u32, not_before: Tick) -> SendFate {
        if self.policy.drop > 0.0 && attempt < MAX_LOSSY_ATTEMPTS && self.rng.gen_bool(self.policy.drop) {
            return SendFate::Dropped;
        }
        let at = self.delay(now).max(not_before);
        let duplicate_at = if self.policy.duplicate > 0.0 && self.rng.gen_bool(self.policy.duplicate) {
            let d = self.delay(now).max(not_before);
            self.push(d, Pending::Deliver(env.clone()));
            Some(d)
        } else {
            None
        };
        self.push(at, Pending::Deliver(env));
        SendFate::Scheduled { at, duplicate_at }
    }

    fn delay(&mut self, now: Tick) -> Tick {
        now + self.rng.gen_range(self.policy.min_delay..=self.policy.max_delay)
    }

    pub fn pop(&mut self) -> Option<(Tick, Pending)> {
        let Reverse((at, seq)) = self.queue.pop()?;
        let p = self.events.remove(&seq).expect("queued event is stored");
        Some((at, p))
    }

    /// Resends `id` if it is still unacknowledged. Returns the envelope and
    /// its fate when a copy went out.
    pub fn retransmit(&mut self, now: Tick, id: u64) -> Option<(Envelope, SendFate)> {
        let u = self.unacked.get_mut(&id)?;
        u.attempt += 1;
        let (env, attempt, not_before) = (u.env.clone(), u.attempt, u.not_before);
        let fate = self.transmit(now, env.clone(), attempt, not_before);
        if attempt >= MAX_LOSSY_ATTEMPTS {
            // This copy cannot be dropped.
            self.unacked.remove(&id);
        } else {
            let after = self.policy.retransmit_after(attempt);
            self.push(now + after, Pending::Retransmit(id));
        }
        Some((env, fate))
    }

    /// Records receipt of `env`. Returns false for a copy already seen.
    pub fn accept(&mut self, env: &Envelope) -> bool {
        self.seen.insert((env.to, env.id))
    }

    /// Whether the receiver should acknowledge `env`.
    pub fn wants_ack(&self, env: &Envelope) -> bool {
        self.lossy() && !matches!(env.payload, Payload::Ack(_))
    }

    pub fn acked(&mut self, id: u64) {
        self.unacked.remove(&id);
    }

    /// Messages not yet delivered (queued deliveries plus unacknowledged
    /// sends).
    pub fn in_flight(&self) -> usize {
        let queued = self
            .events
            .values()
            .filter(|p| matches!(p, Pending::Deliver(e) if !matches!(e.payload, Payload::Ack(_))))
            .count();
        queued.max(self.unacked.len())
    }

    /// Drops every queued copy addressed to `client`, as when it is wiped.
    pub fn discard_to(&mut self, client: ClientId) {
        let target = Actor::Client(client);
        self.events.retain(|_, p| !matches!(p, Pending::Deliver(e) if e.to == target));
        self.unacked.retain(|_, u| u.env.to != target);
        let live: BTreeSet<u64> = self.events.keys().copied().collect();
        self.queue.retain(|Reverse((_, seq))| live.contains(seq));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ack(n: u64) -> Payload {
        Payload::Ack(n)
    }

    fn drain(net: &mut Network) -> Vec<(Tick, u64)> {
        let mut out = Vec::new();
        while let Some((t, p)) = net.pop() {
            if let Pending::Deliver(e) = p {
                out.push((t, e.id));
            }
        }
        out
    }

    #[test]
    fn instant_policy_delivers_in_send_order() {
        let mut net = Network::new(1, DeliveryPolicy::INSTANT);
        for _ in 0..5 {
            net.send(10, Actor::Cm, Actor::Im, ack(0), 0);
        }
        assert_eq!(drain(&mut net), (1..=5).map(|id| (11, id)).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_schedule() {
        let policy = DeliveryPolicy {
            min_delay: 1,
            max_delay: 9,
            duplicate: 0.3,
            drop: 0.0,
        };
        let run = |seed| {
            let mut net = Network::new(seed, policy);
            for i in 0..50 {
                net.send(i, Actor::Cm, Actor::Im, ack(i), 0);
            }
            drain(&mut net)
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn duplicates_are_recognized() {
        let policy = DeliveryPolicy {
            min_delay: 1,
            max_delay: 3,
            duplicate: 0.5,
            drop: 0.0,
        };
        let mut net = Network::new(3, policy);
        for i in 0..40 {
            net.send(i, Actor::Cm, Actor::Im, Payload::Ack(i), 0);
        }
        let mut fresh = 0;
        let mut copies = 0;
        while let Some((_, p)) = net.pop() {
            if let Pending::Deliver(e) = p {
                if net.accept(&e) {
                    fresh += 1;
                } else {
                    copies += 1;
                }
            }
        }
        assert_eq!(fresh, 40);
        assert!(copies > 0);
    }

    #[test]
    fn lost_messages_are_retransmitted_until_acked() {
        let policy = DeliveryPolicy {
            min_delay: 1,
            max_delay: 2,
            duplicate: 0.0,
            drop: 0.6,
        };
        let mut net = Network::new(11, policy);
        let msg = Payload::Report(crate::integrity_manager::TransactionReport {
            reporter: ClientId(1),
            pair: crate::types::PairKey::new(ClientId(1), ClientId(2)).unwrap(),
            pair_seq: 1,
            epoch: 0,
            first_seq: 1,
            leaf_count: 1,
            pttr: Default::default(),
            record_digest: Default::default(),
            timestamp: 1,
            record_bytes: None,
        });
        let mut delivered = BTreeSet::new();
        for i in 0..30 {
            net.send(i, Actor::Client(ClientId(1)), Actor::Im, msg.clone(), 0);
        }
        while let Some((now, p)) = net.pop() {
            match p {
                Pending::Deliver(e) => {
                    if net.accept(&e) {
                        delivered.insert(e.id);
                    }
                    net.acked(e.id);
                }
                Pending::Retransmit(id) => {
                    net.retransmit(now, id);
                }
            }
        }
        assert_eq!(delivered.len(), 30);
        assert_eq!(net.in_flight(), 0);
    }

    #[test]
    fn partition_holds_delivery() {
        let mut net = Network::new(1, DeliveryPolicy::INSTANT);
        net.send(3, Actor::Client(ClientId(1)), Actor::Cm, ack(0), 50);
        assert_eq!(drain(&mut net), vec![(50, 1)]);
    }

    #[test]
    fn policy_validation() {
        assert!(DeliveryPolicy::INSTANT.validate().is_ok());
        let bad = DeliveryPolicy {
            min_delay: 0,
            ..DeliveryPolicy::INSTANT
        };
        assert!(bad.validate().is_err());
        let bad = DeliveryPolicy {
            drop: 1.0,
            ..DeliveryPolicy::INSTANT
        };
        assert!(bad.validate().is_err());
    }
}
