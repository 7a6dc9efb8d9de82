//! Shared fixtures for unit tests.

use std::collections::{BTreeMap, VecDeque};

use crate::alert::Alert;
use crate::client_node::{ClientNode, NodeError, NodeEvent, Outbound};
use crate::currency_manager::{CmEvent, CurrencyManager};
use crate::hash::Hasher;
use crate::integrity_manager::{ImConfig, IntegrityManager, ValidationOutcome};
use crate::peer_ledger::Purpose;
use crate::types::{Amount, ClientId, PairKey, Tick};

pub(crate) const CAP: Amount = 1_000_000;

/// Nodes plus both managers, with messages delivered in FIFO order.
pub(crate) struct Net {
    pub(crate) h: Hasher,
    pub(crate) nodes: BTreeMap<ClientId, ClientNode>,
    pub(crate) cm: CurrencyManager,
    pub(crate) im: IntegrityManager,
    pub(crate) alerts: Vec<Alert>,
    pub(crate) peer_messages: usize,
    pub(crate) manager_messages_before_commit: usize,
    pub(crate) clock: Tick,
}

impl Net {
    pub(crate) fn new(clients: u64) -> Self {
        let h = Hasher::default();
        let mut cm = CurrencyManager::with_supply_cap(h.clone(), CAP);
        let mut im = IntegrityManager::new(h.clone(), ImConfig::default());
        let mut nodes = BTreeMap::new();
        nodes.insert(ClientId::TREASURY, ClientNode::treasury(h.clone(), CAP, 8).unwrap());
        im.register_client(ClientId::TREASURY);
        for _ in 0..clients {
            let id = cm.enroll(vec![], None, "", 0);
            im.register_client(id);
            nodes.insert(id, ClientNode::new(h.clone(), id, None));
        }
        let mut net = Net {
            h,
            nodes,
            cm,
            im,
            alerts: Vec::new(),
            peer_messages: 0,
            manager_messages_before_commit: 0,
            clock: 0,
        };
        for c in 1..=clients {
            net.register(0, c);
        }
        net
    }

    pub(crate) fn register(&mut self, a: u64, b: u64) {
        let pair = PairKey::new(ClientId(a), ClientId(b)).unwrap();
        if a != 0 {
            self.cm.register_pair(ClientId(a), ClientId(b), true, true).unwrap();
        }
        self.im.register_pair(pair);
        self.nodes.get_mut(&ClientId(a)).unwrap().register_pair(pair);
        self.nodes.get_mut(&ClientId(b)).unwrap().register_pair(pair);
    }

    pub(crate) fn node(&self, id: u64) -> &ClientNode {
        &self.nodes[&ClientId(id)]
    }

    pub(crate) fn pay(&mut self, from: u64, to: u64, amount: Amount, ts: Tick) -> Result<Vec<NodeEvent>, NodeError> {
        let purpose = if from == 0 { Purpose::Issuance } else { Purpose::Transfer };
        let out = self
            .nodes
            .get_mut(&ClientId(from))
            .unwrap()
            .initiate(ClientId(to), amount, ts, purpose)?;
        Ok(self.deliver(ClientId(from), out))
    }

    pub(crate) fn deliver(&mut self, origin: ClientId, out: Vec<Outbound>) -> Vec<NodeEvent> {
        let mut queue: VecDeque<(ClientId, Outbound)> = out.into_iter().map(|o| (origin, o)).collect();
        let mut events = Vec::new();
        let mut committed = 0;
        while let Some((from, o)) = queue.pop_front() {
            self.clock += 1;
            let now = self.clock;
            match o {
                Outbound::Peer { to, msg } => {
                    self.peer_messages += 1;
                    let r = self.nodes.get_mut(&to).unwrap().handle(from, msg).unwrap();
                    committed += r.events.iter().filter(|e| matches!(e, NodeEvent::Committed { .. })).count();
                    events.extend(r.events);
                    queue.extend(r.out.into_iter().map(|o| (to, o)));
                }
                Outbound::Report(rep) => {
                    if committed < 2 {
                        self.manager_messages_before_commit += 1;
                    }
                    if let ValidationOutcome::Alert(a) = self.im.ingest(rep, now).unwrap() {
                        self.alerts.push(a);
                    }
                }
                Outbound::Balance(rep) => {
                    if committed < 2 {
                        self.manager_messages_before_commit += 1;
                    }
                    let evs = if rep.client.is_treasury() {
                        self.cm.record_treasury_leg(rep, now).unwrap()
                    } else {
                        self.cm.report_balance(rep, now).unwrap()
                    };
                    for e in evs {
                        match e {
                            CmEvent::Alert(a) => self.alerts.push(a),
                            CmEvent::Attested(att) => {
                                self.im.attest_mhtr(att.client, att.report_seq, att.mhtr);
                            }
                            CmEvent::Settled { .. } => {}
                        }
                    }
                }
                Outbound::CommitFailure(n) => {
                    if let ValidationOutcome::Alert(a) = self.im.commit_failure(n, now).unwrap() {
                        self.alerts.push(a);
                    }
                }
            }
        }
        events
    }

    pub(crate) fn issue(&mut self, to: u64, amount: Amount, ts: Tick) {
        self.cm.issue(ClientId(to), amount, ts).unwrap();
        self.pay(0, to, amount, ts).unwrap();
    }
}
