//! The simulated system: clients, the issuance desk, both managers and the
//! network between them.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::alert::{Alert, AlertKind};
use crate::balance_mht::{BalanceChangeRecord, RecordKey, DEFAULT_FANOUT};
use crate::client_node::{
    recover_balance, recover_transactions, ArmedTamper, ClientNode, NodeEvent, Outbound, RecoveryError,
};
use crate::currency_manager::{CmEvent, ConservationVerdict, CurrencyManager, DEFAULT_SUPPLY_CAP};
use crate::data_client::{self, Grant, LatestRoots, Scope, Verdict, VerificationObject};
use crate::hash::{Digest, Hasher};
use crate::integrity_manager::{ImConfig, IntegrityManager, MerkleHashGrid, ValidationOutcome};
use crate::peer_ledger::{Purpose, TransactionPairRecord};
use crate::signature::{Ed25519Scheme, KeyDirectory, Keyring, CURRENCY_MANAGER, INTEGRITY_MANAGER};
use crate::types::{Amount, ClientId, PairKey, Tick, TimeLabels};

use super::fault::{Detection, FaultKind, FaultSpec};
use super::transport::{DeliveryPolicy, Envelope, Network, Payload, Pending, SendFate};
use super::{Actor, HarnessError, SimulationLog, DEFAULT_STEP_LIMIT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub fanout: usize,
    pub supply_cap: Amount,
    pub im: ImConfig,
    pub policy: DeliveryPolicy,
    pub step_limit: u64,
    /// Amounts at or above this are reported to the Integrity Manager in full.
    pub critical_threshold: Option<Amount>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            fanout: DEFAULT_FANOUT,
            supply_cap: DEFAULT_SUPPLY_CAP,
            im: ImConfig::default(),
            policy: DeliveryPolicy::INSTANT,
            step_limit: DEFAULT_STEP_LIMIT,
            critical_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferOutcome {
    Committed { pair: PairKey, pair_seq: u64 },
    Rejected { reason: String },
    Aborted,
    /// The payer refused to start, e.g. for lack of funds.
    Refused { reason: String },
}

impl TransferOutcome {
    pub fn is_committed(&self) -> bool {
        matches!(self, TransferOutcome::Committed { .. })
    }
}

/// Everything that must agree between two runs that delivered the same
/// messages: roots, balances and the validated set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub mhtrs: BTreeMap<ClientId, Digest>,
    #[serde(with = "crate::types::map_entries")]
    pub pttrs: BTreeMap<(ClientId, PairKey), Option<Digest>>,
    pub balances: BTreeMap<ClientId, Amount>,
    pub manager_balances: BTreeMap<ClientId, Amount>,
    pub validated: BTreeSet<(PairKey, u64)>,
    pub validated_roots: BTreeMap<PairKey, Digest>,
    pub attested: BTreeMap<ClientId, Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryOutput {
    pub transactions: Vec<TransactionPairRecord>,
    pub balances: Vec<BalanceChangeRecord>,
    pub vo: VerificationObject,
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
struct Injection {
    spec: FaultSpec,
    at: Tick,
    alert_index: usize,
    verdict_index: usize,
}

/// Derives a participant's signing secret from the world seed.
pub(crate) fn derive_secret(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"ddcs-sim-key");
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

pub(crate) fn world_keyring(seed: u64, clients: impl IntoIterator<Item = ClientId>) -> Keyring {
    let mut keys = Keyring::new(Arc::new(Ed25519Scheme));
    for label in [CURRENCY_MANAGER, INTEGRITY_MANAGER] {
        keys.insert(label, derive_secret(seed, label));
    }
    for c in clients {
        let label = c.signer_label();
        keys.insert(label.clone(), derive_secret(seed, &label));
    }
    keys
}

pub struct World {
    cfg: WorldConfig,
    hasher: Hasher,
    keys: Keyring,
    cm: CurrencyManager,
    im: IntegrityManager,
    nodes: BTreeMap<ClientId, ClientNode>,
    snapshots: BTreeMap<ClientId, Vec<u8>>,
    wiped: BTreeSet<ClientId>,
    net: Network,
    clock: Tick,
    business: Tick,
    labels: TimeLabels,
    log: SimulationLog,
    alerts: Vec<Alert>,
    events_processed: u64,
    node_events: Vec<(ClientId, NodeEvent)>,
    partition_until: Option<Tick>,
    crash_drops: BTreeMap<ClientId, u8>,
    last_reports: BTreeMap<ClientId, crate::integrity_manager::TransactionReport>,
    injections: Vec<Injection>,
    grids: Vec<MerkleHashGrid>,
    grants: BTreeMap<String, Grant>,
    verdicts: Vec<Verdict>,
    omit_next_query: Option<usize>,
    conservation: Vec<(Tick, ConservationVerdict)>,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<World, HarnessError> {
        cfg.policy.validate().map_err(HarnessError::Policy)?;
        let hasher = Hasher::default();
        let keys = world_keyring(cfg.seed, []);
        let cm = CurrencyManager::with_supply_cap(hasher.clone(), cfg.supply_cap);
        let mut im = IntegrityManager::new(hasher.clone(), cfg.im);
        im.register_client(ClientId::TREASURY);
        let desk = ClientNode::treasury(hasher.clone(), cfg.supply_cap, cfg.fanout)?;
        let mut nodes = BTreeMap::new();
        nodes.insert(ClientId::TREASURY, desk);
        let mut w = World {
            net: Network::new(cfg.seed, cfg.policy),
            cfg,
            hasher,
            keys,
            cm,
            im,
            nodes,
            snapshots: BTreeMap::new(),
            wiped: BTreeSet::new(),
            clock: 0,
            business: 0,
            labels: TimeLabels::new(),
            log: SimulationLog::default(),
            alerts: Vec::new(),
            events_processed: 0,
            node_events: Vec::new(),
            partition_until: None,
            crash_drops: BTreeMap::new(),
            last_reports: BTreeMap::new(),
            injections: Vec::new(),
            grids: Vec::new(),
            grants: BTreeMap::new(),
            verdicts: Vec::new(),
            omit_next_query: None,
            conservation: Vec::new(),
        };
        w.note(Actor::Cm, "start", format!("seed={} cap={} fanout={}", cfg.seed, cfg.supply_cap, cfg.fanout));
        Ok(w)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn hasher(&self) -> &Hasher {
        &self.hasher
    }

    pub fn keys(&self) -> &Keyring {
        &self.keys
    }

    pub fn directory(&self) -> KeyDirectory {
        self.keys.directory()
    }

    pub fn cm(&self) -> &CurrencyManager {
        &self.cm
    }

    pub fn im(&self) -> &IntegrityManager {
        &self.im
    }

    pub fn node(&self, id: ClientId) -> Option<&ClientNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> &BTreeMap<ClientId, ClientNode> {
        &self.nodes
    }

    /// Enrolled clients in enrollment order, without the issuance desk.
    pub fn clients(&self) -> Vec<ClientId> {
        self.cm.enrollment_order()
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn alerts_of(&self, kind: AlertKind) -> Vec<&Alert> {
        self.alerts.iter().filter(|a| a.kind == kind).collect()
    }

    pub fn log(&self) -> &SimulationLog {
        &self.log
    }

    pub fn clock(&self) -> Tick {
        self.clock
    }

    pub fn business_time(&self) -> Tick {
        self.business
    }

    pub fn labels(&self) -> &TimeLabels {
        &self.labels
    }

    pub fn set_label(&mut self, at: Tick, label: impl Into<String>) {
        self.labels.insert(at, label);
    }

    pub fn grids(&self) -> &[MerkleHashGrid] {
        &self.grids
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    pub fn snapshots(&self) -> &BTreeMap<ClientId, Vec<u8>> {
        &self.snapshots
    }

    /// Conservation verdict after every settlement, in order.
    pub fn conservation_history(&self) -> &[(Tick, ConservationVerdict)] {
        &self.conservation
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    pub fn in_flight(&self) -> usize {
        self.net.in_flight()
    }

    pub fn policy(&self) -> DeliveryPolicy {
        self.net.policy()
    }

    pub fn set_policy(&mut self, policy: DeliveryPolicy) -> Result<(), HarnessError> {
        policy.validate().map_err(HarnessError::Policy)?;
        self.net.set_policy(policy);
        self.note(
            Actor::Cm,
            "policy",
            format!(
                "delay={}..{} dup={} drop={}",
                policy.min_delay, policy.max_delay, policy.duplicate, policy.drop
            ),
        );
        Ok(())
    }

    /// Writes a free-form line, used by the scenario runner.
    pub fn note(&mut self, actor: Actor, event: &str, details: impl std::fmt::Display) {
        self.log.push(self.clock, actor, event, details);
    }

    /// Next business timestamp: `at` if given, else one past the last.
    pub fn next_time(&mut self, at: Option<Tick>) -> Result<Tick, HarnessError> {
        let t = at.unwrap_or(self.business + 1);
        if t <= self.business {
            return Err(HarnessError::NonIncreasingTime {
                last: self.business,
                got: t,
            });
        }
        self.business = t;
        Ok(t)
    }

    fn live(&self, id: ClientId) -> Result<(), HarnessError> {
        if self.nodes.contains_key(&id) {
            Ok(())
        } else if self.wiped.contains(&id) {
            Err(HarnessError::UnknownTarget(format!("client {id} is wiped")))
        } else {
            Err(HarnessError::UnknownTarget(format!("client {id}")))
        }
    }

    fn node_mut(&mut self, id: ClientId) -> Result<&mut ClientNode, HarnessError> {
        self.live(id)?;
        Ok(self.nodes.get_mut(&id).expect("checked live"))
    }

    // ---- membership ----------------------------------------------------

    pub fn enroll(&mut self, limit: Option<Amount>) -> Result<ClientId, HarnessError> {
        let next = ClientId(self.cm.enrollment_order().len() as u64 + 1);
        let label = next.signer_label();
        let public = self.keys.insert(label.clone(), derive_secret(self.cfg.seed, &label));
        let id = self.cm.enroll(public, limit, "", self.business);
        debug_assert_eq!(id, next);
        self.im.register_client(id);
        let mut node = ClientNode::with_fanout(self.hasher.clone(), id, limit, self.cfg.fanout)?;
        node.set_critical_threshold(self.cfg.critical_threshold);
        self.nodes.insert(id, node);
        let desk = PairKey::new(ClientId::TREASURY, id).expect("client ids start at 1");
        self.im.register_pair(desk);
        for c in [ClientId::TREASURY, id] {
            self.nodes.get_mut(&c).expect("present").register_pair(desk);
        }
        self.note(Actor::Cm, "enroll", format!("client={id} limit={}", limit.map_or("none".into(), |l| l.to_string())));
        Ok(id)
    }

    pub fn register(&mut self, a: ClientId, b: ClientId) -> Result<PairKey, HarnessError> {
        self.live(a)?;
        self.live(b)?;
        let reg = self.cm.register_pair(a, b, true, true)?;
        self.im.register_pair(reg.pair);
        for c in [a, b] {
            self.nodes.get_mut(&c).expect("live").register_pair(reg.pair);
        }
        self.note(Actor::Cm, "register", format!("pair={}", reg.pair));
        Ok(reg.pair)
    }

    pub fn suspend(&mut self, c: ClientId) -> Result<(), HarnessError> {
        self.cm.suspend(c, "scenario")?;
        self.node_mut(c)?.set_suspended(true);
        self.note(Actor::Cm, "suspend", format!("client={c}"));
        Ok(())
    }

    // ---- transactions --------------------------------------------------

    pub fn issue(&mut self, to: ClientId, amount: Amount, at: Option<Tick>) -> Result<TransferOutcome, HarnessError> {
        self.live(to)?;
        let ts = self.next_time(at)?;
        self.cm.issue(to, amount, ts)?;
        self.note(Actor::Cm, "issue", format!("client={to} amount={amount} at={ts}"));
        self.exchange(ClientId::TREASURY, to, amount, ts, Purpose::Issuance)
    }

    pub fn redeem(&mut self, from: ClientId, amount: Amount, at: Option<Tick>) -> Result<TransferOutcome, HarnessError> {
        self.live(from)?;
        let ts = self.next_time(at)?;
        self.cm.redeem(from, amount, ts)?;
        self.note(Actor::Cm, "redeem", format!("client={from} amount={amount} at={ts}"));
        self.exchange(from, ClientId::TREASURY, amount, ts, Purpose::Redemption)
    }

    /// `from` pays `to`. Returns once both parties finished the exchange;
    /// manager reports may still be in flight.
    pub fn transfer(&mut self, from: ClientId, to: ClientId, amount: Amount, at: Option<Tick>) -> Result<TransferOutcome, HarnessError> {
        self.live(from)?;
        self.live(to)?;
        let ts = self.next_time(at)?;
        self.exchange(from, to, amount, ts, Purpose::Transfer)
    }

    /// Reverses a settled transaction with a compensating transfer.
    pub fn repair(&mut self, pair: PairKey, pair_seq: u64, at: Option<Tick>) -> Result<TransferOutcome, HarnessError> {
        self.quiesce()?;
        let ts = self.next_time(at)?;
        let rec = self.cm.repair(pair, pair_seq, ts)?;
        self.note(
            Actor::Cm,
            "repair",
            format!("pair={pair} seq={pair_seq} payer={} payee={} amount={}", rec.payer, rec.payee, rec.amount),
        );
        let out = self.exchange(
            rec.payer,
            rec.payee,
            rec.amount,
            ts,
            Purpose::Reparation { original_seq: pair_seq },
        )?;
        self.im.clear_flag(pair);
        Ok(out)
    }

    fn exchange(&mut self, payer: ClientId, payee: ClientId, amount: Amount, ts: Tick, purpose: Purpose) -> Result<TransferOutcome, HarnessError> {
        self.live(payer)?;
        if self.live(payee).is_err() {
            let reason = format!("peer {payee} unreachable");
            self.note(Actor::Client(payer), "refused", &reason);
            return Ok(TransferOutcome::Refused { reason });
        }
        let out = match self.node_mut(payer)?.initiate(payee, amount, ts, purpose) {
            Ok(out) => out,
            Err(e) => {
                let reason = e.to_string();
                self.note(Actor::Client(payer), "refused", format!("to={payee} amount={amount} reason={reason}"));
                return Ok(TransferOutcome::Refused { reason });
            }
        };
        let mark = self.node_events.len();
        self.dispatch(payer, out);
        self.run_until(|w| w.idle(payer) && w.idle(payee))?;
        let outcome = self.node_events[mark..]
            .iter()
            .filter(|(c, _)| *c == payer)
            .find_map(|(_, e)| match e {
                NodeEvent::Committed { pair, pair_seq, .. } => Some(TransferOutcome::Committed {
                    pair: *pair,
                    pair_seq: *pair_seq,
                }),
                NodeEvent::Rejected { reason, .. } => Some(TransferOutcome::Rejected { reason: reason.clone() }),
                NodeEvent::Aborted { .. } => Some(TransferOutcome::Aborted),
            })
            .unwrap_or(TransferOutcome::Aborted);
        Ok(outcome)
    }

    fn idle(&self, c: ClientId) -> bool {
        self.nodes.get(&c).is_none_or(ClientNode::is_idle)
    }

    // ---- event loop ----------------------------------------------------

    fn run_until(&mut self, done: impl Fn(&World) -> bool) -> Result<(), HarnessError> {
        while !done(self) {
            if !self.step_event()? {
                return Err(HarnessError::Stalled("no events left before the exchange finished".into()));
            }
        }
        Ok(())
    }

    /// Processes one queued event. Returns false when the queue is empty.
    fn step_event(&mut self) -> Result<bool, HarnessError> {
        let Some((at, pending)) = self.net.pop() else {
            return Ok(false);
        };
        self.events_processed += 1;
        if self.events_processed > self.cfg.step_limit {
            return Err(HarnessError::StepLimitExceeded(self.cfg.step_limit));
        }
        self.advance(at);
        match pending {
            Pending::Retransmit(id) => {
                if let Some((env, fate)) = self.net.retransmit(self.clock, id) {
                    self.log_send(&env, fate, "resend");
                }
            }
            Pending::Deliver(env) => self.deliver(env),
        }
        Ok(true)
    }

    /// Moves the clock to `to`, firing Integrity Manager deadlines on the way.
    fn advance(&mut self, to: Tick) {
        while let Some(due) = self.im.next_due().filter(|d| *d <= to) {
            self.clock = self.clock.max(due);
            for a in self.im.tick(self.clock) {
                self.raise(Actor::Im, a);
            }
        }
        self.clock = self.clock.max(to);
    }

    fn send(&mut self, from: Actor, to: Actor, payload: Payload) {
        let not_before = match (to, self.partition_until) {
            (Actor::Cm | Actor::Im, Some(heal)) if heal > self.clock => heal,
            _ => 0,
        };
        let name = payload.name();
        let summary = payload.summary();
        let (id, fate) = self.net.send(self.clock, from, to, payload, not_before);
        let detail = format!("msg={id} to={to} {name} {summary}");
        self.log_fate(from, "send", detail, fate);
    }

    fn log_send(&mut self, env: &Envelope, fate: SendFate, event: &str) {
        let detail = format!("msg={} to={} {}", env.id, env.to, env.payload.name());
        self.log_fate(env.from, event, detail, fate);
    }

    fn log_fate(&mut self, from: Actor, event: &str, detail: String, fate: SendFate) {
        match fate {
            SendFate::Scheduled { at, duplicate_at: None } => self.note(from, event, format!("{detail} eta={at}")),
            SendFate::Scheduled { at, duplicate_at: Some(d) } => {
                self.note(from, event, format!("{detail} eta={at} dup-eta={d}"))
            }
            SendFate::Dropped => self.note(from, event, format!("{detail} dropped")),
        }
    }

    fn deliver(&mut self, env: Envelope) {
        if !self.net.accept(&env) {
            self.note(env.to, "dup", format!("msg={} from={}", env.id, env.from));
            if self.net.wants_ack(&env) {
                self.send(env.to, env.from, Payload::Ack(env.id));
            }
            return;
        }
        if let Payload::Ack(id) = env.payload {
            self.net.acked(id);
            return;
        }
        if self.net.wants_ack(&env) {
            self.send(env.to, env.from, Payload::Ack(env.id));
        }
        self.note(env.to, "recv", format!("msg={} from={} {}", env.id, env.from, env.payload.name()));
        let from = env.from;
        match (env.to, env.payload) {
            (Actor::Client(id), Payload::Peer(msg)) => {
                let Actor::Client(sender) = from else {
                    return;
                };
                let Some(node) = self.nodes.get_mut(&id) else {
                    self.note(env.to, "lost", format!("msg={}", env.id));
                    return;
                };
                match node.handle(sender, msg) {
                    Ok(r) => {
                        for e in &r.events {
                            self.log_node_event(id, e);
                        }
                        self.node_events.extend(r.events.into_iter().map(|e| (id, e)));
                        self.dispatch(id, r.out);
                    }
                    Err(e) => self.note(env.to, "error", e),
                }
            }
            (Actor::Cm, Payload::Balance(report)) => {
                let result = if report.client.is_treasury() {
                    self.cm.record_treasury_leg(report, self.clock)
                } else {
                    self.cm.report_balance(report, self.clock)
                };
                match result {
                    Ok(events) => self.on_cm_events(events),
                    Err(e) => self.note(Actor::Cm, "error", e),
                }
            }
            (Actor::Im, Payload::Report(report)) => {
                let (pair, seq) = (report.pair, report.pair_seq);
                let r = self.im.ingest(report, self.clock);
                self.on_im_outcome(r, format!("pair={pair} seq={seq}"));
            }
            (Actor::Im, Payload::CommitFailure(n)) => {
                let (pair, seq) = (n.pair, n.pair_seq);
                let r = self.im.commit_failure(n, self.clock);
                self.on_im_outcome(r, format!("pair={pair} seq={seq} commit-failure"));
            }
            (Actor::Im, Payload::Attest(att)) => {
                if !self.im.attest_mhtr(att.client, att.report_seq, att.mhtr) {
                    self.note(Actor::Im, "stale-attest", format!("client={} rseq={}", att.client, att.report_seq));
                }
            }
            (to, p) => self.note(to, "misrouted", p.name()),
        }
    }

    fn log_node_event(&mut self, id: ClientId, e: &NodeEvent) {
        let (event, detail) = match e {
            NodeEvent::Committed { pair, pair_seq, root } => ("commit", format!("pair={pair} seq={pair_seq} pttr={root}")),
            NodeEvent::Rejected { pair, pair_seq, reason } => ("reject", format!("pair={pair} seq={pair_seq} reason={reason}")),
            NodeEvent::Aborted { pair, pair_seq } => ("abort", format!("pair={pair} seq={pair_seq}")),
        };
        self.note(Actor::Client(id), event, detail);
    }

    fn on_cm_events(&mut self, events: Vec<CmEvent>) {
        for e in events {
            match e {
                CmEvent::Settled { pair, pair_seq, stamps } => {
                    let stamps: Vec<String> = stamps.iter().map(|s| format!("T{s}")).collect();
                    self.note(Actor::Cm, "settle", format!("pair={pair} seq={pair_seq} stamps={}", stamps.join(",")));
                    let v = self.cm.check_conservation_now();
                    self.conservation.push((self.clock, v));
                    let detail = match v {
                        ConservationVerdict::Holds { sum } => format!("holds sum={sum}"),
                        ConservationVerdict::Violated { sum, expected, discrepancy } => {
                            format!("violated sum={sum} expected={expected} discrepancy={discrepancy}")
                        }
                    };
                    self.note(Actor::Cm, "conservation", detail);
                }
                CmEvent::Attested(att) => self.send(Actor::Cm, Actor::Im, Payload::Attest(att)),
                CmEvent::Alert(a) => self.raise(Actor::Cm, a),
            }
        }
    }

    fn on_im_outcome(&mut self, r: Result<ValidationOutcome, crate::integrity_manager::ImError>, what: String) {
        match r {
            Ok(ValidationOutcome::Validated) => self.note(Actor::Im, "validated", what),
            Ok(ValidationOutcome::Pending) => self.note(Actor::Im, "pending", what),
            Ok(ValidationOutcome::Suppressed) => self.note(Actor::Im, "suppressed", what),
            Ok(ValidationOutcome::Alert(a)) => self.raise(Actor::Im, a),
            Err(e) => self.note(Actor::Im, "error", e),
        }
    }

    fn raise(&mut self, by: Actor, a: Alert) {
        self.note(by, "alert", &a);
        self.alerts.push(a);
    }

    fn dispatch(&mut self, from: ClientId, out: Vec<Outbound>) {
        let me = Actor::Client(from);
        for o in out {
            let manager_bound = matches!(o, Outbound::Report(_) | Outbound::Balance(_));
            if manager_bound {
                if let Some(left) = self.crash_drops.get_mut(&from) {
                    *left -= 1;
                    if *left == 0 {
                        self.crash_drops.remove(&from);
                    }
                    let what = match &o {
                        Outbound::Report(_) => "report",
                        _ => "balance",
                    };
                    self.note(me, "crash-drop", what);
                    continue;
                }
            }
            match o {
                Outbound::Peer { to, msg } => self.send(me, Actor::Client(to), Payload::Peer(msg)),
                Outbound::Report(r) => {
                    self.last_reports.insert(from, r.clone());
                    self.send(me, Actor::Im, Payload::Report(r));
                }
                Outbound::Balance(b) => self.send(me, Actor::Cm, Payload::Balance(b)),
                Outbound::CommitFailure(n) => self.send(me, Actor::Im, Payload::CommitFailure(n)),
            }
        }
    }

    /// Delivers everything in flight and lets every deadline pass.
    pub fn quiesce(&mut self) -> Result<(), HarnessError> {
        loop {
            while self.step_event()? {}
            match self.im.next_due() {
                Some(due) => self.advance(due),
                None => break,
            }
        }
        if let Some(heal) = self.partition_until {
            if heal <= self.clock {
                self.partition_until = None;
            }
        }
        Ok(())
    }

    /// Integrity Manager samples every live client's balance root.
    pub fn healthcheck(&mut self) -> Result<(), HarnessError> {
        let ids: Vec<ClientId> = self.nodes.keys().copied().filter(|c| !c.is_treasury()).collect();
        for c in ids {
            let mhtr = self.nodes[&c].mhtr();
            let r = self.im.sample_balance(c, mhtr, self.clock);
            self.on_im_outcome(r, format!("sample client={c}"));
        }
        Ok(())
    }

    /// Quiesces, then has the Integrity Manager sign a grid over the roots
    /// it validated.
    pub fn capture(&mut self) -> Result<MerkleHashGrid, HarnessError> {
        self.quiesce()?;
        let clients = self.clients();
        let mhtrs: BTreeMap<ClientId, Digest> = clients
            .iter()
            .filter_map(|c| self.im.attested_mhtr(*c).map(|m| (*c, m)))
            .collect();
        let pttrs: BTreeMap<PairKey, Digest> = self
            .im
            .validated_roots()
            .into_iter()
            .filter(|(p, _)| !p.lo().is_treasury())
            .collect();
        let epoch = self.grids.len() as u64;
        let grid = self
            .im
            .capture_grid(&self.keys, epoch, &clients, &mhtrs, &pttrs, self.net.in_flight())?;
        self.note(Actor::Im, "grid", format!("epoch={epoch} hash={}", grid.grid_hash));
        self.grids.push(grid.clone());
        Ok(grid)
    }

    /// Both parties sign the current root, archive it and start a new epoch.
    pub fn reset_epoch(&mut self, a: ClientId, b: ClientId) -> Result<Digest, HarnessError> {
        self.quiesce()?;
        self.live(a)?;
        self.live(b)?;
        let pair = PairKey::new(a, b).ok_or_else(|| HarnessError::UnknownTarget(format!("pair {a}:{b}")))?;
        let epoch = self.nodes[&a]
            .ptt(pair)
            .ok_or_else(|| HarnessError::UnknownTarget(format!("pair {pair}")))?
            .epoch();
        let sigs = vec![
            self.nodes[&a].sign_epoch(pair, &self.keys)?,
            self.nodes[&b].sign_epoch(pair, &self.keys)?,
        ];
        let dir = self.keys.directory();
        let mut root = Digest::default();
        for c in [a, b] {
            root = self.nodes.get_mut(&c).expect("live").reset_epoch(pair, &sigs, &dir)?;
        }
        self.im.archive(pair, epoch);
        self.note(Actor::Im, "archive", format!("pair={pair} epoch={epoch} root={root}"));
        Ok(root)
    }

    // ---- faults --------------------------------------------------------

    pub fn inject(&mut self, spec: FaultSpec) -> Result<(), HarnessError> {
        match spec {
            FaultSpec::TamperLeaf {
                client,
                peer,
                leaf,
                byte,
                mask,
            } => {
                let pair = PairKey::new(client, peer)
                    .ok_or_else(|| HarnessError::UnknownTarget(format!("pair {client}:{peer}")))?;
                let node = self.node_mut(client)?;
                if node.ptt(pair).is_none() {
                    return Err(HarnessError::UnknownTarget(format!("pair {pair} at client {client}")));
                }
                node.arm_tamper(ArmedTamper { pair, leaf, byte, mask });
            }
            FaultSpec::DoubleSpend { client } => self.node_mut(client)?.fork_balance_state()?,
            FaultSpec::ReplayReport { client } => {
                let report = self
                    .last_reports
                    .get(&client)
                    .cloned()
                    .ok_or_else(|| HarnessError::UnknownTarget(format!("no report sent by client {client}")))?;
                self.send(Actor::Client(client), Actor::Im, Payload::Report(report));
            }
            FaultSpec::ForgeBalance { client, extra } => self.node_mut(client)?.arm_forge(extra),
            FaultSpec::CrashClient { client } => {
                self.live(client)?;
                self.crash_drops.insert(client, 2);
            }
            FaultSpec::PartitionManager { duration } => {
                self.partition_until = Some(self.clock + duration);
            }
            FaultSpec::OmitRecordInQuery { index } => self.omit_next_query = Some(index),
        }
        self.note(Actor::Cm, "fault", format!("{spec:?}"));
        self.injections.push(Injection {
            spec,
            at: self.clock,
            alert_index: self.alerts.len(),
            verdict_index: self.verdicts.len(),
        });
        Ok(())
    }

    /// For every injected fault, whether its expected detection followed.
    pub fn detections(&self) -> Vec<Detection> {
        let mut out = Vec::new();
        for (i, inj) in self.injections.iter().enumerate() {
            let later = &self.alerts[inj.alert_index..];
            let names = |c: ClientId| move |a: &&Alert| a.subjects.contains(&c);
            let (detected, detail) = match inj.spec {
                FaultSpec::TamperLeaf { client, peer, .. } => {
                    let pair = PairKey::new(client, peer);
                    let n = later
                        .iter()
                        .filter(|a| a.kind == AlertKind::RootMismatch && a.pair == pair && !a.has_evidence("replay"))
                        .count();
                    (n == 1, format!("{n} RootMismatch alerts"))
                }
                FaultSpec::DoubleSpend { client } => {
                    let n = later
                        .iter()
                        .filter(|a| a.kind == AlertKind::StaleProvenance)
                        .filter(names(client))
                        .count();
                    (n > 0, format!("{n} StaleProvenance alerts"))
                }
                FaultSpec::ReplayReport { client } => {
                    let n = later
                        .iter()
                        .filter(|a| a.has_evidence("replay"))
                        .filter(names(client))
                        .count();
                    (n > 0, format!("{n} replay alerts"))
                }
                FaultSpec::ForgeBalance { .. } => {
                    let n = later.iter().filter(|a| a.kind == AlertKind::ConservationViolation).count();
                    (n > 0, format!("{n} ConservationViolation alerts"))
                }
                FaultSpec::CrashClient { client } => {
                    let n = later
                        .iter()
                        .filter(|a| a.kind == AlertKind::MissingCounterpartReport)
                        .filter(names(client))
                        .count();
                    (n > 0, format!("{n} MissingCounterpartReport alerts"))
                }
                FaultSpec::PartitionManager { .. } => {
                    let end = self
                        .injections
                        .get(i + 1)
                        .map_or(self.alerts.len(), |next| next.alert_index);
                    let n = end - inj.alert_index;
                    (n == 0, format!("{n} alerts during the partition"))
                }
                FaultSpec::OmitRecordInQuery { .. } => {
                    let v = self.verdicts[inj.verdict_index..].iter().find(|v| !v.complete);
                    (v.is_some(), format!("incomplete verdict seen: {}", v.is_some()))
                }
            };
            out.push(Detection {
                fault: inj.spec,
                injected_at: inj.at,
                detected,
                detail,
            });
        }
        out
    }

    pub fn fault_kinds(&self) -> BTreeSet<FaultKind> {
        self.injections.iter().map(|i| i.spec.kind()).collect()
    }

    // ---- persistence and recovery ----------------------------------------

    pub fn persist(&mut self, c: ClientId) -> Result<(), HarnessError> {
        let bytes = self
            .nodes
            .get(&c)
            .ok_or_else(|| HarnessError::UnknownTarget(format!("client {c}")))?
            .persist_snapshot()?;
        self.note(Actor::Client(c), "persist", format!("bytes={}", bytes.len()));
        self.snapshots.insert(c, bytes);
        Ok(())
    }

    /// Drops all volatile state of `c`. Messages still addressed to it are
    /// lost.
    pub fn wipe(&mut self, c: ClientId) -> Result<(), HarnessError> {
        if c.is_treasury() {
            return Err(HarnessError::UnknownTarget("the issuance desk cannot be wiped".into()));
        }
        self.quiesce()?;
        self.live(c)?;
        self.nodes.remove(&c);
        self.net.discard_to(c);
        self.wiped.insert(c);
        self.note(Actor::Client(c), "wipe", "");
        Ok(())
    }

    /// Restores `c` from its snapshot when that still matches its partners,
    /// else from the partners' trees under the Integrity Manager's roots.
    pub fn recover(&mut self, c: ClientId) -> Result<Amount, HarnessError> {
        if !self.wiped.contains(&c) {
            return Err(HarnessError::UnknownTarget(format!("client {c} is not wiped")));
        }
        self.quiesce()?;
        let partners: Vec<_> = self
            .nodes
            .iter()
            .filter_map(|(id, n)| PairKey::new(c, *id).and_then(|p| n.ptt(p)).cloned())
            .collect();
        let from_snapshot = self
            .snapshots
            .get(&c)
            .and_then(|b| ClientNode::load_snapshot(self.hasher.clone(), c, b).ok())
            .filter(|n| {
                partners.len() == n.ptts().len()
                    && partners.iter().all(|p| n.ptt(p.pair()).map(|t| t.root()) == Some(p.root()))
            });
        let limit = self.cm.client(c).and_then(|e| e.limit);
        let (mut node, source) = match from_snapshot {
            Some(n) => (n, "snapshot"),
            None => {
                let rebuilt = recover_transactions(&self.hasher, c, self.cfg.fanout, partners, &self.im, None)?;
                let report_seq = self.cm.next_report_seq(c).map_or(0, |s| s - 1);
                (ClientNode::from_rebuilt(self.hasher.clone(), c, limit, rebuilt, report_seq), "partners")
            }
        };
        node.set_critical_threshold(self.cfg.critical_threshold);
        let balance = recover_balance(c, &self.cm.manager_view())?;
        if balance != node.balance() {
            return Err(RecoveryError::BalanceMismatch {
                recovered: node.balance(),
                recorded: balance,
            }
            .into());
        }
        self.note(
            Actor::Client(c),
            "recover",
            format!("source={source} balance={balance} mhtr={}", node.mhtr()),
        );
        self.nodes.insert(c, node);
        self.wiped.remove(&c);
        Ok(balance)
    }

    // ---- data clients --------------------------------------------------

    pub fn grant(&mut self, name: &str, subject: ClientId, scopes: Vec<Scope>) -> Result<(), HarnessError> {
        let g = data_client::authorize(&self.cm, name, subject, scopes)?;
        self.note(Actor::Cm, "grant", format!("to={name} subject={subject} scopes={}", g.scopes.len()));
        self.grants.insert(name.to_string(), g);
        Ok(())
    }

    fn grant_for(&self, name: &str) -> Result<Grant, HarnessError> {
        self.grants
            .get(name)
            .cloned()
            .ok_or_else(|| HarnessError::UnknownTarget(format!("data client {name}")))
    }

    pub fn query_transactions(&mut self, name: &str, pair: PairKey, lo: u64, hi: u64) -> Result<QueryOutput, HarnessError> {
        let grant = self.grant_for(name)?;
        self.live(grant.subject)?;
        let (records, mut vo) = data_client::query_transactions(
            &grant,
            &self.nodes[&grant.subject],
            &self.im,
            &self.keys,
            pair,
            lo,
            hi,
        )?;
        if let Some(i) = self.omit_next_query.take() {
            vo.omit_record(i);
        }
        let verdict = self.verify(&vo);
        self.note(
            Actor::Cm,
            "verdict",
            format!(
                "client={name} pair={pair} seqs={lo}..={hi} records={} correct={} complete={} fresh={}",
                vo.record_count(),
                verdict.correct,
                verdict.complete,
                verdict.fresh
            ),
        );
        self.verdicts.push(verdict);
        Ok(QueryOutput {
            transactions: records,
            balances: Vec::new(),
            vo,
            verdict,
        })
    }

    pub fn query_balances(&mut self, name: &str, lo: RecordKey, hi: RecordKey) -> Result<QueryOutput, HarnessError> {
        let grant = self.grant_for(name)?;
        self.live(grant.subject)?;
        let (records, mut vo) =
            data_client::query_balances(&grant, &self.nodes[&grant.subject], &self.cm, &self.keys, lo, hi)?;
        if let Some(i) = self.omit_next_query.take() {
            vo.omit_record(i);
        }
        let verdict = self.verify(&vo);
        self.note(
            Actor::Cm,
            "verdict",
            format!(
                "client={name} balances={lo}..={hi} records={} correct={} complete={} fresh={}",
                vo.record_count(),
                verdict.correct,
                verdict.complete,
                verdict.fresh
            ),
        );
        self.verdicts.push(verdict);
        Ok(QueryOutput {
            transactions: Vec::new(),
            balances: records,
            vo,
            verdict,
        })
    }

    /// Verifies a VO against the managers' current roots.
    pub fn verify(&self, vo: &VerificationObject) -> Verdict {
        let latest = LatestRoots::from_managers(&self.cm, &self.im);
        data_client::verify_vo(&self.hasher, vo, &self.directory(), &latest)
    }

    // ---- inspection ----------------------------------------------------

    pub fn state(&self) -> WorldState {
        let mut pttrs = BTreeMap::new();
        for (id, n) in &self.nodes {
            for (pair, t) in n.ptts() {
                pttrs.insert((*id, *pair), t.root());
            }
        }
        let clients: Vec<ClientId> = self.nodes.keys().copied().collect();
        WorldState {
            mhtrs: self.nodes.iter().map(|(id, n)| (*id, n.mhtr())).collect(),
            pttrs,
            balances: self.nodes.iter().map(|(id, n)| (*id, n.balance())).collect(),
            manager_balances: self
                .clients()
                .into_iter()
                .map(|c| (c, self.cm.open_balance(c)))
                .collect(),
            validated: self.im.validated_set(),
            validated_roots: self.im.validated_roots(),
            attested: clients
                .into_iter()
                .filter_map(|c| self.im.attested_mhtr(c).map(|m| (c, m)))
                .collect(),
        }
    }

    /// Every live node passes its own consistency check.
    pub fn check_nodes(&self) -> Result<(), String> {
        for (id, n) in &self.nodes {
            n.check_consistency().map_err(|e| format!("client {id}: {e}"))?;
        }
        Ok(())
    }
}
