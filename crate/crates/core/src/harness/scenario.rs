//! Scenario files and the runner.
//!
//! Text form, one step per line, `#` starts a comment:
//!
//! ```text
//! seed 7
//! config deadline 20
//! enroll 3
//! register 1 2
//! issue 1 500 @10
//! transfer 1 2 120
//! expect balance 2 120
//! ```
//!
//! JSON form: `{"config": {...}, "steps": [{"op": "issue", ...}]}`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::alert::{Alert, AlertKind};
use crate::balance_mht::RecordKey;
use crate::currency_manager::ConservationVerdict;
use crate::data_client::Scope;
use crate::integrity_manager::MerkleHashGrid;
use crate::types::{Amount, ClientId, PairKey, Tick};

use super::fault::{Detection, FaultSpec};
use super::transport::DeliveryPolicy;
use super::world::{TransferOutcome, World, WorldConfig, WorldState};
use super::{Actor, HarnessError, SimulationLog};
use crate::balance_mht::{MAX_FANOUT, MIN_FANOUT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Step {
    Policy(DeliveryPolicy),
    Label {
        at: Tick,
        text: String,
    },
    Enroll {
        #[serde(default = "one")]
        count: usize,
        #[serde(default)]
        limit: Option<Amount>,
    },
    Register {
        a: ClientId,
        b: ClientId,
    },
    Issue {
        client: ClientId,
        amount: Amount,
        #[serde(default)]
        at: Option<Tick>,
    },
    Redeem {
        client: ClientId,
        amount: Amount,
        #[serde(default)]
        at: Option<Tick>,
    },
    Transfer {
        from: ClientId,
        to: ClientId,
        amount: Amount,
        #[serde(default)]
        at: Option<Tick>,
    },
    Repair {
        pair: PairKey,
        seq: u64,
        #[serde(default)]
        at: Option<Tick>,
    },
    Healthcheck,
    Quiesce,
    Capture,
    ResetEpoch {
        a: ClientId,
        b: ClientId,
    },
    Fault(FaultSpec),
    Persist {
        client: ClientId,
    },
    Wipe {
        client: ClientId,
    },
    Recover {
        client: ClientId,
    },
    Suspend {
        client: ClientId,
    },
    Grant {
        name: String,
        subject: ClientId,
        scopes: Vec<Scope>,
    },
    QueryPair {
        name: String,
        pair: PairKey,
        #[serde(default)]
        lo: Option<u64>,
        #[serde(default)]
        hi: Option<u64>,
    },
    QueryBalances {
        name: String,
        #[serde(default)]
        from: Option<Tick>,
        #[serde(default)]
        to: Option<Tick>,
    },
    ExpectAlert {
        kind: AlertKind,
        #[serde(default)]
        count: Option<usize>,
        #[serde(default)]
        pair: Option<PairKey>,
    },
    ExpectNoAlerts,
    ExpectBalance {
        client: ClientId,
        amount: Amount,
    },
    ExpectConservation {
        #[serde(default)]
        sum: Option<Amount>,
    },
    ExpectOutcome {
        outcome: OutcomeKind,
    },
    ExpectVerdict {
        correct: bool,
        complete: bool,
        fresh: bool,
    },
    ExpectDetections,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeKind {
    Committed,
    Rejected,
    Aborted,
    Refused,
}

impl OutcomeKind {
    fn of(o: &TransferOutcome) -> OutcomeKind {
        match o {
            TransferOutcome::Committed { .. } => OutcomeKind::Committed,
            TransferOutcome::Rejected { .. } => OutcomeKind::Rejected,
            TransferOutcome::Aborted => OutcomeKind::Aborted,
            TransferOutcome::Refused { .. } => OutcomeKind::Refused,
        }
    }

    fn name(self) -> &'static str {
        match self {
            OutcomeKind::Committed => "committed",
            OutcomeKind::Rejected => "rejected",
            OutcomeKind::Aborted => "aborted",
            OutcomeKind::Refused => "refused",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub config: WorldConfig,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ScenarioParseError {
    pub line: usize,
    pub message: String,
}

fn perr(line: usize, message: impl Into<String>) -> ScenarioParseError {
    ScenarioParseError {
        line,
        message: message.into(),
    }
}

struct Tokens<'a> {
    line: usize,
    words: Vec<&'a str>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str, ScenarioParseError> {
        let w = self
            .words
            .get(self.pos)
            .ok_or_else(|| perr(self.line, format!("missing {what}")))?;
        self.pos += 1;
        Ok(w)
    }

    fn peek(&self) -> Option<&'a str> {
        self.words.get(self.pos).copied()
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, ScenarioParseError> {
        let w = self.next(what)?;
        w.parse().map_err(|_| perr(self.line, format!("invalid {what} `{w}`")))
    }

    /// Optional trailing `@T`.
    fn at(&mut self) -> Result<Option<Tick>, ScenarioParseError> {
        match self.peek().and_then(|w| w.strip_prefix('@')) {
            Some(t) => {
                self.pos += 1;
                t.parse()
                    .map(Some)
                    .map_err(|_| perr(self.line, format!("invalid time `@{t}`")))
            }
            None => Ok(None),
        }
    }

    fn rest(&mut self) -> Vec<&'a str> {
        let r = self.words[self.pos..].to_vec();
        self.pos = self.words.len();
        r
    }

    fn done(&self) -> Result<(), ScenarioParseError> {
        match self.words.get(self.pos) {
            None => Ok(()),
            Some(w) => Err(perr(self.line, format!("unexpected `{w}`"))),
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioParseError> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            return Scenario::from_json(trimmed);
        }
        let mut sc = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut t = Tokens {
                line,
                words: content.split_whitespace().collect(),
                pos: 0,
            };
            let head = t.next("step")?;
            match head {
                "seed" | "config" if !sc.steps.is_empty() => {
                    return Err(perr(line, format!("`{head}` must come before the first step")));
                }
                "seed" => sc.config.seed = t.parse("seed")?,
                "config" => parse_config(&mut t, &mut sc.config)?,
                _ => {
                    let step = parse_step(head, &mut t)?;
                    if let Step::Policy(p) = &step {
                        p.validate().map_err(|m| perr(line, m))?;
                        if sc.steps.is_empty() {
                            sc.config.policy = *p;
                            continue;
                        }
                    }
                    sc.steps.push(step);
                }
            }
            t.done()?;
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioParseError> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| perr(e.line(), e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    fn validate(&self) -> Result<(), ScenarioParseError> {
        self.config.policy.validate().map_err(|m| perr(0, m))?;
        if !(MIN_FANOUT..=MAX_FANOUT).contains(&self.config.fanout) {
            return Err(perr(0, format!("fanout {} outside {MIN_FANOUT}..={MAX_FANOUT}", self.config.fanout)));
        }
        if self.config.supply_cap < 0 {
            return Err(perr(0, "supply cap must not be negative"));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal scenario.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "seed {}\nconfig deadline {}\nconfig fanout {}\nconfig cap {}\nconfig store-records {}\nconfig step-limit {}\n",
            c.seed, c.im.deadline, c.fanout, c.supply_cap, c.im.store_full_records, c.step_limit
        );
        if let Some(th) = c.critical_threshold {
            out.push_str(&format!("config threshold {th}\n"));
        }
        out.push_str(&Step::Policy(c.policy).to_string());
        out.push('\n');
        for s in &self.steps {
            out.push_str(&s.to_string());
            out.push('\n');
        }
        out
    }
}

fn parse_config(t: &mut Tokens<'_>, cfg: &mut WorldConfig) -> Result<(), ScenarioParseError> {
    match t.next("config key")? {
        "deadline" => cfg.im.deadline = t.parse("deadline")?,
        "fanout" => cfg.fanout = t.parse("fanout")?,
        "cap" => cfg.supply_cap = t.parse("cap")?,
        "threshold" => cfg.critical_threshold = Some(t.parse("threshold")?),
        "store-records" => cfg.im.store_full_records = t.parse("store-records flag")?,
        "step-limit" => cfg.step_limit = t.parse("step limit")?,
        k => return Err(perr(t.line, format!("unknown config key `{k}`"))),
    }
    Ok(())
}

fn parse_step(head: &str, t: &mut Tokens<'_>) -> Result<Step, ScenarioParseError> {
    let line = t.line;
    let step = match head {
        "policy" => match t.next("policy")? {
            "instant" => Step::Policy(DeliveryPolicy::INSTANT),
            "delay" => {
                let min_delay = t.parse("min delay")?;
                let max_delay = t.parse("max delay")?;
                let mut p = DeliveryPolicy {
                    min_delay,
                    max_delay,
                    duplicate: 0.0,
                    drop: 0.0,
                };
                while let Some(k) = t.peek() {
                    match k {
                        "dup" => {
                            t.pos += 1;
                            p.duplicate = t.parse("duplicate probability")?;
                        }
                        "drop" => {
                            t.pos += 1;
                            p.drop = t.parse("drop probability")?;
                        }
                        _ => break,
                    }
                }
                Step::Policy(p)
            }
            p => return Err(perr(line, format!("unknown policy `{p}`"))),
        },
        "label" => {
            let at = t.parse("label time")?;
            let text = t.rest().join(" ");
            if text.is_empty() {
                return Err(perr(line, "missing label text"));
            }
            Step::Label { at, text }
        }
        "enroll" => {
            let count = match t.peek() {
                Some(w) if w != "limit" => t.parse("count")?,
                _ => 1,
            };
            let limit = match t.peek() {
                Some("limit") => {
                    t.pos += 1;
                    Some(t.parse("limit")?)
                }
                _ => None,
            };
            Step::Enroll { count, limit }
        }
        "register" => Step::Register {
            a: t.parse("client")?,
            b: t.parse("client")?,
        },
        "issue" => Step::Issue {
            client: t.parse("client")?,
            amount: t.parse("amount")?,
            at: t.at()?,
        },
        "redeem" => Step::Redeem {
            client: t.parse("client")?,
            amount: t.parse("amount")?,
            at: t.at()?,
        },
        "transfer" => Step::Transfer {
            from: t.parse("payer")?,
            to: t.parse("payee")?,
            amount: t.parse("amount")?,
            at: t.at()?,
        },
        "repair" => {
            let a: ClientId = t.parse("client")?;
            let b: ClientId = t.parse("client")?;
            let pair = PairKey::new(a, b).ok_or_else(|| perr(line, "a pair needs two distinct clients"))?;
            Step::Repair {
                pair,
                seq: t.parse("pair sequence")?,
                at: t.at()?,
            }
        }
        "healthcheck" => Step::Healthcheck,
        "quiesce" => Step::Quiesce,
        "capture" => Step::Capture,
        "reset-epoch" => Step::ResetEpoch {
            a: t.parse("client")?,
            b: t.parse("client")?,
        },
        "fault" => Step::Fault(parse_fault(t)?),
        "persist" => Step::Persist { client: t.parse("client")? },
        "wipe" => Step::Wipe { client: t.parse("client")? },
        "recover" => Step::Recover { client: t.parse("client")? },
        "suspend" => Step::Suspend { client: t.parse("client")? },
        "grant" => {
            let name = t.next("data client name")?.to_string();
            let subject = t.parse("subject")?;
            let mut scopes = Vec::new();
            while let Some(k) = t.peek() {
                t.pos += 1;
                scopes.push(match k {
                    "pair" => Scope::Pair(t.parse("pair")?),
                    "seqs" => Scope::PairSeqs {
                        pair: t.parse("pair")?,
                        lo: t.parse("first sequence")?,
                        hi: t.parse("last sequence")?,
                    },
                    "balances" => Scope::Balances,
                    k => return Err(perr(line, format!("unknown scope `{k}`"))),
                });
            }
            if scopes.is_empty() {
                return Err(perr(line, "a grant needs at least one scope"));
            }
            Step::Grant { name, subject, scopes }
        }
        "query" => {
            let name = t.next("data client name")?.to_string();
            match t.next("query kind")? {
                "pair" => {
                    let pair = t.parse("pair")?;
                    let (lo, hi) = match t.peek() {
                        Some(_) => (Some(t.parse("first sequence")?), Some(t.parse("last sequence")?)),
                        None => (None, None),
                    };
                    Step::QueryPair { name, pair, lo, hi }
                }
                "balances" => {
                    let (from, to) = match t.peek() {
                        Some(_) => (Some(t.parse("from time")?), Some(t.parse("to time")?)),
                        None => (None, None),
                    };
                    Step::QueryBalances { name, from, to }
                }
                k => return Err(perr(line, format!("unknown query kind `{k}`"))),
            }
        }
        "expect" => parse_expect(t)?,
        h => return Err(perr(line, format!("unknown step `{h}`"))),
    };
    Ok(step)
}

fn parse_fault(t: &mut Tokens<'_>) -> Result<FaultSpec, ScenarioParseError> {
    let line = t.line;
    Ok(match t.next("fault kind")? {
        "tamper-leaf" => FaultSpec::TamperLeaf {
            client: t.parse("client")?,
            peer: t.parse("peer")?,
            leaf: t.parse("leaf index")?,
            byte: t.parse("byte index")?,
            mask: t.parse("mask")?,
        },
        "double-spend" => FaultSpec::DoubleSpend { client: t.parse("client")? },
        "replay-report" => FaultSpec::ReplayReport { client: t.parse("client")? },
        "forge-balance" => FaultSpec::ForgeBalance {
            client: t.parse("client")?,
            extra: t.parse("extra amount")?,
        },
        "crash-client" => FaultSpec::CrashClient { client: t.parse("client")? },
        "partition-manager" => FaultSpec::PartitionManager {
            duration: t.parse("duration")?,
        },
        "omit-record-in-query" => FaultSpec::OmitRecordInQuery {
            index: t.parse("record index")?,
        },
        k => return Err(perr(line, format!("unknown fault `{k}`"))),
    })
}

fn parse_expect(t: &mut Tokens<'_>) -> Result<Step, ScenarioParseError> {
    let line = t.line;
    Ok(match t.next("expectation")? {
        "alert" => {
            let kind = t.parse("alert kind")?;
            let (mut count, mut pair) = (None, None);
            while let Some(k) = t.peek() {
                t.pos += 1;
                match k {
                    "count" => count = Some(t.parse("count")?),
                    "pair" => pair = Some(t.parse("pair")?),
                    k => return Err(perr(line, format!("unexpected `{k}`"))),
                }
            }
            Step::ExpectAlert { kind, count, pair }
        }
        "no-alerts" => Step::ExpectNoAlerts,
        "balance" => Step::ExpectBalance {
            client: t.parse("client")?,
            amount: t.parse("amount")?,
        },
        "conservation" => Step::ExpectConservation {
            sum: match t.peek() {
                Some(_) => Some(t.parse("sum")?),
                None => None,
            },
        },
        "outcome" => Step::ExpectOutcome {
            outcome: match t.next("outcome")? {
                "committed" => OutcomeKind::Committed,
                "rejected" => OutcomeKind::Rejected,
                "aborted" => OutcomeKind::Aborted,
                "refused" => OutcomeKind::Refused,
                o => return Err(perr(line, format!("unknown outcome `{o}`"))),
            },
        },
        "verdict" => Step::ExpectVerdict {
            correct: t.parse("correct flag")?,
            complete: t.parse("complete flag")?,
            fresh: t.parse("fresh flag")?,
        },
        "detections" => Step::ExpectDetections,
        k => return Err(perr(line, format!("unknown expectation `{k}`"))),
    })
}

fn opt_at(at: &Option<Tick>) -> String {
    at.map(|t| format!(" @{t}")).unwrap_or_default()
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Policy(p) if *p == DeliveryPolicy::INSTANT => f.write_str("policy instant"),
            Step::Policy(p) => write!(
                f,
                "policy delay {} {} dup {} drop {}",
                p.min_delay, p.max_delay, p.duplicate, p.drop
            ),
            Step::Label { at, text } => write!(f, "label {at} {text}"),
            Step::Enroll { count, limit: None } => write!(f, "enroll {count}"),
            Step::Enroll { count, limit: Some(l) } => write!(f, "enroll {count} limit {l}"),
            Step::Register { a, b } => write!(f, "register {a} {b}"),
            Step::Issue { client, amount, at } => write!(f, "issue {client} {amount}{}", opt_at(at)),
            Step::Redeem { client, amount, at } => write!(f, "redeem {client} {amount}{}", opt_at(at)),
            Step::Transfer { from, to, amount, at } => write!(f, "transfer {from} {to} {amount}{}", opt_at(at)),
            Step::Repair { pair, seq, at } => write!(f, "repair {} {} {seq}{}", pair.lo(), pair.hi(), opt_at(at)),
            Step::Healthcheck => f.write_str("healthcheck"),
            Step::Quiesce => f.write_str("quiesce"),
            Step::Capture => f.write_str("capture"),
            Step::ResetEpoch { a, b } => write!(f, "reset-epoch {a} {b}"),
            Step::Fault(spec) => match *spec {
                FaultSpec::TamperLeaf {
                    client,
                    peer,
                    leaf,
                    byte,
                    mask,
                } => write!(f, "fault tamper-leaf {client} {peer} {leaf} {byte} {mask}"),
                FaultSpec::DoubleSpend { client } => write!(f, "fault double-spend {client}"),
                FaultSpec::ReplayReport { client } => write!(f, "fault replay-report {client}"),
                FaultSpec::ForgeBalance { client, extra } => write!(f, "fault forge-balance {client} {extra}"),
                FaultSpec::CrashClient { client } => write!(f, "fault crash-client {client}"),
                FaultSpec::PartitionManager { duration } => write!(f, "fault partition-manager {duration}"),
                FaultSpec::OmitRecordInQuery { index } => write!(f, "fault omit-record-in-query {index}"),
            },
            Step::Persist { client } => write!(f, "persist {client}"),
            Step::Wipe { client } => write!(f, "wipe {client}"),
            Step::Recover { client } => write!(f, "recover {client}"),
            Step::Suspend { client } => write!(f, "suspend {client}"),
            Step::Grant { name, subject, scopes } => {
                write!(f, "grant {name} {subject}")?;
                for s in scopes {
                    match s {
                        Scope::Pair(p) => write!(f, " pair {p}")?,
                        Scope::PairSeqs { pair, lo, hi } => write!(f, " seqs {pair} {lo} {hi}")?,
                        Scope::Balances => f.write_str(" balances")?,
                    }
                }
                Ok(())
            }
            Step::QueryPair { name, pair, lo, hi } => {
                write!(f, "query {name} pair {pair}")?;
                if let (Some(lo), Some(hi)) = (lo, hi) {
                    write!(f, " {lo} {hi}")?;
                }
                Ok(())
            }
            Step::QueryBalances { name, from, to } => {
                write!(f, "query {name} balances")?;
                if let (Some(a), Some(b)) = (from, to) {
                    write!(f, " {a} {b}")?;
                }
                Ok(())
            }
            Step::ExpectAlert { kind, count, pair } => {
                write!(f, "expect alert {kind}")?;
                if let Some(n) = count {
                    write!(f, " count {n}")?;
                }
                if let Some(p) = pair {
                    write!(f, " pair {p}")?;
                }
                Ok(())
            }
            Step::ExpectNoAlerts => f.write_str("expect no-alerts"),
            Step::ExpectBalance { client, amount } => write!(f, "expect balance {client} {amount}"),
            Step::ExpectConservation { sum: None } => f.write_str("expect conservation"),
            Step::ExpectConservation { sum: Some(s) } => write!(f, "expect conservation {s}"),
            Step::ExpectOutcome { outcome } => write!(f, "expect outcome {}", outcome.name()),
            Step::ExpectVerdict {
                correct,
                complete,
                fresh,
            } => write!(f, "expect verdict {correct} {complete} {fresh}"),
            Step::ExpectDetections => f.write_str("expect detections"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResult {
    pub index: usize,
    pub step: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub steps: Vec<StepResult>,
    pub alerts: Vec<Alert>,
    pub detections: Vec<Detection>,
    pub grids: Vec<MerkleHashGrid>,
    pub conservation: ConservationVerdict,
    pub state: WorldState,
    pub events_processed: u64,
    /// Set when a step failed hard and the run stopped there.
    pub aborted: Option<String>,
    pub log: SimulationLog,
}

impl RunReport {
    /// Every step ran and every expectation held.
    pub fn passed(&self) -> bool {
        self.aborted.is_none() && self.steps.iter().all(|s| s.ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &StepResult> {
        self.steps.iter().filter(|s| !s.ok)
    }
}

/// Executes steps one at a time against a world, recording results the way
/// [`run`] does. Used for interactive sessions.
pub struct Runner {
    world: World,
    seed: u64,
    results: Vec<StepResult>,
    last_outcome: Option<TransferOutcome>,
    aborted: Option<String>,
}

impl Runner {
    pub fn new(config: WorldConfig) -> Result<Runner, HarnessError> {
        Ok(Runner {
            world: World::new(config)?,
            seed: config.seed,
            results: Vec::new(),
            last_outcome: None,
            aborted: None,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn results(&self) -> &[StepResult] {
        &self.results
    }

    pub fn aborted(&self) -> Option<&str> {
        self.aborted.as_deref()
    }

    /// Runs one step. After an abort every further step is refused.
    pub fn step(&mut self, step: &Step) -> &StepResult {
        let index = self.results.len();
        let text = step.to_string();
        let (ok, detail) = if let Some(why) = &self.aborted {
            (false, format!("run aborted: {why}"))
        } else {
            self.world.note(Actor::Cm, "step", &text);
            match apply(&mut self.world, step, &mut self.last_outcome) {
                Ok(Check::Done(detail)) => (true, detail),
                Ok(Check::Failed(detail)) => {
                    self.world.note(Actor::Cm, "expect-failed", &detail);
                    (false, detail)
                }
                Err(e) => {
                    let detail = e.to_string();
                    self.world.note(Actor::Cm, "step-error", &detail);
                    if stops_run(&e) {
                        self.aborted = Some(detail.clone());
                    }
                    (false, detail)
                }
            }
        };
        self.results.push(StepResult {
            index,
            step: text,
            ok,
            detail,
        });
        self.results.last().expect("just pushed")
    }

    /// Report for everything run so far, without the final quiesce.
    pub fn report(&self) -> RunReport {
        let w = &self.world;
        RunReport {
            seed: self.seed,
            steps: self.results.clone(),
            alerts: w.alerts().to_vec(),
            detections: w.detections(),
            grids: w.grids().to_vec(),
            conservation: w.cm().check_conservation_now(),
            state: w.state(),
            events_processed: w.events_processed(),
            aborted: self.aborted.clone(),
            log: w.log().clone(),
        }
    }

    /// Drains outstanding messages and produces the final report.
    pub fn finish(mut self) -> (World, RunReport) {
        if self.aborted.is_none() {
            if let Err(e) = self.world.quiesce() {
                self.aborted = Some(e.to_string());
            }
        }
        let report = self.report();
        (self.world, report)
    }
}

/// Runs a scenario to completion. Only world construction errors are
/// returned; step failures are recorded in the report.
pub fn run(scenario: &Scenario) -> Result<(World, RunReport), HarnessError> {
    let mut runner = Runner::new(scenario.config)?;
    for step in &scenario.steps {
        runner.step(step);
        if runner.aborted().is_some() {
            break;
        }
    }
    Ok(runner.finish())
}

/// Parses and runs a scenario given as text or JSON.
pub fn run_text(text: &str) -> Result<(World, RunReport), ScenarioParseError> {
    let sc = Scenario::parse(text)?;
    run(&sc).map_err(|e| perr(0, e.to_string()))
}

fn stops_run(e: &HarnessError) -> bool {
    matches!(e, HarnessError::StepLimitExceeded(_) | HarnessError::Stalled(_))
}

enum Check {
    Done(String),
    Failed(String),
}

fn check(ok: bool, detail: String) -> Check {
    if ok {
        Check::Done(detail)
    } else {
        Check::Failed(detail)
    }
}

fn apply(w: &mut World, step: &Step, last: &mut Option<TransferOutcome>) -> Result<Check, HarnessError> {
    let done = |s: String| Ok(Check::Done(s));
    match step {
        Step::Policy(p) => {
            w.set_policy(*p)?;
            done(String::new())
        }
        Step::Label { at, text } => {
            w.set_label(*at, text.clone());
            done(String::new())
        }
        Step::Enroll { count, limit } => {
            let ids = (0..*count)
                .map(|_| w.enroll(*limit).map(|c| c.to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            done(format!("enrolled {}", ids.join(",")))
        }
        Step::Register { a, b } => done(format!("pair {}", w.register(*a, *b)?)),
        Step::Issue { client, amount, at } => outcome(last, w.issue(*client, *amount, *at)?),
        Step::Redeem { client, amount, at } => outcome(last, w.redeem(*client, *amount, *at)?),
        Step::Transfer { from, to, amount, at } => outcome(last, w.transfer(*from, *to, *amount, *at)?),
        Step::Repair { pair, seq, at } => outcome(last, w.repair(*pair, *seq, *at)?),
        Step::Healthcheck => {
            w.healthcheck()?;
            done(String::new())
        }
        Step::Quiesce => {
            w.quiesce()?;
            done(format!("clock {}", w.clock()))
        }
        Step::Capture => done(format!("grid {}", w.capture()?.grid_hash)),
        Step::ResetEpoch { a, b } => done(format!("archived root {}", w.reset_epoch(*a, *b)?)),
        Step::Fault(spec) => {
            w.inject(*spec)?;
            done(spec.kind().to_string())
        }
        Step::Persist { client } => {
            w.persist(*client)?;
            done(String::new())
        }
        Step::Wipe { client } => {
            w.wipe(*client)?;
            done(String::new())
        }
        Step::Recover { client } => done(format!("balance {}", w.recover(*client)?)),
        Step::Suspend { client } => {
            w.suspend(*client)?;
            done(String::new())
        }
        Step::Grant { name, subject, scopes } => {
            w.grant(name, *subject, scopes.clone())?;
            done(String::new())
        }
        Step::QueryPair { name, pair, lo, hi } => {
            let q = w.query_transactions(name, *pair, lo.unwrap_or(0), hi.unwrap_or(u64::MAX))?;
            done(format!("{} records {:?}", q.transactions.len(), q.verdict))
        }
        Step::QueryBalances { name, from, to } => {
            let lo = RecordKey::new(from.unwrap_or(0), 0);
            let hi = to.map_or(RecordKey::MAX, |t| RecordKey::new(t, u64::MAX));
            let q = w.query_balances(name, lo, hi)?;
            done(format!("{} records {:?}", q.balances.len(), q.verdict))
        }
        Step::ExpectAlert { kind, count, pair } => {
            let n = w
                .alerts()
                .iter()
                .filter(|a| a.kind == *kind && (pair.is_none() || a.pair == *pair))
                .count();
            let ok = match count {
                Some(c) => n == *c,
                None => n > 0,
            };
            Ok(check(ok, format!("{n} {kind} alerts")))
        }
        Step::ExpectNoAlerts => {
            let n = w.alerts().len();
            Ok(check(n == 0, format!("{n} alerts")))
        }
        Step::ExpectBalance { client, amount } => {
            let got = w
                .node(*client)
                .map(|n| n.balance())
                .ok_or_else(|| HarnessError::UnknownTarget(format!("client {client}")))?;
            Ok(check(got == *amount, format!("balance {got}")))
        }
        Step::ExpectConservation { sum } => {
            w.quiesce()?;
            let v = w.cm().check_conservation_now();
            let ok = match (v, sum) {
                (ConservationVerdict::Holds { sum: s }, Some(want)) => s == *want,
                (ConservationVerdict::Holds { .. }, None) => true,
                (ConservationVerdict::Violated { .. }, _) => false,
            };
            Ok(check(ok, format!("{v:?}")))
        }
        Step::ExpectOutcome { outcome: want } => {
            let got = last.as_ref().map(OutcomeKind::of);
            Ok(check(got == Some(*want), format!("{last:?}")))
        }
        Step::ExpectVerdict {
            correct,
            complete,
            fresh,
        } => {
            let got = w.verdicts().last().copied();
            let ok = got.is_some_and(|v| v.correct == *correct && v.complete == *complete && v.fresh == *fresh);
            Ok(check(ok, format!("{got:?}")))
        }
        Step::ExpectDetections => {
            w.quiesce()?;
            let ds = w.detections();
            let missed: Vec<String> = ds
                .iter()
                .filter(|d| !d.detected)
                .map(|d| format!("{} ({})", d.fault.kind(), d.detail))
                .collect();
            Ok(check(
                missed.is_empty(),
                if missed.is_empty() {
                    format!("{} faults detected", ds.len())
                } else {
                    format!("missed: {}", missed.join("; "))
                },
            ))
        }
    }
}

fn outcome(last: &mut Option<TransferOutcome>, o: TransferOutcome) -> Result<Check, HarnessError> {
    let detail = format!("{o:?}");
    *last = Some(o);
    Ok(Check::Done(detail))
}
