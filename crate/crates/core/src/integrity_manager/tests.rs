use std::sync::Arc;

use super::*;
use crate::hash::tag;
use crate::peer_ledger::{PeerTransactionTree, TransactionPairRecord};
use crate::signature::{Ed25519Scheme, INTEGRITY_MANAGER};

const A: ClientId = ClientId(1);
const B: ClientId = ClientId(2);

fn pair() -> PairKey {
    PairKey::new(A, B).unwrap()
}

fn record(seq: u64, amount: i64) -> TransactionPairRecord {
    TransactionPairRecord {
        pair_seq: seq,
        timestamp: seq,
        payer_id: A,
        payee_id: B,
        amount,
        payer_prior_commit: Digest::default(),
        payer_new_commit: Digest::default(),
        payee_prior_commit: Digest::default(),
        payee_new_commit: Digest::default(),
        payer_provenance: Digest::default(),
        payee_provenance: Digest::default(),
    }
}

fn report(h: &Hasher, who: ClientId, ptt: &PeerTransactionTree, rec: &TransactionPairRecord) -> TransactionReport {
    TransactionReport {
        reporter: who,
        pair: ptt.pair(),
        pair_seq: rec.pair_seq,
        epoch: ptt.epoch(),
        first_seq: ptt.first_seq(),
        leaf_count: ptt.len() as u64,
        pttr: ptt.root().unwrap(),
        record_digest: h.hash(&[&rec.encode()]),
        timestamp: rec.timestamp,
        record_bytes: Some(rec.encode()),
    }
}

fn manager(config: ImConfig) -> IntegrityManager {
    let mut im = IntegrityManager::new(Hasher::default(), config);
    im.register_client(A);
    im.register_client(B);
    im.register_pair(pair());
    im
}

/// Both parties' trees after `n` honest commits.
fn trees(n: u64) -> (PeerTransactionTree, PeerTransactionTree, Vec<TransactionPairRecord>) {
    let h = Hasher::default();
    let mut a = PeerTransactionTree::new(h.clone(), pair());
    let mut b = PeerTransactionTree::new(h, pair());
    let recs: Vec<_> = (1..=n).map(|s| record(s, 10 * s as i64)).collect();
    for r in &recs {
        a.append_committed(r).unwrap();
        b.append_committed(r).unwrap();
    }
    (a, b, recs)
}

#[test]
fn matching_reports_validate() {
    let h = Hasher::default();
    let mut im = manager(ImConfig::default());
    let (a, b, recs) = trees(1);
    let r = &recs[0];
    assert_eq!(im.ingest(report(&h, A, &a, r), 1).unwrap(), ValidationOutcome::Pending);
    assert_eq!(im.ingest(report(&h, B, &b, r), 2).unwrap(), ValidationOutcome::Validated);
    assert!(im.is_validated(pair(), 1));
    assert_eq!(im.validated(pair()).unwrap().pttr, a.root().unwrap());
    assert_eq!(im.pending_reports(), 0);
    assert!(im.tick(100).is_empty());
}

#[test]
fn unknown_reporter_and_pair_are_rejected() {
    let h = Hasher::default();
    let mut im = IntegrityManager::new(Hasher::default(), ImConfig::default());
    let (a, _, recs) = trees(1);
    assert_eq!(
        im.ingest(report(&h, A, &a, &recs[0]), 1),
        Err(ImError::UnknownReporter(A))
    );
    im.register_client(A);
    assert_eq!(
        im.ingest(report(&h, A, &a, &recs[0]), 1),
        Err(ImError::UnregisteredPair(pair()))
    );
}

#[test]
fn tampered_leaf_raises_one_mismatch_naming_both() {
    let h = Hasher::default();
    let mut im = manager(ImConfig::default());
    let (a, mut b, recs) = trees(3);
    b.tamper_leaf(1, 40, 0x80).unwrap();
    im.ingest(report(&h, A, &a, &recs[2]), 1).unwrap();
    let ValidationOutcome::Alert(alert) = im.ingest(report(&h, B, &b, &recs[2]), 1).unwrap() else {
        panic!("expected an alert");
    };
    assert_eq!(alert.kind, AlertKind::RootMismatch);
    assert_eq!(alert.subjects, vec![A, B]);
    assert!(alert.has_evidence(&format!("pttr[1]={}", a.root().unwrap())));
    assert!(im.is_flagged(pair()));
    assert!(!im.is_validated(pair(), 3));
}

#[test]
fn every_single_bit_tamper_is_detected() {
    let h = Hasher::default();
    let (a, b, recs) = trees(3);
    let honest = report(&h, A, &a, &recs[2]);
    for leaf in 0..3 {
        for byte in 0..crate::peer_ledger::RECORD_LEN {
            for bit in 0..8 {
                let mut t = b.clone();
                t.tamper_leaf(leaf, byte, 1 << bit).unwrap();
                let mut im = manager(ImConfig::default());
                im.ingest(honest.clone(), 1).unwrap();
                let out = im.ingest(report(&h, B, &t, &recs[2]), 1).unwrap();
                assert!(
                    matches!(&out, ValidationOutcome::Alert(a) if a.kind == AlertKind::RootMismatch),
                    "leaf {leaf} byte {byte} bit {bit}"
                );
            }
        }
    }
}

#[test]
fn replay_after_validation_is_flagged() {
    let h = Hasher::default();
    let mut im = manager(ImConfig::default());
    let (a, b, recs) = trees(1);
    let ra = report(&h, A, &a, &recs[0]);
    im.ingest(ra.clone(), 1).unwrap();
    im.ingest(report(&h, B, &b, &recs[0]), 1).unwrap();
    let ValidationOutcome::Alert(alert) = im.ingest(ra, 5).unwrap() else {
        panic!("expected replay alert");
    };
    assert_eq!(alert.kind, AlertKind::RootMismatch);
    assert!(alert.has_evidence("replay"));
    assert_eq!(alert.subjects, vec![A]);
}

#[test]
fn conflicting_second_report_from_same_party_is_replay() {
    let h = Hasher::default();
    let mut im = manager(ImConfig::default());
    let (a, _, recs) = trees(1);
    let ra = report(&h, A, &a, &recs[0]);
    im.ingest(ra.clone(), 1).unwrap();
    assert_eq!(im.ingest(ra.clone(), 2).unwrap(), ValidationOutcome::Pending);
    let mut other = ra;
    other.pttr = other.pttr.with_bit_flipped(0);
    let out = im.ingest(other, 3).unwrap();
    assert!(matches!(out, ValidationOutcome::Alert(a) if a.has_evidence("replay")));
}

#[test]
fn missing_counterpart_alert_after_deadline_then_late_validation() {
    let h = Hasher::default();
    let mut im = manager(ImConfig {
        deadline: 5,
        ..ImConfig::default()
    });
    let (a, b, recs) = trees(1);
    im.ingest(report(&h, A, &a, &recs[0]), 10).unwrap();
    assert!(im.tick(14).is_empty());
    let alerts = im.tick(15);
    assert_eq!(alerts.len(), 1);
    assert_eq!(alerts[0].kind, AlertKind::MissingCounterpartReport);
    assert_eq!(alerts[0].subjects, vec![B]);
    assert!(alerts[0].has_evidence("missing=2"));
    assert!(im.tick(30).is_empty());
    assert_eq!(im.ingest(report(&h, B, &b, &recs[0]), 31).unwrap(), ValidationOutcome::Validated);
}

#[test]
fn commit_failure_is_alerted_once_per_flag() {
    let mut im = manager(ImConfig::default());
    let notice = CommitFailureNotice {
        reporter: A,
        pair: pair(),
        pair_seq: 4,
        own_root: Digest::from_bytes([1; 32]),
        peer_root: Digest::from_bytes([2; 32]),
        timestamp: 4,
    };
    let out = im.commit_failure(notice.clone(), 4).unwrap();
    assert!(matches!(out, ValidationOutcome::Alert(a) if a.kind == AlertKind::RootMismatch && a.has_evidence("commit-failed")));
    assert_eq!(im.commit_failure(notice.clone(), 5).unwrap(), ValidationOutcome::Suppressed);
    im.clear_flag(pair());
    assert!(matches!(im.commit_failure(notice, 6).unwrap(), ValidationOutcome::Alert(_)));
}

#[test]
fn balance_cross_check() {
    let mut im = manager(ImConfig {
        deadline: 3,
        ..ImConfig::default()
    });
    let x = Digest::from_bytes([7; 32]);
    let y = Digest::from_bytes([8; 32]);
    assert_eq!(im.cross_check_balance(A, x, x, 0), ValidationOutcome::Validated);
    let out = im.cross_check_balance(A, x, y, 0);
    assert!(matches!(out, ValidationOutcome::Alert(a) if a.kind == AlertKind::BalanceCrossCheckFailure));

    // A fresh client holds the empty root.
    let empty = im.hasher.marker(tag::EMPTY_MHT);
    assert_eq!(im.sample_balance(A, empty, 0).unwrap(), ValidationOutcome::Validated);

    // Manager lagging: the sample waits and resolves when the root is attested.
    assert_eq!(im.sample_balance(A, x, 0).unwrap(), ValidationOutcome::Pending);
    im.attest_mhtr(A, 1, x);
    assert!(im.tick(10).is_empty());

    // Never attested: alert at the deadline.
    assert_eq!(im.sample_balance(B, y, 10).unwrap(), ValidationOutcome::Pending);
    assert!(im.tick(12).is_empty());
    let alerts = im.tick(13);
    assert_eq!(alerts.len(), 1);
    assert_eq!(alerts[0].kind, AlertKind::BalanceCrossCheckFailure);
    assert_eq!(alerts[0].subjects, vec![B]);
}

#[test]
fn archive_returns_validated_root() {
    let h = Hasher::default();
    let mut im = manager(ImConfig::default());
    let (a, b, recs) = trees(2);
    for r in &recs {
        im.ingest(report(&h, A, &a, r), 1).unwrap();
        im.ingest(report(&h, B, &b, r), 1).unwrap();
    }
    assert_eq!(im.archive(pair(), 0), a.root());
    assert_eq!(im.archived_root(pair(), 0), a.root());
    assert_eq!(im.archive(pair(), 1), None);
}

#[test]
fn record_storage_follows_configuration() {
    let h = Hasher::default();
    for full in [false, true] {
        let mut im = manager(ImConfig {
            store_full_records: full,
            ..ImConfig::default()
        });
        let (a, b, recs) = trees(1);
        let ra = report(&h, A, &a, &recs[0]);
        im.ingest(ra.clone(), 1).unwrap();
        im.ingest(report(&h, B, &b, &recs[0]), 1).unwrap();
        assert!(im.has_record(&ra.record_digest));
        assert_eq!(im.stored_record(&ra.record_digest).is_some(), full);
        im.store_record(Digest::from_bytes([3; 32]), Some(vec![1, 2]));
        assert_eq!(im.stored_record(&Digest::from_bytes([3; 32])).is_some(), full);
    }
}

#[test]
fn state_holds_no_balance_information() {
    let h = Hasher::default();
    let mut im = manager(ImConfig {
        store_full_records: false,
        ..ImConfig::default()
    });
    let (a, b, recs) = trees(2);
    for r in &recs {
        im.ingest(report(&h, A, &a, r), 1).unwrap();
        im.ingest(report(&h, B, &b, r), 1).unwrap();
    }
    im.attest_mhtr(A, 1, Digest::from_bytes([5; 32]));
    let json = serde_json::to_value(&im).unwrap();
    fn keys(v: &serde_json::Value, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, v) in m {
                    out.push(k.to_lowercase());
                    keys(v, out);
                }
            }
            serde_json::Value::Array(a) => a.iter().for_each(|v| keys(v, out)),
            _ => {}
        }
    }
    let mut names = Vec::new();
    keys(&json, &mut names);
    assert!(!names.is_empty());
    for forbidden in ["balance", "amount", "delta"] {
        assert!(
            names.iter().all(|n| !n.contains(forbidden)),
            "state field mentions {forbidden}: {names:?}"
        );
    }
    let back: IntegrityManager = serde_json::from_value(json).unwrap();
    let back = back.rehydrate(Hasher::default());
    assert_eq!(back.validated_set(), im.validated_set());
}

#[test]
fn restore_seeds_a_fresh_instance() {
    let h = Hasher::default();
    let mut im = manager(ImConfig::default());
    let (a, b, recs) = trees(2);
    for r in &recs {
        im.ingest(report(&h, A, &a, r), 1).unwrap();
        im.ingest(report(&h, B, &b, r), 1).unwrap();
    }
    let att = im.validated(pair()).unwrap();
    let mut fresh = manager(ImConfig::default());
    fresh.restore(att, &[]);
    assert_eq!(fresh.validated_roots(), im.validated_roots());
    let out = fresh.ingest(report(&h, A, &a, &recs[1]), 9).unwrap();
    assert!(matches!(out, ValidationOutcome::Alert(a) if a.has_evidence("replay")));
}

#[test]
fn grid_capture_requires_quiescence() {
    let mut keys = Keyring::new(Arc::new(Ed25519Scheme));
    keys.insert(INTEGRITY_MANAGER, [4; 32]);
    let im = manager(ImConfig::default());
    let mhtrs: BTreeMap<_, _> = [(A, Digest::from_bytes([1; 32])), (B, Digest::from_bytes([2; 32]))].into();
    let pttrs = BTreeMap::new();
    assert_eq!(
        im.capture_grid(&keys, 0, &[A, B], &mhtrs, &pttrs, 1),
        Err(GridError::NotQuiescent(1))
    );
    let g = im.capture_grid(&keys, 0, &[A, B], &mhtrs, &pttrs, 0).unwrap();
    assert_eq!(
        im.verify_grid(&g, &keys.directory(), &mhtrs, &pttrs).unwrap(),
        GridVerdict::Matches
    );
}
