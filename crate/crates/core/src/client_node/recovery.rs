//! Rebuilding a wiped client from its partners' trees, the Integrity
//! Manager's validated roots and the Currency Manager's totals.

use std::collections::BTreeMap;

use crate::balance_mht::{BalanceChangeRecord, BalanceMht, BalanceTreeError};
use crate::currency_manager::ManagerView;
use crate::hash::{Digest, Hasher};
use crate::integrity_manager::IntegrityManager;
use crate::peer_ledger::{LedgerError, LocalView, PeerTransactionTree};
use crate::types::{Amount, ClientId, PairKey};

use super::genesis_record;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecoveryError {
    #[error("partner data for {pair} gives root {partner} but the validated root is {validated}")]
    PartnerRootDisagreement {
        pair: PairKey,
        partner: Digest,
        validated: Digest,
    },
    #[error("partner tree for {pair} does not involve client {client}")]
    ForeignPair { pair: PairKey, client: ClientId },
    #[error("currency manager unreachable or unaware of client {0}")]
    ManagerUnreachable(ClientId),
    #[error("recovered balance {recovered} differs from the manager's record {recorded}")]
    BalanceMismatch { recovered: Amount, recorded: Amount },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Tree(#[from] BalanceTreeError),
}

/// Transaction state rebuilt for one client.
#[derive(Debug, Clone)]
pub struct RebuiltState {
    pub ptts: BTreeMap<PairKey, PeerTransactionTree>,
    pub balance_tree: BalanceMht,
    pub local_views: BTreeMap<PairKey, Vec<LocalView>>,
}

impl RebuiltState {
    pub fn mhtr(&self) -> Digest {
        self.balance_tree.root()
    }
}

/// Rebuilds every pair tree from the partner's copy (identical by symmetry),
/// checks it against the Integrity Manager, then replays the balance tree.
pub fn recover_transactions(
    hasher: &Hasher,
    id: ClientId,
    fanout: usize,
    partners: Vec<PeerTransactionTree>,
    im: &IntegrityManager,
    genesis: Option<Amount>,
) -> Result<RebuiltState, RecoveryError> {
    let mut ptts = BTreeMap::new();
    for theirs in partners {
        let pair = theirs.pair();
        if !pair.contains(id) {
            return Err(RecoveryError::ForeignPair { pair, client: id });
        }
        let mut tree = theirs.rehydrate(hasher.clone())?;
        if tree.has_staged() {
            tree.rollback_staged()?;
        }
        check_against_arbiter(&tree, im)?;
        ptts.insert(pair, tree);
    }
    let balance_tree = replay_balances(hasher, id, fanout, &ptts, genesis)?;
    let local_views = derive_local_views(id, &ptts, &balance_tree);
    Ok(RebuiltState {
        ptts,
        balance_tree,
        local_views,
    })
}

fn check_against_arbiter(tree: &PeerTransactionTree, im: &IntegrityManager) -> Result<(), RecoveryError> {
    let pair = tree.pair();
    let disagree = |partner: Digest, validated: Digest| RecoveryError::PartnerRootDisagreement {
        pair,
        partner,
        validated,
    };
    let archived = tree.archived_roots();
    for (epoch, root) in im.archived_roots(pair) {
        match archived.iter().find(|(e, _)| *e == epoch) {
            Some((_, r)) if *r == root => {}
            Some((_, r)) => return Err(disagree(*r, root)),
            None => return Err(disagree(Digest::default(), root)),
        }
    }
    if let Some(att) = im.validated(pair) {
        let partner = tree.root_at(att.pair_seq).unwrap_or_default();
        if partner != att.pttr {
            return Err(disagree(partner, att.pttr));
        }
    }
    Ok(())
}

/// Replays every record of every pair in key order.
pub(crate) fn replay_balances(
    hasher: &Hasher,
    id: ClientId,
    fanout: usize,
    ptts: &BTreeMap<PairKey, PeerTransactionTree>,
    genesis: Option<Amount>,
) -> Result<BalanceMht, RecoveryError> {
    let mut changes = Vec::new();
    for (pair, t) in ptts {
        let peer = pair.other(id).expect("own pair");
        for r in t.all_records() {
            changes.push((r.timestamp, r.pair_seq, peer, r.delta_for(id), t.root_at(r.pair_seq)?));
        }
    }
    changes.sort_by_key(|c| (c.0, c.1));
    let mut tree = BalanceMht::with_fanout(hasher.clone(), fanout)?;
    let mut balance = 0;
    if let Some(cap) = genesis {
        tree.insert(genesis_record(hasher, cap))?;
        balance = cap;
    }
    for (timestamp, pair_seq, peer_id, delta, causing_pttr) in changes {
        balance += delta;
        tree.insert(BalanceChangeRecord {
            pair_seq,
            timestamp,
            peer_id,
            delta,
            new_balance: balance,
            causing_pttr,
        })?;
    }
    Ok(tree)
}

/// Local views from pair records plus the balances recorded beside them.
pub(crate) fn derive_local_views(
    id: ClientId,
    ptts: &BTreeMap<PairKey, PeerTransactionTree>,
    balances: &BalanceMht,
) -> BTreeMap<PairKey, Vec<LocalView>> {
    let after: BTreeMap<(ClientId, u64), Amount> = balances
        .records()
        .map(|r| ((r.peer_id, r.pair_seq), r.new_balance))
        .collect();
    let mut out = BTreeMap::new();
    for (pair, t) in ptts {
        let peer = pair.other(id).expect("own pair");
        let views: Vec<LocalView> = t
            .all_records()
            .into_iter()
            .filter_map(|r| {
                let new = *after.get(&(peer, r.pair_seq))?;
                let prior = new - r.delta_for(id);
                LocalView::new(r, id, prior)
            })
            .collect();
        if !views.is_empty() {
            out.insert(*pair, views);
        }
    }
    out
}

/// Balance from the conservation identity: everything in circulation minus
/// what every other client holds. Must agree with the manager's own row.
pub fn recover_balance(id: ClientId, view: &ManagerView) -> Result<Amount, RecoveryError> {
    let recorded = *view
        .open_balances
        .get(&id)
        .ok_or(RecoveryError::ManagerUnreachable(id))?;
    let others: Amount = view
        .open_balances
        .iter()
        .filter(|(c, _)| **c != id)
        .map(|(_, b)| *b)
        .sum();
    let recovered = view.total_issued - view.total_redeemed - others;
    if recovered != recorded {
        return Err(RecoveryError::BalanceMismatch { recovered, recorded });
    }
    Ok(recovered)
}
