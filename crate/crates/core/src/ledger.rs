//! Community-currency accounts, the transfer log and resource pricing.
//!
//! Balances are integers. Prices are fixed-point rationals with a
//! denominator of 10^6 ([`Price`]), and any payment computed from prices is
//! rounded up to the next whole unit against the payer.

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::overlay::NodeId;
use crate::resources::{ResourceKind, Resources};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("account {0} does not exist")]
    UnknownAccount(NodeId),
    #[error("account {0} already exists")]
    DuplicateAccount(NodeId),
    #[error(
        "transfer of {amount} from {account} would take balance {balance} below credit limit -{credit_limit}"
    )]
    CreditLimitExceeded {
        account: NodeId,
        balance: i64,
        amount: u64,
        credit_limit: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub owner: NodeId,
    pub balance: i64,
    pub credit_limit: u64,
}

impl Account {
    pub fn can_pay(&self, amount: u64) -> bool {
        self.balance - amount as i64 >= -(self.credit_limit as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferReason {
    ServicePayment,
    Subsidy,
    HostingReward,
}

impl fmt::Display for TransferReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferReason::ServicePayment => "service-payment",
            TransferReason::Subsidy => "subsidy",
            TransferReason::HostingReward => "hosting-reward",
        })
    }
}

/// One entry of the append-only transfer log.
///
/// Minted currency appears with `from == NodeId::TREASURY`, burned currency
/// with `to == NodeId::TREASURY`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub at: SimTime,
    pub from: NodeId,
    pub to: NodeId,
    pub amount: u64,
    pub reason: TransferReason,
}

impl Transfer {
    pub fn is_mint(&self) -> bool {
        self.from == NodeId::TREASURY
    }

    pub fn is_burn(&self) -> bool {
        self.to == NodeId::TREASURY
    }
}

/// A ledger mutation, applied atomically in batches by [`Ledger::apply_batch`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LedgerOp {
    Transfer {
        from: NodeId,
        to: NodeId,
        amount: u64,
        reason: TransferReason,
    },
    Mint {
        to: NodeId,
        amount: u64,
        reason: TransferReason,
    },
    Burn {
        from: NodeId,
        amount: u64,
        reason: TransferReason,
    },
}

impl LedgerOp {
    /// Accounts touched by the op, excluding the treasury.
    pub fn parties(&self) -> Vec<NodeId> {
        match *self {
            LedgerOp::Transfer { from, to, .. } => vec![from, to],
            LedgerOp::Mint { to, .. } => vec![to],
            LedgerOp::Burn { from, .. } => vec![from],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    accounts: BTreeMap<NodeId, Account>,
    opening: BTreeMap<NodeId, i64>,
    log: Vec<Transfer>,
    minted: u64,
    burned: u64,
}

/// Snapshot of the mutable ledger state, for rollback and audits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerSnapshot {
    balances: BTreeMap<NodeId, i64>,
    log_len: usize,
    minted: u64,
    burned: u64,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_account(
        &mut self,
        owner: NodeId,
        balance: i64,
        credit_limit: u64,
    ) -> Result<(), LedgerError> {
        if self.accounts.contains_key(&owner) || owner == NodeId::TREASURY {
            return Err(LedgerError::DuplicateAccount(owner));
        }
        self.accounts.insert(
            owner,
            Account {
                owner,
                balance,
                credit_limit,
            },
        );
        self.opening.insert(owner, balance);
        Ok(())
    }

    pub fn account(&self, owner: &NodeId) -> Option<&Account> {
        self.accounts.get(owner)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &Account> {
        self.accounts.values()
    }

    pub fn balance(&self, owner: &NodeId) -> Option<i64> {
        self.accounts.get(owner).map(|a| a.balance)
    }

    pub fn log(&self) -> &[Transfer] {
        &self.log
    }

    pub fn minted(&self) -> u64 {
        self.minted
    }

    pub fn burned(&self) -> u64 {
        self.burned
    }

    pub fn opening_balances(&self) -> &BTreeMap<NodeId, i64> {
        &self.opening
    }

    pub fn opening_total(&self) -> i64 {
        self.opening.values().sum()
    }

    pub fn total_balance(&self) -> i64 {
        self.accounts.values().map(|a| a.balance).sum()
    }

    pub fn balances(&self) -> BTreeMap<NodeId, i64> {
        self.accounts
            .iter()
            .map(|(id, a)| (*id, a.balance))
            .collect()
    }

    fn debit_check(&self, from: &NodeId, amount: u64) -> Result<(), LedgerError> {
        let acct = self
            .accounts
            .get(from)
            .ok_or(LedgerError::UnknownAccount(*from))?;
        if !acct.can_pay(amount) {
            return Err(LedgerError::CreditLimitExceeded {
                account: *from,
                balance: acct.balance,
                amount,
                credit_limit: acct.credit_limit,
            });
        }
        Ok(())
    }

    /// Move `t.amount` from `t.from` to `t.to` and append `t` to the log.
    /// Rejected transfers leave the ledger untouched.
    pub fn transfer(&mut self, t: Transfer) -> Result<Transfer, LedgerError> {
        if !self.accounts.contains_key(&t.to) {
            return Err(LedgerError::UnknownAccount(t.to));
        }
        self.debit_check(&t.from, t.amount)?;
        if t.from != t.to {
            self.accounts.get_mut(&t.from).unwrap().balance -= t.amount as i64;
            self.accounts.get_mut(&t.to).unwrap().balance += t.amount as i64;
        }
        self.log.push(t.clone());
        Ok(t)
    }

    pub fn mint(
        &mut self,
        to: NodeId,
        amount: u64,
        reason: TransferReason,
        at: SimTime,
    ) -> Result<Transfer, LedgerError> {
        let acct = self
            .accounts
            .get_mut(&to)
            .ok_or(LedgerError::UnknownAccount(to))?;
        acct.balance += amount as i64;
        self.minted += amount;
        let t = Transfer {
            at,
            from: NodeId::TREASURY,
            to,
            amount,
            reason,
        };
        self.log.push(t.clone());
        Ok(t)
    }

    pub fn burn(
        &mut self,
        from: NodeId,
        amount: u64,
        reason: TransferReason,
        at: SimTime,
    ) -> Result<Transfer, LedgerError> {
        self.debit_check(&from, amount)?;
        self.accounts.get_mut(&from).unwrap().balance -= amount as i64;
        self.burned += amount;
        let t = Transfer {
            at,
            from,
            to: NodeId::TREASURY,
            amount,
            reason,
        };
        self.log.push(t.clone());
        Ok(t)
    }

    pub fn apply(&mut self, op: &LedgerOp, at: SimTime) -> Result<Transfer, LedgerError> {
        match *op {
            LedgerOp::Transfer {
                from,
                to,
                amount,
                reason,
            } => self.transfer(Transfer {
                at,
                from,
                to,
                amount,
                reason,
            }),
            LedgerOp::Mint { to, amount, reason } => self.mint(to, amount, reason, at),
            LedgerOp::Burn {
                from,
                amount,
                reason,
            } => self.burn(from, amount, reason, at),
        }
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            balances: self.balances(),
            log_len: self.log.len(),
            minted: self.minted,
            burned: self.burned,
        }
    }

    pub fn restore(&mut self, snap: &LedgerSnapshot) {
        for (id, bal) in &snap.balances {
            if let Some(a) = self.accounts.get_mut(id) {
                a.balance = *bal;
            }
        }
        self.log.truncate(snap.log_len);
        self.minted = snap.minted;
        self.burned = snap.burned;
    }

    /// Apply every op or none of them.
    pub fn apply_batch(
        &mut self,
        ops: &[LedgerOp],
        at: SimTime,
    ) -> Result<Vec<Transfer>, LedgerError> {
        let snap = self.snapshot();
        let mut applied = Vec::with_capacity(ops.len());
        for op in ops {
            match self.apply(op, at) {
                Ok(t) => applied.push(t),
                Err(e) => {
                    self.restore(&snap);
                    return Err(e);
                }
            }
        }
        Ok(applied)
    }

    /// Credit the host for `consumed` resources at `prices`. Under a minting
    /// policy the reward is created; otherwise it is paid by `payer`.
    pub fn settle_hosting_reward(
        &mut self,
        host: NodeId,
        payer: Option<NodeId>,
        consumed: &Resources,
        prices: &MarketPrice,
        at: SimTime,
    ) -> Result<Transfer, LedgerError> {
        let amount = prices.cost_of(consumed);
        match payer {
            None => self.mint(host, amount, TransferReason::HostingReward, at),
            Some(from) => self.transfer(Transfer {
                at,
                from,
                to: host,
                amount,
                reason: TransferReason::HostingReward,
            }),
        }
    }

    /// Rebuild balances from opening balances and a transfer log.
    pub fn replay(opening: &BTreeMap<NodeId, i64>, log: &[Transfer]) -> BTreeMap<NodeId, i64> {
        let mut balances = opening.clone();
        for t in log {
            if t.from != NodeId::TREASURY {
                *balances.entry(t.from).or_default() -= t.amount as i64;
            }
            if t.to != NodeId::TREASURY {
                *balances.entry(t.to).or_default() += t.amount as i64;
            }
        }
        balances
    }

    /// Export the log as CSV with columns `at,from,to,amount,reason`.
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        write_transfers_csv(&self.log, out)
    }
}

pub fn write_transfers_csv<W: io::Write>(log: &[Transfer], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["at", "from", "to", "amount", "reason"])?;
    for t in log {
        w.write_record([
            t.at.to_string(),
            t.from.to_string(),
            t.to.to_string(),
            t.amount.to_string(),
            t.reason.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Denominator of the fixed-point price representation.
pub const PRICE_SCALE: u64 = 1_000_000;

/// Currency units per resource unit, in millionths.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Price(pub u64);

impl Price {
    pub fn from_units(units: u64) -> Self {
        Price(units * PRICE_SCALE)
    }

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / PRICE_SCALE as f64
    }
}

impl fmt::Display for Price {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / PRICE_SCALE, self.0 % PRICE_SCALE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarketPrice {
    pub compute: Price,
    pub storage: Price,
    pub bandwidth: Price,
}

impl MarketPrice {
    pub fn uniform(p: Price) -> Self {
        MarketPrice {
            compute: p,
            storage: p,
            bandwidth: p,
        }
    }

    pub fn get(&self, kind: ResourceKind) -> Price {
        match kind {
            ResourceKind::Compute => self.compute,
            ResourceKind::Storage => self.storage,
            ResourceKind::Bandwidth => self.bandwidth,
        }
    }

    fn get_mut(&mut self, kind: ResourceKind) -> &mut Price {
        match kind {
            ResourceKind::Compute => &mut self.compute,
            ResourceKind::Storage => &mut self.storage,
            ResourceKind::Bandwidth => &mut self.bandwidth,
        }
    }

    /// Exact cost in millionths of a unit.
    pub fn cost_micros(&self, amounts: &Resources) -> u128 {
        ResourceKind::ALL
            .iter()
            .map(|&k| amounts.get(k) as u128 * self.get(k).0 as u128)
            .sum()
    }

    /// Cost in whole units, rounded up.
    pub fn cost_of(&self, amounts: &Resources) -> u64 {
        ceil_units(self.cost_micros(amounts))
    }
}

pub fn ceil_units(micros: u128) -> u64 {
    micros.div_ceil(PRICE_SCALE as u128) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketParams {
    pub alpha: f64,
    pub p_min: Price,
    pub p_max: Price,
}

impl Default for MarketParams {
    fn default() -> Self {
        MarketParams {
            alpha: 0.5,
            p_min: Price::from_units(1),
            p_max: Price::from_units(1000),
        }
    }
}

/// Demand/supply driven price setter.
#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    params: MarketParams,
    current: MarketPrice,
    ticks: u64,
}

impl Market {
    pub fn new(params: MarketParams, initial: MarketPrice) -> Self {
        let mut current = initial;
        for k in ResourceKind::ALL {
            let p = current.get_mut(k);
            *p = (*p).clamp(params.p_min, params.p_max);
        }
        Market {
            params,
            current,
            ticks: 0,
        }
    }

    pub fn prices(&self) -> &MarketPrice {
        &self.current
    }

    pub fn params(&self) -> &MarketParams {
        &self.params
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// `price' = clamp(price * (demand/supply)^alpha, p_min, p_max)` per
    /// resource; zero supply pins the price at `p_max`.
    pub fn update_prices(&mut self, demand: &Resources, supply: &Resources) -> MarketPrice {
        for k in ResourceKind::ALL {
            let next = next_price(
                self.current.get(k),
                demand.get(k),
                supply.get(k),
                &self.params,
            );
            *self.current.get_mut(k) = next;
        }
        self.ticks += 1;
        self.current
    }
}

fn next_price(price: Price, demand: u64, supply: u64, params: &MarketParams) -> Price {
    if supply == 0 {
        return params.p_max;
    }
    if demand == supply {
        return price.clamp(params.p_min, params.p_max);
    }
    let ratio = demand as f64 / supply as f64;
    // libm keeps results identical across platforms.
    let factor = libm::pow(ratio, params.alpha);
    let raw = libm::round(price.0 as f64 * factor);
    let micros = if raw >= u64::MAX as f64 {
        u64::MAX
    } else {
        raw as u64
    };
    Price(micros).clamp(params.p_min, params.p_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RngStream;
    use crate::overlay::generate_identity;

    fn ids(n: usize) -> Vec<NodeId> {
        let mut rng = RngStream::new(11, "ledger-test");
        (0..n).map(|_| generate_identity(&mut rng)).collect()
    }

    fn t(from: NodeId, to: NodeId, amount: u64) -> Transfer {
        Transfer {
            at: SimTime(1),
            from,
            to,
            amount,
            reason: TransferReason::ServicePayment,
        }
    }

    #[test]
    fn zero_transfer_only_grows_log() {
        let v = ids(2);
        let mut l = Ledger::new();
        l.open_account(v[0], 10, 0).unwrap();
        l.open_account(v[1], 0, 0).unwrap();
        l.transfer(t(v[0], v[1], 0)).unwrap();
        assert_eq!(l.balance(&v[0]), Some(10));
        assert_eq!(l.balance(&v[1]), Some(0));
        assert_eq!(l.log().len(), 1);
    }

    #[test]
    fn plain_transfer_conserves() {
        let v = ids(2);
        let mut l = Ledger::new();
        l.open_account(v[0], 10, 0).unwrap();
        l.open_account(v[1], 0, 0).unwrap();
        l.transfer(t(v[0], v[1], 4)).unwrap();
        assert_eq!(l.balance(&v[0]), Some(6));
        assert_eq!(l.balance(&v[1]), Some(4));
        assert_eq!(l.total_balance(), 10);
    }

    #[test]
    fn credit_limit_rejects_without_side_effects() {
        let v = ids(2);
        let mut l = Ledger::new();
        l.open_account(v[0], 0, 5).unwrap();
        l.open_account(v[1], 0, 0).unwrap();
        let before = l.clone();
        let err = l.transfer(t(v[0], v[1], 6)).unwrap_err();
        assert!(matches!(err, LedgerError::CreditLimitExceeded { .. }));
        assert_eq!(l, before);
        // Exactly at the floor is allowed.
        l.transfer(t(v[0], v[1], 5)).unwrap();
        assert_eq!(l.balance(&v[0]), Some(-5));
    }

    #[test]
    fn unknown_account() {
        let v = ids(2);
        let mut l = Ledger::new();
        l.open_account(v[0], 5, 0).unwrap();
        assert_eq!(
            l.transfer(t(v[0], v[1], 1)),
            Err(LedgerError::UnknownAccount(v[1]))
        );
    }

    #[test]
    fn batch_rolls_back_to_snapshot() {
        let v = ids(3);
        let mut l = Ledger::new();
        l.open_account(v[0], 10, 0).unwrap();
        l.open_account(v[1], 10, 0).unwrap();
        l.open_account(v[2], 0, 2).unwrap();
        let snap = l.snapshot();
        let ops = vec![
            LedgerOp::Transfer {
                from: v[0],
                to: v[1],
                amount: 3,
                reason: TransferReason::ServicePayment,
            },
            LedgerOp::Mint {
                to: v[2],
                amount: 1,
                reason: TransferReason::HostingReward,
            },
            LedgerOp::Transfer {
                from: v[2],
                to: v[0],
                amount: 4,
                reason: TransferReason::Subsidy,
            },
        ];
        assert!(l.apply_batch(&ops, SimTime(2)).is_err());
        assert_eq!(l.snapshot(), snap);
        assert!(l.log().is_empty());
        assert_eq!(l.minted(), 0);
    }

    #[test]
    fn mint_and_burn_are_audited() {
        let v = ids(2);
        let mut l = Ledger::new();
        l.open_account(v[0], 0, 0).unwrap();
        l.open_account(v[1], 5, 0).unwrap();
        l.mint(v[0], 7, TransferReason::HostingReward, SimTime(1))
            .unwrap();
        l.burn(v[1], 3, TransferReason::ServicePayment, SimTime(2))
            .unwrap();
        assert_eq!(
            l.total_balance(),
            l.opening_total() + l.minted() as i64 - l.burned() as i64
        );
        assert_eq!(Ledger::replay(l.opening_balances(), l.log()), l.balances());
    }

    #[test]
    fn hosting_reward_arithmetic() {
        let v = ids(2);
        let mut l = Ledger::new();
        l.open_account(v[0], 0, 0).unwrap();
        l.open_account(v[1], 100, 0).unwrap();
        let prices = MarketPrice {
            compute: Price::from_units(2),
            storage: Price::from_units(1),
            bandwidth: Price::from_units(1),
        };
        let zero = l
            .settle_hosting_reward(v[0], None, &Resources::ZERO, &prices, SimTime(0))
            .unwrap();
        assert_eq!(zero.amount, 0);
        let r = l
            .settle_hosting_reward(
                v[0],
                Some(v[1]),
                &Resources::new(3, 0, 0),
                &prices,
                SimTime(0),
            )
            .unwrap();
        assert_eq!(r.amount, 6);
        assert_eq!(l.balance(&v[1]), Some(94));
        assert_eq!(l.total_balance(), 100);
    }

    #[test]
    fn cost_rounds_up_against_payer() {
        let p = MarketPrice::uniform(Price(1_500_000));
        assert_eq!(p.cost_of(&Resources::new(1, 0, 0)), 2);
        assert_eq!(p.cost_of(&Resources::new(2, 0, 0)), 3);
        assert_eq!(p.cost_of(&Resources::ZERO), 0);
    }

    fn market(price: u64, p_max: u64) -> Market {
        Market::new(
            MarketParams {
                alpha: 0.5,
                p_min: Price::from_units(1),
                p_max: Price::from_units(p_max),
            },
            MarketPrice::uniform(Price::from_units(price)),
        )
    }

    #[test]
    fn balanced_market_is_stable() {
        let mut m = market(10, 100);
        let s = Resources::new(50, 50, 50);
        assert_eq!(m.update_prices(&s, &s), MarketPrice::uniform(Price::from_units(10)));
    }

    #[test]
    fn fourfold_demand_doubles_price() {
        let mut m = market(10, 100);
        let p = m.update_prices(&Resources::new(40, 40, 40), &Resources::new(10, 10, 10));
        assert_eq!(p.compute, Price::from_units(20));
    }

    #[test]
    fn zero_supply_pins_price_at_max() {
        let mut m = market(10, 100);
        let p = m.update_prices(&Resources::new(1, 0, 0), &Resources::new(0, 5, 5));
        assert_eq!(p.compute, Price::from_units(100));
    }

    #[test]
    fn zero_demand_reaches_floor() {
        // Iterate the rule until the price stops moving.
        let mut m = market(500, 1000);
        let mut last = *m.prices();
        for _ in 0..100 {
            let next = m.update_prices(&Resources::ZERO, &Resources::new(10, 10, 10));
            if next == last {
                break;
            }
            last = next;
        }
        assert_eq!(last, MarketPrice::uniform(Price::from_units(1)));
    }

    #[test]
    fn csv_export_columns() {
        let v = ids(2);
        let mut l = Ledger::new();
        l.open_account(v[0], 3, 0).unwrap();
        l.open_account(v[1], 0, 0).unwrap();
        l.transfer(t(v[0], v[1], 2)).unwrap();
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("at,from,to,amount,reason"));
        assert_eq!(
            lines.next().unwrap(),
            format!("1,{},{},2,service-payment", v[0], v[1])
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn prices_stay_in_bounds(
                start in 1u64..=1000,
                steps in proptest::collection::vec((0u64..10_000, 0u64..10_000), 1..40)
            ) {
                let mut m = market(start, 1000);
                for (d, s) in steps {
                    let p = m.update_prices(&Resources::new(d, d / 2, d * 2), &Resources::new(s, s, s));
                    for k in ResourceKind::ALL {
                        prop_assert!(p.get(k) >= Price::from_units(1));
                        prop_assert!(p.get(k) <= Price::from_units(1000));
                    }
                }
            }

            #[test]
            fn random_transfers_conserve_and_replay(
                ops in proptest::collection::vec((0usize..4, 0usize..4, 0u64..50), 0..200)
            ) {
                let v = ids(4);
                let mut l = Ledger::new();
                for (i, id) in v.iter().enumerate() {
                    l.open_account(*id, 20 * i as i64, 10).unwrap();
                }
                let total = l.total_balance();
                for (a, b, amt) in ops {
                    let _ = l.transfer(t(v[a], v[b], amt));
                    for acct in l.accounts() {
                        prop_assert!(acct.balance >= -(acct.credit_limit as i64));
                    }
                }
                prop_assert_eq!(l.total_balance(), total);
                prop_assert_eq!(Ledger::replay(l.opening_balances(), l.log()), l.balances());
            }
        }
    }
}
