//! Virtual resource broker: the federated inventory ledger.
//!
//! The broker tracks registered segments, their residual capacity, and every
//! reservation backing a continuum quota. All mutations go through one logical
//! state machine (`&mut self`), so conservation is enforced at the ledger:
//! for every segment, held + residual = capacity, exactly, at every instant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ResourceVector, SegmentDescriptor, SegmentKind, Topology};
use crate::ids::{ContinuumId, ReservationId, SegmentId, StakeholderId, ZoneId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservationState {
    Held,
    Released,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservation {
    pub id: ReservationId,
    pub continuum: ContinuumId,
    pub segment: SegmentId,
    pub amount: ResourceVector,
    pub state: ReservationState,
}

/// Predicate over segments used by feasibility queries. Every present field
/// must match; an empty filter matches anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<SegmentId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kinds: Option<Vec<SegmentKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zones: Option<Vec<ZoneId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owners: Option<Vec<StakeholderId>>,
}

impl SegmentFilter {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn matches(&self, seg: &SegmentDescriptor) -> bool {
        self.ids.as_ref().map_or(true, |ids| ids.contains(&seg.id))
            && self.kinds.as_ref().map_or(true, |ks| ks.contains(&seg.kind))
            && self.zones.as_ref().map_or(true, |zs| zs.contains(&seg.zone))
            && self
                .owners
                .as_ref()
                .map_or(true, |os| os.contains(&seg.owner))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityDemand {
    #[serde(default)]
    pub filter: SegmentFilter,
    pub amount: ResourceVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockingKind {
    Capacity,
    Filter,
    Contention,
    Agreement,
    Carbon,
    Latency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockingConstraint {
    pub kind: BlockingKind,
    pub detail: String,
}

/// Result of a feasibility query. `feasible` iff `blocking` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub residuals: BTreeMap<SegmentId, ResourceVector>,
    pub blocking: Vec<BlockingConstraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationEntry {
    pub capacity: ResourceVector,
    pub held: ResourceVector,
    pub residual: ResourceVector,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BrokerError {
    #[error("segment {0} already registered")]
    DuplicateSegment(SegmentId),
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
    #[error("segment {0} is busy: {1}")]
    SegmentBusy(SegmentId, String),
    #[error("insufficient capacity on {segment}: requested {requested}, residual {residual}")]
    InsufficientCapacity {
        segment: SegmentId,
        requested: ResourceVector,
        residual: ResourceVector,
    },
    #[error("agreement between {owner} and {consumer} exceeded on {segment}")]
    AgreementExceeded {
        owner: StakeholderId,
        consumer: StakeholderId,
        segment: SegmentId,
    },
    #[error("unknown continuum {0}")]
    UnknownContinuum(ContinuumId),
    #[error("unknown reservation {0}")]
    UnknownReservation(ReservationId),
    #[error("reservation {0} already released")]
    AlreadyReleased(ReservationId),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub descriptor: SegmentDescriptor,
    pub residual: ResourceVector,
}

/// The broker state machine. Cheap to snapshot (all value types) and
/// serializable to JSON for checkpointing.
#[derive(Debug, Clone, Default)]
pub struct Broker {
    segments: BTreeMap<SegmentId, SegmentEntry>,
    reservations: BTreeMap<ReservationId, Reservation>,
    agreements: BTreeMap<StakeholderId, BTreeMap<StakeholderId, f64>>,
    continuum_providers: BTreeMap<ContinuumId, StakeholderId>,
    next_reservation: u64,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a broker holding every segment and agreement of a topology.
    pub fn from_topology(topology: &Topology) -> Result<Self, BrokerError> {
        let mut broker = Self::new();
        for s in &topology.stakeholders {
            for a in &s.agreements {
                broker.declare_agreement(s.id.clone(), a.peer.clone(), a.fraction);
            }
        }
        for seg in &topology.segments {
            broker.register_segment(seg.clone())?;
        }
        Ok(broker)
    }

    pub fn declare_agreement(&mut self, owner: StakeholderId, consumer: StakeholderId, fraction: f64) {
        self.agreements.entry(owner).or_default().insert(consumer, fraction);
    }

    /// Binds a continuum to the business provider that consumes on its behalf;
    /// agreement checks for its reservations are made against this identity.
    pub fn register_continuum(&mut self, continuum: ContinuumId, provider: StakeholderId) {
        self.continuum_providers.insert(continuum, provider);
    }

    pub fn forget_continuum(&mut self, continuum: &ContinuumId) {
        self.continuum_providers.remove(continuum);
    }

    pub fn register_segment(&mut self, descriptor: SegmentDescriptor) -> Result<(), BrokerError> {
        if self.segments.contains_key(&descriptor.id) {
            return Err(BrokerError::DuplicateSegment(descriptor.id));
        }
        let residual = descriptor.capacity;
        self.segments
            .insert(descriptor.id.clone(), SegmentEntry { descriptor, residual });
        Ok(())
    }

    /// Removes a segment from the inventory. Refused while any reservation is
    /// held on it, or while the owner's remaining fleet would no longer cover
    /// the amounts consumers already hold under their agreements.
    pub fn deregister_segment(&mut self, id: &SegmentId) -> Result<(), BrokerError> {
        let entry = self
            .segments
            .get(id)
            .ok_or_else(|| BrokerError::UnknownSegment(id.clone()))?;
        let held_here = self
            .reservations
            .values()
            .any(|r| r.state == ReservationState::Held && &r.segment == id);
        if held_here {
            return Err(BrokerError::SegmentBusy(id.clone(), "held reservations".into()));
        }
        let owner = entry.descriptor.owner.clone();
        // Project the fleet without this segment and re-check agreement bounds.
        let fleet_after = self.fleet_capacity_excluding(&owner, Some(id));
        for (consumer, held) in self.held_by_consumer_of_owner(&owner) {
            let fraction = self.agreement_fraction(&owner, &consumer);
            if !within_fraction(&held, fraction, &fleet_after) {
                return Err(BrokerError::SegmentBusy(
                    id.clone(),
                    format!("agreement with {consumer} would be exceeded"),
                ));
            }
        }
        self.segments.remove(id);
        Ok(())
    }

    pub fn segment_descriptor(&self, id: &SegmentId) -> Option<&SegmentDescriptor> {
        self.segments.get(id).map(|e| &e.descriptor)
    }

    pub fn residual(&self, id: &SegmentId) -> Option<ResourceVector> {
        self.segments.get(id).map(|e| e.residual)
    }

    pub fn residuals(&self) -> BTreeMap<SegmentId, ResourceVector> {
        self.segments
            .iter()
            .map(|(id, e)| (id.clone(), e.residual))
            .collect()
    }

    pub fn reservation(&self, id: ReservationId) -> Option<&Reservation> {
        self.reservations.get(&id)
    }

    fn agreement_fraction(&self, owner: &StakeholderId, consumer: &StakeholderId) -> f64 {
        if owner == consumer {
            return 1.0;
        }
        self.agreements
            .get(owner)
            .and_then(|m| m.get(consumer))
            .copied()
            .unwrap_or(0.0)
    }

    fn fleet_capacity_excluding(
        &self,
        owner: &StakeholderId,
        exclude: Option<&SegmentId>,
    ) -> ResourceVector {
        self.segments
            .values()
            .filter(|e| &e.descriptor.owner == owner && exclude != Some(&e.descriptor.id))
            .fold(ResourceVector::ZERO, |acc, e| acc + e.descriptor.capacity)
    }

    fn held_by_consumer_of_owner(
        &self,
        owner: &StakeholderId,
    ) -> BTreeMap<StakeholderId, ResourceVector> {
        let mut held: BTreeMap<StakeholderId, ResourceVector> = BTreeMap::new();
        for r in self.reservations.values() {
            if r.state != ReservationState::Held {
                continue;
            }
            let Some(entry) = self.segments.get(&r.segment) else { continue };
            if &entry.descriptor.owner != owner {
                continue;
            }
            let Some(consumer) = self.continuum_providers.get(&r.continuum) else { continue };
            if consumer == owner {
                continue;
            }
            *held.entry(consumer.clone()).or_insert(ResourceVector::ZERO) += r.amount;
        }
        held
    }

    /// Reserves `amount` on a segment for a continuum's quota.
    ///
    /// Admission requires residual capacity and, for cross-stakeholder
    /// reservations, that the consumer's total held amount across the owner's
    /// whole fleet stays within the agreed fraction of that fleet's capacity.
    pub fn reserve(
        &mut self,
        continuum: &ContinuumId,
        segment: &SegmentId,
        amount: ResourceVector,
    ) -> Result<Reservation, BrokerError> {
        let entry = self
            .segments
            .get(segment)
            .ok_or_else(|| BrokerError::UnknownSegment(segment.clone()))?;
        let consumer = self
            .continuum_providers
            .get(continuum)
            .ok_or_else(|| BrokerError::UnknownContinuum(continuum.clone()))?
            .clone();
        let residual = entry.residual;
        if !amount.fits_within(&residual) {
            return Err(BrokerError::InsufficientCapacity {
                segment: segment.clone(),
                requested: amount,
                residual,
            });
        }
        let owner = entry.descriptor.owner.clone();
        if owner != consumer {
            let fraction = self.agreement_fraction(&owner, &consumer);
            let fleet = self.fleet_capacity_excluding(&owner, None);
            let held = self
                .held_by_consumer_of_owner(&owner)
                .remove(&consumer)
                .unwrap_or(ResourceVector::ZERO);
            if !within_fraction(&(held + amount), fraction, &fleet) {
                return Err(BrokerError::AgreementExceeded {
                    owner,
                    consumer,
                    segment: segment.clone(),
                });
            }
        }

        let id = ReservationId(self.next_reservation);
        self.next_reservation += 1;
        let reservation = Reservation {
            id,
            continuum: continuum.clone(),
            segment: segment.clone(),
            amount,
            state: ReservationState::Held,
        };
        let entry = self.segments.get_mut(segment).expect("checked above");
        entry.residual = entry
            .residual
            .checked_sub(&amount)
            .expect("residual covered by admission check");
        self.reservations.insert(id, reservation.clone());
        Ok(reservation)
    }

    pub fn release(&mut self, id: ReservationId) -> Result<(), BrokerError> {
        let reservation = self
            .reservations
            .get_mut(&id)
            .ok_or(BrokerError::UnknownReservation(id))?;
        if reservation.state == ReservationState::Released {
            return Err(BrokerError::AlreadyReleased(id));
        }
        reservation.state = ReservationState::Released;
        let segment = reservation.segment.clone();
        let amount = reservation.amount;
        if let Some(entry) = self.segments.get_mut(&segment) {
            entry.residual += amount;
        }
        Ok(())
    }

    /// Read-only feasibility check: is there a disjoint assignment of every
    /// demand line to a distinct filter-matching segment with enough residual?
    pub fn query_feasibility(&self, demands: &[FeasibilityDemand]) -> FeasibilityReport {
        let residuals = self.residuals();
        let mut blocking = Vec::new();

        // Per-demand candidate sets, with the reason a demand has none.
        let mut candidates: Vec<Vec<&SegmentId>> = Vec::with_capacity(demands.len());
        for (i, demand) in demands.iter().enumerate() {
            let matching: Vec<&SegmentEntry> = self
                .segments
                .values()
                .filter(|e| demand.filter.matches(&e.descriptor))
                .collect();
            if matching.is_empty() {
                blocking.push(BlockingConstraint {
                    kind: BlockingKind::Filter,
                    detail: format!("demand #{i} matches no registered segment"),
                });
                candidates.push(Vec::new());
                continue;
            }
            let fitting: Vec<&SegmentId> = matching
                .iter()
                .filter(|e| demand.amount.fits_within(&e.residual))
                .map(|e| &e.descriptor.id)
                .collect();
            if fitting.is_empty() {
                blocking.push(BlockingConstraint {
                    kind: BlockingKind::Capacity,
                    detail: format!("demand #{i} ({}) fits no matching segment", demand.amount),
                });
            }
            candidates.push(fitting);
        }

        let feasible = blocking.is_empty() && assign_disjoint(&candidates, 0, &mut Vec::new());
        if blocking.is_empty() && !feasible {
            blocking.push(BlockingConstraint {
                kind: BlockingKind::Contention,
                detail: "every demand fits somewhere but no disjoint assignment exists".into(),
            });
        }

        FeasibilityReport {
            feasible: blocking.is_empty(),
            residuals,
            blocking,
        }
    }

    /// Per-segment capacity accounting: held + residual = capacity.
    pub fn utilization_report(&self) -> BTreeMap<SegmentId, UtilizationEntry> {
        self.segments
            .iter()
            .map(|(id, e)| {
                let held = e
                    .descriptor
                    .capacity
                    .checked_sub(&e.residual)
                    .expect("residual never exceeds capacity");
                (
                    id.clone(),
                    UtilizationEntry {
                        capacity: e.descriptor.capacity,
                        held,
                        residual: e.residual,
                    },
                )
            })
            .collect()
    }

    /// Held reservations for one continuum, summed per segment.
    pub fn held_by_continuum(&self, continuum: &ContinuumId) -> BTreeMap<SegmentId, ResourceVector> {
        let mut held: BTreeMap<SegmentId, ResourceVector> = BTreeMap::new();
        for r in self.reservations.values() {
            if r.state == ReservationState::Held && &r.continuum == continuum {
                *held.entry(r.segment.clone()).or_insert(ResourceVector::ZERO) += r.amount;
            }
        }
        held
    }

    pub fn reservations_of(&self, continuum: &ContinuumId) -> Vec<&Reservation> {
        self.reservations
            .values()
            .filter(|r| &r.continuum == continuum)
            .collect()
    }

    pub fn to_checkpoint(&self) -> BrokerCheckpoint {
        BrokerCheckpoint {
            segments: self.segments.values().cloned().collect(),
            reservations: self.reservations.values().cloned().collect(),
            agreements: self
                .agreements
                .iter()
                .flat_map(|(owner, peers)| {
                    peers.iter().map(move |(consumer, fraction)| AgreementEntry {
                        owner: owner.clone(),
                        consumer: consumer.clone(),
                        fraction: *fraction,
                    })
                })
                .collect(),
            continuums: self
                .continuum_providers
                .iter()
                .map(|(c, p)| (c.clone(), p.clone()))
                .collect(),
            next_reservation: self.next_reservation,
        }
    }

    pub fn from_checkpoint(checkpoint: BrokerCheckpoint) -> Self {
        let mut broker = Broker::new();
        for entry in checkpoint.segments {
            broker.segments.insert(entry.descriptor.id.clone(), entry);
        }
        for r in checkpoint.reservations {
            broker.reservations.insert(r.id, r);
        }
        for a in checkpoint.agreements {
            broker.declare_agreement(a.owner, a.consumer, a.fraction);
        }
        for (c, p) in checkpoint.continuums {
            broker.continuum_providers.insert(c, p);
        }
        broker.next_reservation = checkpoint.next_reservation;
        broker
    }
}

fn within_fraction(held: &ResourceVector, fraction: f64, fleet: &ResourceVector) -> bool {
    held.cpu as f64 <= fraction * fleet.cpu as f64
        && held.memory as f64 <= fraction * fleet.memory as f64
        && held.storage as f64 <= fraction * fleet.storage as f64
        && held.bandwidth as f64 <= fraction * fleet.bandwidth as f64
}

fn assign_disjoint<'a>(
    candidates: &[Vec<&'a SegmentId>],
    demand: usize,
    used: &mut Vec<&'a SegmentId>,
) -> bool {
    if demand == candidates.len() {
        return true;
    }
    for seg in &candidates[demand] {
        if !used.contains(seg) {
            used.push(seg);
            if assign_disjoint(candidates, demand + 1, used) {
                return true;
            }
            used.pop();
        }
    }
    false
}

/// Flat, JSON-friendly snapshot of the broker state (`broker-state.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BrokerCheckpoint {
    pub segments: Vec<SegmentEntryCheckpoint>,
    pub reservations: Vec<Reservation>,
    pub agreements: Vec<AgreementEntry>,
    pub continuums: Vec<(ContinuumId, StakeholderId)>,
    pub next_reservation: u64,
}

pub type SegmentEntryCheckpoint = SegmentEntry;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementEntry {
    pub owner: StakeholderId,
    pub consumer: StakeholderId,
    pub fraction: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SegmentKind;

    fn descriptor(id: &str, owner: &str, capacity: ResourceVector) -> SegmentDescriptor {
        SegmentDescriptor {
            id: id.into(),
            owner: owner.into(),
            kind: SegmentKind::Edge,
            capacity,
            power_idle_w: 100.0,
            power_max_w: 300.0,
            carbon_g_per_kwh: 400.0,
            zone: "z1".into(),
            unit_cost_per_h: 1.0,
        }
    }

    fn cap() -> ResourceVector {
        ResourceVector::new(4000, 8192, 100, 1000)
    }

    fn broker_with(segments: &[(&str, &str)]) -> Broker {
        let mut b = Broker::new();
        for (id, owner) in segments {
            b.register_segment(descriptor(id, owner, cap())).unwrap();
        }
        b
    }

    #[test]
    fn fresh_segment_has_full_residual() {
        let b = broker_with(&[("s1", "own")]);
        assert_eq!(b.residual(&"s1".into()), Some(cap()));
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut b = broker_with(&[("s1", "own")]);
        assert!(matches!(
            b.register_segment(descriptor("s1", "own", cap())),
            Err(BrokerError::DuplicateSegment(_))
        ));
    }

    #[test]
    fn reserve_subtracts_from_residual() {
        let mut b = broker_with(&[("s1", "own")]);
        b.register_continuum("c1".into(), "own".into());
        let amount = ResourceVector::new(1000, 2048, 10, 100);
        b.reserve(&"c1".into(), &"s1".into(), amount).unwrap();
        assert_eq!(
            b.residual(&"s1".into()),
            Some(cap().checked_sub(&amount).unwrap())
        );
    }

    #[test]
    fn zero_reservation_is_held_without_effect() {
        let mut b = broker_with(&[("s1", "own")]);
        b.register_continuum("c1".into(), "own".into());
        let r = b
            .reserve(&"c1".into(), &"s1".into(), ResourceVector::ZERO)
            .unwrap();
        assert_eq!(r.state, ReservationState::Held);
        assert_eq!(b.residual(&"s1".into()), Some(cap()));
    }

    #[test]
    fn reserve_to_exact_residual_then_epsilon_fails() {
        let mut b = broker_with(&[("s1", "own")]);
        b.register_continuum("c1".into(), "own".into());
        b.reserve(&"c1".into(), &"s1".into(), cap()).unwrap();
        assert_eq!(b.residual(&"s1".into()), Some(ResourceVector::ZERO));
        assert!(matches!(
            b.reserve(&"c1".into(), &"s1".into(), ResourceVector::new(1, 0, 0, 0)),
            Err(BrokerError::InsufficientCapacity { .. })
        ));
    }

    #[test]
    fn agreement_fraction_is_enforced() {
        let mut b = broker_with(&[("s1", "own")]);
        b.declare_agreement("own".into(), "biz".into(), 0.5);
        b.register_continuum("c1".into(), "biz".into());
        // 0.5 of cpu 4000 = 2000
        b.reserve(
            &"c1".into(),
            &"s1".into(),
            ResourceVector::new(2000, 0, 0, 0),
        )
        .unwrap();
        assert!(matches!(
            b.reserve(&"c1".into(), &"s1".into(), ResourceVector::new(1, 0, 0, 0)),
            Err(BrokerError::AgreementExceeded { .. })
        ));
    }

    #[test]
    fn missing_agreement_denies_cross_stakeholder_reserve() {
        let mut b = broker_with(&[("s1", "own")]);
        b.register_continuum("c1".into(), "stranger".into());
        assert!(matches!(
            b.reserve(&"c1".into(), &"s1".into(), ResourceVector::new(1, 0, 0, 0)),
            Err(BrokerError::AgreementExceeded { .. })
        ));
    }

    #[test]
    fn release_restores_residual_exactly() {
        let mut b = broker_with(&[("s1", "own")]);
        b.register_continuum("c1".into(), "own".into());
        let amount = ResourceVector::new(123, 456, 7, 89);
        let r = b.reserve(&"c1".into(), &"s1".into(), amount).unwrap();
        b.release(r.id).unwrap();
        assert_eq!(b.residual(&"s1".into()), Some(cap()));
        assert!(matches!(b.release(r.id), Err(BrokerError::AlreadyReleased(_))));
    }

    #[test]
    fn deregister_lifecycle() {
        let mut b = broker_with(&[("s1", "own")]);
        b.register_continuum("c1".into(), "own".into());
        let r = b
            .reserve(&"c1".into(), &"s1".into(), ResourceVector::new(1, 1, 1, 1))
            .unwrap();
        assert!(matches!(
            b.deregister_segment(&"s1".into()),
            Err(BrokerError::SegmentBusy(..))
        ));
        b.release(r.id).unwrap();
        b.deregister_segment(&"s1".into()).unwrap();
        assert!(b.residual(&"s1".into()).is_none());
        assert!(matches!(
            b.deregister_segment(&"s1".into()),
            Err(BrokerError::UnknownSegment(_))
        ));
    }

    #[test]
    fn empty_feasibility_request_is_feasible() {
        let b = broker_with(&[("s1", "own")]);
        let report = b.query_feasibility(&[]);
        assert!(report.feasible);
        assert!(report.blocking.is_empty());
    }

    #[test]
    fn oversized_demand_reports_capacity_blocking() {
        let b = broker_with(&[("s1", "own")]);
        let report = b.query_feasibility(&[FeasibilityDemand {
            filter: SegmentFilter::any(),
            amount: ResourceVector::new(u64::MAX / 2, 0, 0, 0),
        }]);
        assert!(!report.feasible);
        assert_eq!(report.blocking[0].kind, BlockingKind::Capacity);
    }

    #[test]
    fn disjoint_assignment_is_found_when_only_one_ordering_works() {
        // d0 fits only on s1; d1 fits on both. The solver must route d1 to s2.
        let mut b = Broker::new();
        b.register_segment(descriptor("s1", "own", ResourceVector::new(4000, 8192, 100, 1000)))
            .unwrap();
        b.register_segment(descriptor("s2", "own", ResourceVector::new(1000, 8192, 100, 1000)))
            .unwrap();
        let report = b.query_feasibility(&[
            FeasibilityDemand {
                filter: SegmentFilter::any(),
                amount: ResourceVector::new(3000, 0, 0, 0),
            },
            FeasibilityDemand {
                filter: SegmentFilter::any(),
                amount: ResourceVector::new(900, 0, 0, 0),
            },
        ]);
        assert!(report.feasible, "{:?}", report.blocking);
    }

    #[test]
    fn feasibility_is_read_only() {
        let b = broker_with(&[("s1", "own")]);
        let before = b.residuals();
        let _ = b.query_feasibility(&[FeasibilityDemand {
            filter: SegmentFilter::any(),
            amount: ResourceVector::new(10, 10, 10, 10),
        }]);
        assert_eq!(b.residuals(), before);
    }

    /// Brute-force oracle: try every injective demand -> segment mapping.
    fn feasible_by_enumeration(
        residuals: &[(String, ResourceVector)],
        demands: &[ResourceVector],
    ) -> bool {
        fn go(
            residuals: &[(String, ResourceVector)],
            demands: &[ResourceVector],
            i: usize,
            used: &mut Vec<usize>,
        ) -> bool {
            if i == demands.len() {
                return true;
            }
            for (j, (_, residual)) in residuals.iter().enumerate() {
                if !used.contains(&j) && demands[i].fits_within(residual) {
                    used.push(j);
                    if go(residuals, demands, i + 1, used) {
                        return true;
                    }
                    used.pop();
                }
            }
            false
        }
        go(residuals, demands, 0, &mut Vec::new())
    }

    #[test]
    fn feasibility_matches_brute_force_on_random_inventories() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(31);
        for _ in 0..300 {
            let n_segments = rng.gen_range(1..=6);
            let n_demands = rng.gen_range(0..=5);
            let mut b = Broker::new();
            let mut residuals = Vec::new();
            for i in 0..n_segments {
                let c = ResourceVector::new(
                    rng.gen_range(0..=50),
                    rng.gen_range(0..=50),
                    rng.gen_range(0..=20),
                    rng.gen_range(0..=20),
                );
                b.register_segment(descriptor(&format!("s{i}"), "own", c)).unwrap();
                residuals.push((format!("s{i}"), c));
            }
            let demands: Vec<ResourceVector> = (0..n_demands)
                .map(|_| {
                    ResourceVector::new(
                        rng.gen_range(0..=50),
                        rng.gen_range(0..=50),
                        rng.gen_range(0..=20),
                        rng.gen_range(0..=20),
                    )
                })
                .collect();
            let report = b.query_feasibility(
                &demands
                    .iter()
                    .map(|d| FeasibilityDemand {
                        filter: SegmentFilter::any(),
                        amount: *d,
                    })
                    .collect::<Vec<_>>(),
            );
            assert_eq!(
                report.feasible,
                feasible_by_enumeration(&residuals, &demands),
                "segments={residuals:?} demands={demands:?}"
            );
        }
    }

    #[test]
    fn utilization_report_balances() {
        let mut b = broker_with(&[("s1", "own"), ("s2", "own")]);
        b.register_continuum("c1".into(), "own".into());
        let amount = ResourceVector::new(10, 20, 3, 4);
        b.reserve(&"c1".into(), &"s1".into(), amount).unwrap();
        let report = b.utilization_report();
        assert_eq!(report[&SegmentId::new("s1")].held, amount);
        assert_eq!(report[&SegmentId::new("s2")].held, ResourceVector::ZERO);
        for entry in report.values() {
            assert_eq!(entry.held + entry.residual, entry.capacity);
        }
    }

    #[test]
    fn random_workload_matches_ledger_replay() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(97);
        let mut b = broker_with(&[("s1", "own"), ("s2", "own"), ("s3", "own")]);
        b.register_continuum("c1".into(), "own".into());
        let segments = ["s1", "s2", "s3"];
        // Independent ledger: (segment, amount) per held reservation.
        let mut ledger: Vec<(ReservationId, SegmentId, ResourceVector)> = Vec::new();
        for _ in 0..1000 {
            if ledger.is_empty() || rng.gen_bool(0.6) {
                let seg: SegmentId = segments[rng.gen_range(0..3)].into();
                let amount = ResourceVector::new(
                    rng.gen_range(0..=500),
                    rng.gen_range(0..=800),
                    rng.gen_range(0..=10),
                    rng.gen_range(0..=100),
                );
                if let Ok(r) = b.reserve(&"c1".into(), &seg, amount) {
                    ledger.push((r.id, seg, amount));
                }
            } else {
                let i = rng.gen_range(0..ledger.len());
                let (id, _, _) = ledger.remove(i);
                b.release(id).unwrap();
            }
            // residual = capacity - sum(held) per segment, exactly
            for seg in segments {
                let held: ResourceVector = ledger
                    .iter()
                    .filter(|(_, s, _)| s.as_str() == seg)
                    .fold(ResourceVector::ZERO, |acc, (_, _, a)| acc + *a);
                assert_eq!(
                    b.residual(&seg.into()).unwrap(),
                    cap().checked_sub(&held).unwrap()
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_state() {
        let mut b = broker_with(&[("s1", "own")]);
        b.declare_agreement("own".into(), "biz".into(), 0.5);
        b.register_continuum("c1".into(), "biz".into());
        let r = b
            .reserve(&"c1".into(), &"s1".into(), ResourceVector::new(100, 0, 0, 0))
            .unwrap();
        let json = serde_json::to_string(&b.to_checkpoint()).unwrap();
        let restored = Broker::from_checkpoint(serde_json::from_str(&json).unwrap());
        assert_eq!(restored.residual(&"s1".into()), b.residual(&"s1".into()));
        assert_eq!(restored.reservation(r.id), b.reservation(r.id));
    }
}
