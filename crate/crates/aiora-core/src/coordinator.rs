//! Cross-segment coordination: collects the proposals of every loop each
//! round, detects conflicts across nested loops and across continuums
//! competing for shared resources, selects a conflict-free subset, and runs
//! the quality-target negotiation workflow.
//!
//! Deferred proposals are dropped, not queued: a loop whose condition
//! persists will re-propose on the next tick.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ResourceVector;
use crate::ids::{AppId, ContinuumId, ProposalId, SegmentId};
use crate::loops::{Action, ActuationProposal, LoopSet};
use crate::placement::ServiceRequirements;
use crate::twin::TwinSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    SameTarget,
    SharedResourceContention,
    ParentChildOverlap,
    ContradictoryDirection,
}

/// One conflicting unordered pair; `a < b` by proposal id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConflictPair {
    pub a: ProposalId,
    pub b: ProposalId,
    pub kind: ConflictKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub pairs: Vec<ConflictPair>,
}

impl ConflictReport {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn conflicting(&self, a: ProposalId, b: ProposalId) -> Option<ConflictKind> {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        self.pairs
            .iter()
            .find(|p| p.a == lo && p.b == hi)
            .map(|p| p.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deferred {
    pub proposal: ProposalId,
    pub blocked_by: ProposalId,
    pub kind: ConflictKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoordinationDecision {
    pub accepted: Vec<ProposalId>,
    pub deferred: Vec<Deferred>,
    /// Quality negotiations forwarded to providers, from accepted
    /// NegotiateQuality proposals.
    pub negotiations: Vec<(ProposalId, AppId)>,
}

/// Capacity the coordinator may assume when projecting proposals: broker
/// residuals of available segments plus per-continuum quota headroom.
#[derive(Debug, Clone, Default)]
pub struct ResourceOutlook {
    pub residuals: BTreeMap<SegmentId, ResourceVector>,
    pub headroom: BTreeMap<ContinuumId, BTreeMap<SegmentId, ResourceVector>>,
}

/// New demand a proposal would put on segments, charged to a continuum.
fn demand_footprint(
    proposal: &ActuationProposal,
    snapshot: &TwinSnapshot,
) -> Option<(ContinuumId, BTreeMap<SegmentId, ResourceVector>)> {
    let app_entry = |app: &AppId| snapshot.apps.get(app);
    match &proposal.action {
        Action::ScaleUp { amount } => {
            let crate::loops::ManagedEntity::App(app) = &proposal.target else {
                return None;
            };
            let entry = app_entry(app)?;
            let mut per_segment: BTreeMap<SegmentId, ResourceVector> = BTreeMap::new();
            for view in entry.components.values() {
                let extra = view.demand.scaled(*amount as u64);
                for (segment, state) in &view.instances {
                    if state.is_live() {
                        *per_segment
                            .entry(segment.clone())
                            .or_insert(ResourceVector::ZERO) += extra;
                    }
                }
            }
            Some((entry.continuum.clone(), per_segment))
        }
        Action::Migrate { component, to } => {
            let crate::loops::ManagedEntity::App(app) = &proposal.target else {
                return None;
            };
            let entry = app_entry(app)?;
            let view = entry.components.get(component)?;
            let demand = view.demand.scaled(entry.kpis.scale as u64);
            Some((
                entry.continuum.clone(),
                BTreeMap::from([(to.clone(), demand)]),
            ))
        }
        _ => None,
    }
}

/// Whether the outlook can absorb all footprints together: each draw takes
/// quota headroom first, the shortfall comes out of the broker residual.
fn jointly_feasible(
    footprints: &[&(ContinuumId, BTreeMap<SegmentId, ResourceVector>)],
    outlook: &ResourceOutlook,
) -> bool {
    let mut headroom = outlook.headroom.clone();
    let mut residuals = outlook.residuals.clone();
    for (continuum, per_segment) in footprints {
        for (segment, amount) in per_segment {
            let free = headroom
                .entry(continuum.clone())
                .or_default()
                .entry(segment.clone())
                .or_insert(ResourceVector::ZERO);
            let from_quota = amount.component_min(free);
            *free = free.checked_sub(&from_quota).expect("min bounded");
            let shortfall = amount
                .checked_sub(&from_quota)
                .expect("min bounded");
            if shortfall.is_zero() {
                continue;
            }
            let residual = residuals
                .entry(segment.clone())
                .or_insert(ResourceVector::ZERO);
            match residual.checked_sub(&shortfall) {
                Some(rest) => *residual = rest,
                None => return false,
            }
        }
    }
    true
}

/// Pairwise conflict detection over one round's proposals.
///
/// SameTarget: two proposals name the same managed entity.
/// ContradictoryDirection: opposite scale directions on the same entity.
/// ParentChildOverlap: the proposing loops are nested and their configured
/// actuator target sets intersect.
/// SharedResourceContention: each proposal fits on its own but the pair's
/// combined demand does not.
pub fn detect_conflicts(
    proposals: &[ActuationProposal],
    snapshot: &TwinSnapshot,
    loops: &LoopSet,
    outlook: &ResourceOutlook,
) -> ConflictReport {
    let footprints: Vec<Option<(ContinuumId, BTreeMap<SegmentId, ResourceVector>)>> = proposals
        .iter()
        .map(|p| demand_footprint(p, snapshot))
        .collect();
    let alone_ok: Vec<bool> = footprints
        .iter()
        .map(|f| f.as_ref().map_or(true, |f| jointly_feasible(&[f], outlook)))
        .collect();

    let mut pairs = Vec::new();
    for i in 0..proposals.len() {
        for j in (i + 1)..proposals.len() {
            let (p, q) = (&proposals[i], &proposals[j]);
            let (lo, hi) = if p.id < q.id { (p.id, q.id) } else { (q.id, p.id) };
            let mut push = |kind: ConflictKind| {
                pairs.push(ConflictPair { a: lo, b: hi, kind });
            };

            if p.target == q.target {
                push(ConflictKind::SameTarget);
                if let (Some(a), Some(b)) = (p.action.scale_direction(), q.action.scale_direction())
                {
                    if a != b {
                        push(ConflictKind::ContradictoryDirection);
                    }
                }
            }

            let nested = loops.is_ancestor(&p.loop_id, &q.loop_id)
                || loops.is_ancestor(&q.loop_id, &p.loop_id);
            if nested {
                let overlap = loops
                    .get(&p.loop_id)
                    .zip(loops.get(&q.loop_id))
                    .map_or(false, |(a, b)| {
                        !a.spec.targets.is_disjoint(&b.spec.targets)
                    });
                if overlap {
                    push(ConflictKind::ParentChildOverlap);
                }
            }

            if let (Some(fp), Some(fq)) = (&footprints[i], &footprints[j]) {
                if alone_ok[i] && alone_ok[j] && !jointly_feasible(&[fp, fq], outlook) {
                    push(ConflictKind::SharedResourceContention);
                }
            }
        }
    }
    pairs.sort();
    pairs.dedup();
    ConflictReport { pairs }
}

/// Precedence used by `resolve`: priority descending, then parents before
/// children (nesting depth ascending), then loop id, then proposal id.
#[derive(Debug, Clone, Copy, Default)]
pub struct PrecedencePolicy;

impl PrecedencePolicy {
    fn order(
        &self,
        proposals: &[ActuationProposal],
        loops: &LoopSet,
    ) -> Vec<usize> {
        let mut indices: Vec<usize> = (0..proposals.len()).collect();
        indices.sort_by(|&i, &j| {
            let (p, q) = (&proposals[i], &proposals[j]);
            q.priority
                .cmp(&p.priority)
                .then_with(|| {
                    let dp = loops.nesting_depth(&p.loop_id).unwrap_or(1);
                    let dq = loops.nesting_depth(&q.loop_id).unwrap_or(1);
                    dp.cmp(&dq)
                })
                .then_with(|| p.loop_id.cmp(&q.loop_id))
                .then_with(|| p.id.cmp(&q.id))
        });
        indices
    }
}

/// Greedy conflict-free selection in precedence order: a proposal is accepted
/// iff it conflicts with no already-accepted one. Deterministic; whenever at
/// least one proposal exists, the first in precedence order is accepted.
pub fn resolve(
    proposals: &[ActuationProposal],
    report: &ConflictReport,
    precedence: PrecedencePolicy,
    loops: &LoopSet,
) -> CoordinationDecision {
    let mut decision = CoordinationDecision::default();
    for index in precedence.order(proposals, loops) {
        let proposal = &proposals[index];
        let blocking = decision.accepted.iter().find_map(|&accepted| {
            report
                .conflicting(proposal.id, accepted)
                .map(|kind| (accepted, kind))
        });
        match blocking {
            Some((blocked_by, kind)) => decision.deferred.push(Deferred {
                proposal: proposal.id,
                blocked_by,
                kind,
            }),
            None => {
                decision.accepted.push(proposal.id);
                if let Action::NegotiateQuality { app } = &proposal.action {
                    decision.negotiations.push((proposal.id, app.clone()));
                }
            }
        }
    }
    decision
}

/// One relaxation applied to a requirements document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxationOp {
    ScaleMaxLatency { factor: f64 },
    DropCarbonCap,
    SetCarbonCap { g_per_h: f64 },
    DropDataLocality,
    ScaleMinThroughput { factor: f64 },
}

/// A provider-declared ladder of progressively relaxed requirements. Rung
/// `i`'s operations apply on top of rung `i-1`'s result.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxationLadder {
    pub rungs: Vec<Vec<RelaxationOp>>,
}

pub fn apply_relaxations(
    requirements: &ServiceRequirements,
    ops: &[RelaxationOp],
) -> ServiceRequirements {
    let mut relaxed = requirements.clone();
    for op in ops {
        match op {
            RelaxationOp::ScaleMaxLatency { factor } => relaxed.max_latency_ms *= factor,
            RelaxationOp::DropCarbonCap => relaxed.carbon_cap_g_per_h = None,
            RelaxationOp::SetCarbonCap { g_per_h } => relaxed.carbon_cap_g_per_h = Some(*g_per_h),
            RelaxationOp::DropDataLocality => relaxed.data_locality = None,
            RelaxationOp::ScaleMinThroughput { factor } => relaxed.min_throughput_mbps *= factor,
        }
    }
    relaxed
}

/// The requirements in force at each rung of a ladder, cumulatively relaxed.
pub fn ladder_requirements(
    base: &ServiceRequirements,
    ladder: &RelaxationLadder,
) -> Vec<ServiceRequirements> {
    let mut current = base.clone();
    let mut rungs = Vec::with_capacity(ladder.rungs.len());
    for ops in &ladder.rungs {
        current = apply_relaxations(&current, ops);
        rungs.push(current.clone());
    }
    rungs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegotiationOutcome {
    Accepted {
        rung: usize,
        requirements: ServiceRequirements,
    },
    Rejected,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordinationError {
    #[error("no relaxation ladder declared for {0}")]
    NoLadderDeclared(AppId),
}

/// Walks the provider-declared ladder and returns the first rung whose
/// relaxed requirements the probe accepts; `Rejected` when the ladder is
/// exhausted (an empty ladder rejects immediately).
pub fn negotiate_quality_targets(
    app: &AppId,
    base: &ServiceRequirements,
    ladder: Option<&RelaxationLadder>,
    mut probe: impl FnMut(&ServiceRequirements) -> bool,
) -> Result<NegotiationOutcome, CoordinationError> {
    let ladder = ladder.ok_or_else(|| CoordinationError::NoLadderDeclared(app.clone()))?;
    for (rung, requirements) in ladder_requirements(base, ladder).into_iter().enumerate() {
        if probe(&requirements) {
            return Ok(NegotiationOutcome::Accepted { rung, requirements });
        }
    }
    Ok(NegotiationOutcome::Rejected)
}
