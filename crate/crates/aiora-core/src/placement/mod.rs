//! Multi-objective service placement: application descriptors, the weighted
//! cost model, and the assignment search with an exhaustively verifiable core.

mod search;

pub use search::{place, place_sequential, replan_migration, replan_migration_sequential};

#[cfg(feature = "parallel")]
pub use search::{place_parallel, replan_migration_parallel};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ResourceVector, Topology};
use crate::ids::{AppId, ComponentId, SegmentId, StakeholderId, ZoneId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRole {
    Eas,
    Ees,
    Ecs,
    Generic,
}

/// One deployable unit of an application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub id: ComponentId,
    pub demand: ResourceVector,
    pub role: ComponentRole,
    /// Components that must share this component's segment.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub colocation: BTreeSet<ComponentId>,
    /// Components that must not share this component's segment.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub anti_affinity: BTreeSet<ComponentId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvailabilityClass {
    BestEffort,
    High,
}

/// End-to-end service constraints carried by an application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceRequirements {
    pub user_zone: ZoneId,
    /// Bound on user-to-EAS latency (zone access + path).
    pub max_latency_ms: f64,
    #[serde(default)]
    pub min_throughput_mbps: f64,
    /// Zones allowed to host storage-bearing components.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_locality: Option<BTreeSet<ZoneId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carbon_cap_g_per_h: Option<f64>,
    #[serde(default = "default_availability")]
    pub availability_class: AvailabilityClass,
}

fn default_availability() -> AvailabilityClass {
    AvailabilityClass::BestEffort
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationDescriptor {
    pub id: AppId,
    pub provider: StakeholderId,
    pub components: Vec<ComponentSpec>,
    pub requirements: ServiceRequirements,
}

impl ApplicationDescriptor {
    pub fn component(&self, id: &ComponentId) -> Option<&ComponentSpec> {
        self.components.iter().find(|c| &c.id == id)
    }

    pub fn total_demand(&self) -> ResourceVector {
        self.components
            .iter()
            .fold(ResourceVector::ZERO, |acc, c| acc + c.demand)
    }

    /// Shape validation; returns every problem found.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.components.is_empty() {
            problems.push(format!("application {} has no components", self.id));
        }
        let mut seen = BTreeSet::new();
        for c in &self.components {
            if !seen.insert(&c.id) {
                problems.push(format!("duplicate component id {} in {}", c.id, self.id));
            }
        }
        for c in &self.components {
            if !c.colocation.is_disjoint(&c.anti_affinity) {
                problems.push(format!(
                    "component {} lists overlapping colocation and anti-affinity sets",
                    c.id
                ));
            }
            for peer in c.colocation.iter().chain(c.anti_affinity.iter()) {
                if self.component(peer).is_none() {
                    problems.push(format!(
                        "component {} references unknown peer {}",
                        c.id, peer
                    ));
                }
            }
        }
        if !(self.requirements.max_latency_ms > 0.0) {
            problems.push(format!(
                "application {} max_latency_ms must be positive",
                self.id
            ));
        }
        if let Some(cap) = self.requirements.carbon_cap_g_per_h {
            if !(cap >= 0.0) {
                problems.push(format!("application {} carbon cap must be >= 0", self.id));
            }
        }
        problems
    }
}

/// Scalarization weights; at least one must be positive. Normalization
/// denominators may be pinned explicitly, otherwise they are derived from the
/// instance (max latency, fleet power, carbon cap or fleet max rate, max unit
/// cost).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    #[serde(default)]
    pub w_latency: f64,
    #[serde(default)]
    pub w_energy: f64,
    #[serde(default)]
    pub w_carbon: f64,
    #[serde(default)]
    pub w_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_energy_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_carbon_g_per_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_cost_per_h: Option<f64>,
}

impl ObjectiveWeights {
    pub fn latency_only() -> Self {
        Self {
            w_latency: 1.0,
            ..Self::zero()
        }
    }

    pub fn carbon_only() -> Self {
        Self {
            w_carbon: 1.0,
            ..Self::zero()
        }
    }

    pub fn energy_only() -> Self {
        Self {
            w_energy: 1.0,
            ..Self::zero()
        }
    }

    pub fn zero() -> Self {
        Self {
            w_latency: 0.0,
            w_energy: 0.0,
            w_carbon: 0.0,
            w_cost: 0.0,
            norm_latency_ms: None,
            norm_energy_w: None,
            norm_carbon_g_per_h: None,
            norm_cost_per_h: None,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, w) in [
            ("w_latency", self.w_latency),
            ("w_energy", self.w_energy),
            ("w_carbon", self.w_carbon),
            ("w_cost", self.w_cost),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                problems.push(format!("{name} must be a finite non-negative number"));
            }
        }
        if self.w_latency <= 0.0 && self.w_energy <= 0.0 && self.w_carbon <= 0.0 && self.w_cost <= 0.0
        {
            problems.push("at least one objective weight must be positive".into());
        }
        problems
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub latency_ms: f64,
    pub energy_watts: f64,
    pub carbon_g_per_h: f64,
    pub money_per_h: f64,
    pub scalar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub assignment: BTreeMap<ComponentId, SegmentId>,
    pub cost: CostBreakdown,
}

/// Available capacity per segment the search may consume. Segments absent
/// from the view are not offered to the application at all.
pub type CapacityView = BTreeMap<SegmentId, ResourceVector>;

/// Capacity view exposing every segment's full raw capacity.
pub fn full_capacity_view(topology: &Topology) -> CapacityView {
    topology
        .segments
        .iter()
        .map(|s| (s.id.clone(), s.capacity))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Capacity,
    Latency,
    Throughput,
    Locality,
    Colocation,
    AntiAffinity,
    Carbon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintViolation {
    pub kind: ConstraintKind,
    pub detail: String,
}

impl ConstraintViolation {
    pub(crate) fn new(kind: ConstraintKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

/// Outcome of scoring a fully specified assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScoreOutcome {
    Feasible(CostBreakdown),
    Violated(ConstraintViolation),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
    #[error("unknown component {0}")]
    UnknownComponent(ComponentId),
    #[error("assignment is missing component {0}")]
    IncompleteAssignment(ComponentId),
    #[error("unknown zone {0}")]
    UnknownZone(ZoneId),
    #[error("invalid objective weights: {0}")]
    InvalidWeights(String),
    #[error("invalid application: {0}")]
    InvalidApplication(String),
    #[error("no feasible placement")]
    Infeasible { blocking: Vec<ConstraintViolation> },
}

/// Scores an assignment against raw segment capacities.
pub fn score_placement(
    topology: &Topology,
    app: &ApplicationDescriptor,
    assignment: &BTreeMap<ComponentId, SegmentId>,
    weights: &ObjectiveWeights,
) -> Result<ScoreOutcome, PlacementError> {
    let view = full_capacity_view(topology);
    score_placement_in_view(topology, &view, app, assignment, weights)
}

/// Scores an assignment against an explicit capacity view (broker residuals,
/// continuum quota headroom, or raw capacity).
pub fn score_placement_in_view(
    topology: &Topology,
    view: &CapacityView,
    app: &ApplicationDescriptor,
    assignment: &BTreeMap<ComponentId, SegmentId>,
    weights: &ObjectiveWeights,
) -> Result<ScoreOutcome, PlacementError> {
    let ctx = EvalContext::new(topology, view, app, weights)?;
    let mut segs: Vec<&SegmentId> = Vec::with_capacity(ctx.components.len());
    for component in &ctx.components {
        let segment = assignment
            .get(&component.id)
            .ok_or_else(|| PlacementError::IncompleteAssignment(component.id.clone()))?;
        if topology.segment(segment).is_none() {
            return Err(PlacementError::UnknownSegment(segment.clone()));
        }
        segs.push(segment);
    }
    for component in assignment.keys() {
        if app.component(component).is_none() {
            return Err(PlacementError::UnknownComponent(component.clone()));
        }
    }
    Ok(ctx.evaluate_slice(&segs))
}

/// Reusable scorer for evaluating many assignments of one application
/// against one capacity view: the zone latency map and normalization
/// denominators are computed once. Scores are bit-identical to
/// `score_placement_in_view`.
pub struct Scorer<'a> {
    ctx: EvalContext<'a>,
}

impl<'a> Scorer<'a> {
    pub fn new(
        topology: &'a Topology,
        view: &'a CapacityView,
        app: &'a ApplicationDescriptor,
        weights: &'a ObjectiveWeights,
    ) -> Result<Self, PlacementError> {
        Ok(Self {
            ctx: EvalContext::new(topology, view, app, weights)?,
        })
    }

    /// Component ids in the canonical order `score_slice` expects.
    pub fn component_order(&self) -> Vec<ComponentId> {
        self.ctx.components.iter().map(|c| c.id.clone()).collect()
    }

    /// Scores `segments[i]` as the segment of `component_order()[i]`.
    pub fn score_slice(&self, segments: &[&SegmentId]) -> ScoreOutcome {
        self.ctx.evaluate_slice(segments)
    }
}

/// Shared evaluation state: the components in canonical (id) order, the
/// zone latency map, and the normalization denominators. Both the public
/// scorer and the search evaluate through this one path, so any two routes to
/// the same assignment produce bit-identical scalars.
pub(crate) struct EvalContext<'a> {
    pub topology: &'a Topology,
    pub view: &'a CapacityView,
    pub app: &'a ApplicationDescriptor,
    pub weights: &'a ObjectiveWeights,
    pub components: Vec<&'a ComponentSpec>,
    pub component_index: BTreeMap<&'a ComponentId, usize>,
    pub zone_latency: BTreeMap<SegmentId, f64>,
    norms: Normalizers,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        topology: &'a Topology,
        view: &'a CapacityView,
        app: &'a ApplicationDescriptor,
        weights: &'a ObjectiveWeights,
    ) -> Result<Self, PlacementError> {
        if let Some(problem) = weights.validate().into_iter().next() {
            return Err(PlacementError::InvalidWeights(problem));
        }
        if let Some(problem) = app.validate().into_iter().next() {
            return Err(PlacementError::InvalidApplication(problem));
        }
        let mut components: Vec<&ComponentSpec> = app.components.iter().collect();
        components.sort_by(|a, b| a.id.cmp(&b.id));
        let component_index = components
            .iter()
            .enumerate()
            .map(|(i, c)| (&c.id, i))
            .collect();
        let zone_latency = topology
            .zone_latency_map(&app.requirements.user_zone)
            .map_err(|_| PlacementError::UnknownZone(app.requirements.user_zone.clone()))?;
        let norms = Normalizers::derive(topology, app, weights);
        Ok(Self {
            topology,
            view,
            app,
            weights,
            components,
            component_index,
            zone_latency,
            norms,
        })
    }

    /// Evaluates `segs[i]` as the segment of `self.components[i]`.
    ///
    /// Checks run in a fixed order — colocation, anti-affinity, capacity,
    /// locality, latency, throughput, carbon — and the cost terms accumulate
    /// in component-id order.
    pub fn evaluate_slice(&self, segs: &[&SegmentId]) -> ScoreOutcome {
        debug_assert_eq!(segs.len(), self.components.len());

        for (i, component) in self.components.iter().enumerate() {
            let here = segs[i];
            for peer in &component.colocation {
                let j = self.component_index[peer];
                if segs[j] != here {
                    return ScoreOutcome::Violated(ConstraintViolation::new(
                        ConstraintKind::Colocation,
                        format!("{} must share a segment with {}", component.id, peer),
                    ));
                }
            }
            for peer in &component.anti_affinity {
                let j = self.component_index[peer];
                if segs[j] == here {
                    return ScoreOutcome::Violated(ConstraintViolation::new(
                        ConstraintKind::AntiAffinity,
                        format!("{} must not share a segment with {}", component.id, peer),
                    ));
                }
            }
        }

        let mut load: BTreeMap<&SegmentId, ResourceVector> = BTreeMap::new();
        for (i, component) in self.components.iter().enumerate() {
            *load.entry(segs[i]).or_insert(ResourceVector::ZERO) += component.demand;
        }
        for (segment, demanded) in &load {
            let available = self
                .view
                .get(*segment)
                .copied()
                .unwrap_or(ResourceVector::ZERO);
            if !demanded.fits_within(&available) {
                return ScoreOutcome::Violated(ConstraintViolation::new(
                    ConstraintKind::Capacity,
                    format!("{segment} offers {available}, assignment needs {demanded}"),
                ));
            }
        }

        if let Some(allowed) = &self.app.requirements.data_locality {
            for (i, component) in self.components.iter().enumerate() {
                if component.demand.storage > 0 {
                    let segment = self.topology.segment(segs[i]).expect("validated");
                    if !allowed.contains(&segment.zone) {
                        return ScoreOutcome::Violated(ConstraintViolation::new(
                            ConstraintKind::Locality,
                            format!(
                                "storage-bearing {} placed in zone {} outside the allowed set",
                                component.id, segment.zone
                            ),
                        ));
                    }
                }
            }
        }

        let mut latency_ms = 0.0f64;
        for (i, component) in self.components.iter().enumerate() {
            if component.role != ComponentRole::Eas {
                continue;
            }
            match self.zone_latency.get(segs[i]) {
                Some(&l) => {
                    if l > self.app.requirements.max_latency_ms {
                        return ScoreOutcome::Violated(ConstraintViolation::new(
                            ConstraintKind::Latency,
                            format!(
                                "{} at {} is {l}ms from zone {}, bound {}ms",
                                component.id,
                                segs[i],
                                self.app.requirements.user_zone,
                                self.app.requirements.max_latency_ms
                            ),
                        ));
                    }
                    latency_ms = latency_ms.max(l);
                }
                None => {
                    return ScoreOutcome::Violated(ConstraintViolation::new(
                        ConstraintKind::Latency,
                        format!(
                            "{} at {} is unreachable from zone {}",
                            component.id, segs[i], self.app.requirements.user_zone
                        ),
                    ));
                }
            }
        }

        if self.app.requirements.min_throughput_mbps > 0.0 {
            for (i, component) in self.components.iter().enumerate() {
                if component.role != ComponentRole::Eas {
                    continue;
                }
                let segment = self.topology.segment(segs[i]).expect("validated");
                if (segment.capacity.bandwidth as f64) < self.app.requirements.min_throughput_mbps {
                    return ScoreOutcome::Violated(ConstraintViolation::new(
                        ConstraintKind::Throughput,
                        format!(
                            "{} cannot carry {} Mbps for {}",
                            segment.id, self.app.requirements.min_throughput_mbps, component.id
                        ),
                    ));
                }
            }
        }

        let mut energy_watts = 0.0f64;
        let mut carbon_g_per_h = 0.0f64;
        let mut money_per_h = 0.0f64;
        for (i, component) in self.components.iter().enumerate() {
            let (e, c, m) = self.component_cost(component, segs[i]);
            energy_watts += e;
            carbon_g_per_h += c;
            money_per_h += m;
        }

        if let Some(cap) = self.app.requirements.carbon_cap_g_per_h {
            if carbon_g_per_h > cap {
                return ScoreOutcome::Violated(ConstraintViolation::new(
                    ConstraintKind::Carbon,
                    format!("assignment emits {carbon_g_per_h} g/h, cap {cap} g/h"),
                ));
            }
        }

        ScoreOutcome::Feasible(CostBreakdown {
            latency_ms,
            energy_watts,
            carbon_g_per_h,
            money_per_h,
            scalar: self.scalarize(latency_ms, energy_watts, carbon_g_per_h, money_per_h),
        })
    }

    /// Marginal (energy W, carbon g/h, money/h) of one component on a segment.
    pub fn component_cost(&self, component: &ComponentSpec, segment: &SegmentId) -> (f64, f64, f64) {
        let segment = self.topology.segment(segment).expect("validated");
        let marginal_w = if segment.capacity.cpu > 0 {
            segment.power_slope_w() * (component.demand.cpu as f64 / segment.capacity.cpu as f64)
        } else {
            0.0
        };
        (
            marginal_w,
            segment.carbon_rate_g_per_h(marginal_w),
            segment.unit_cost_per_h * component.demand.unit_sum(),
        )
    }

    pub fn scalarize(&self, latency_ms: f64, energy_w: f64, carbon_g_per_h: f64, money_per_h: f64) -> f64 {
        self.weights.w_latency * latency_ms / self.norms.latency_ms
            + self.weights.w_energy * energy_w / self.norms.energy_w
            + self.weights.w_carbon * carbon_g_per_h / self.norms.carbon_g_per_h
            + self.weights.w_cost * money_per_h / self.norms.cost_per_h
    }
}

/// Per-term normalization denominators; non-positive denominators fall back
/// to 1 so the scalar stays finite.
struct Normalizers {
    latency_ms: f64,
    energy_w: f64,
    carbon_g_per_h: f64,
    cost_per_h: f64,
}

impl Normalizers {
    fn derive(topology: &Topology, app: &ApplicationDescriptor, weights: &ObjectiveWeights) -> Self {
        let latency_ms = weights
            .norm_latency_ms
            .unwrap_or(app.requirements.max_latency_ms);
        let energy_w = weights
            .norm_energy_w
            .unwrap_or_else(|| topology.segments.iter().map(|s| s.power_max_w).sum());
        let carbon_g_per_h = weights.norm_carbon_g_per_h.unwrap_or_else(|| {
            app.requirements.carbon_cap_g_per_h.unwrap_or_else(|| {
                topology
                    .segments
                    .iter()
                    .map(|s| s.carbon_rate_g_per_h(s.power_max_w))
                    .fold(0.0, f64::max)
            })
        });
        let cost_per_h = weights.norm_cost_per_h.unwrap_or_else(|| {
            let max_unit = topology
                .segments
                .iter()
                .map(|s| s.unit_cost_per_h)
                .fold(0.0, f64::max);
            max_unit * app.total_demand().unit_sum()
        });
        Self {
            latency_ms: positive_or_one(latency_ms),
            energy_w: positive_or_one(energy_w),
            carbon_g_per_h: positive_or_one(carbon_g_per_h),
            cost_per_h: positive_or_one(cost_per_h),
        }
    }
}

fn positive_or_one(x: f64) -> f64 {
    if x > 0.0 && x.is_finite() {
        x
    } else {
        1.0
    }
}
