//! Assignment search: exhaustive enumeration for desk-scale instances,
//! branch-and-bound with capacity pruning beyond, both with a fixed
//! lexicographic tie-break so results are bit-reproducible.
//!
//! Candidate evaluation is embarrassingly parallel; the parallel and
//! sequential paths reduce with the same total-order comparator and therefore
//! return identical plans.

use std::collections::BTreeMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::domain::Topology;
use crate::ids::{ComponentId, SegmentId};

use super::{
    ApplicationDescriptor, CapacityView, ConstraintKind, ConstraintViolation, EvalContext,
    ObjectiveWeights, PlacementError, PlacementPlan, ScoreOutcome,
};

/// Above this many total assignments the search switches from exhaustive
/// enumeration to branch-and-bound.
const EXHAUSTIVE_LIMIT: u128 = 20_000;

/// Optimal placement of an application into the offered capacity view.
///
/// Ties on the scalar cost are broken by the lexicographically smallest
/// assignment (segment ids in component-id order), so identical inputs yield
/// bit-identical plans.
pub fn place(
    topology: &Topology,
    view: &CapacityView,
    app: &ApplicationDescriptor,
    weights: &ObjectiveWeights,
) -> Result<PlacementPlan, PlacementError> {
    #[cfg(feature = "parallel")]
    {
        place_parallel(topology, view, app, weights)
    }
    #[cfg(not(feature = "parallel"))]
    {
        place_sequential(topology, view, app, weights)
    }
}

pub fn place_sequential(
    topology: &Topology,
    view: &CapacityView,
    app: &ApplicationDescriptor,
    weights: &ObjectiveWeights,
) -> Result<PlacementPlan, PlacementError> {
    search(topology, view, app, weights, None, false)
}

#[cfg(feature = "parallel")]
pub fn place_parallel(
    topology: &Topology,
    view: &CapacityView,
    app: &ApplicationDescriptor,
    weights: &ObjectiveWeights,
) -> Result<PlacementPlan, PlacementError> {
    search(topology, view, app, weights, None, true)
}

/// Re-plans an existing placement, charging `move_penalty` per component whose
/// segment changes. With penalty 0 this equals a fresh `place`; with an
/// infinite penalty it returns the current assignment whenever that is still
/// feasible.
pub fn replan_migration(
    current: &PlacementPlan,
    topology: &Topology,
    view: &CapacityView,
    app: &ApplicationDescriptor,
    weights: &ObjectiveWeights,
    move_penalty: f64,
) -> Result<PlacementPlan, PlacementError> {
    #[cfg(feature = "parallel")]
    {
        replan_migration_parallel(current, topology, view, app, weights, move_penalty)
    }
    #[cfg(not(feature = "parallel"))]
    {
        replan_migration_sequential(current, topology, view, app, weights, move_penalty)
    }
}

pub fn replan_migration_sequential(
    current: &PlacementPlan,
    topology: &Topology,
    view: &CapacityView,
    app: &ApplicationDescriptor,
    weights: &ObjectiveWeights,
    move_penalty: f64,
) -> Result<PlacementPlan, PlacementError> {
    search(
        topology,
        view,
        app,
        weights,
        Some((&current.assignment, move_penalty)),
        false,
    )
}

#[cfg(feature = "parallel")]
pub fn replan_migration_parallel(
    current: &PlacementPlan,
    topology: &Topology,
    view: &CapacityView,
    app: &ApplicationDescriptor,
    weights: &ObjectiveWeights,
    move_penalty: f64,
) -> Result<PlacementPlan, PlacementError> {
    search(
        topology,
        view,
        app,
        weights,
        Some((&current.assignment, move_penalty)),
        true,
    )
}

struct Best {
    objective: f64,
    indices: Vec<u32>,
    cost: super::CostBreakdown,
}

fn better(a: &Best, b: &Best) -> bool {
    // total order: objective, then lexicographic candidate indices
    (a.objective, &a.indices) < (b.objective, &b.indices)
}

fn min_best(a: Option<Best>, b: Option<Best>) -> Option<Best> {
    match (a, b) {
        (Some(a), Some(b)) => Some(if better(&a, &b) { a } else { b }),
        (a, None) => a,
        (None, b) => b,
    }
}

struct Instance<'a> {
    ctx: EvalContext<'a>,
    /// Candidate segments per component, sorted by id; index order is
    /// therefore lexicographic segment order.
    candidates: Vec<Vec<&'a SegmentId>>,
    /// Why segments were rejected per component, for infeasibility reports.
    reject_reasons: Vec<BTreeMap<ConstraintKind, String>>,
    /// Prior assignment and per-move penalty for re-planning.
    prior: Option<(Vec<Option<&'a SegmentId>>, f64)>,
}

impl<'a> Instance<'a> {
    fn build(
        topology: &'a Topology,
        view: &'a CapacityView,
        app: &'a ApplicationDescriptor,
        weights: &'a ObjectiveWeights,
        prior: Option<(&'a BTreeMap<ComponentId, SegmentId>, f64)>,
    ) -> Result<Self, PlacementError> {
        let ctx = EvalContext::new(topology, view, app, weights)?;
        let mut segment_ids: Vec<&SegmentId> = view.keys().collect();
        segment_ids.retain(|id| topology.segment(id).is_some());
        segment_ids.sort();

        let requirements = &app.requirements;
        let mut candidates = Vec::with_capacity(ctx.components.len());
        let mut reject_reasons = Vec::with_capacity(ctx.components.len());
        for component in &ctx.components {
            let mut ok = Vec::new();
            let mut rejects: BTreeMap<ConstraintKind, String> = BTreeMap::new();
            for &segment in &segment_ids {
                let available = view[segment];
                if !component.demand.fits_within(&available) {
                    rejects.entry(ConstraintKind::Capacity).or_insert_with(|| {
                        format!("{segment} offers {available} < demand of {}", component.id)
                    });
                    continue;
                }
                let descriptor = topology.segment(segment).expect("retained above");
                if component.demand.storage > 0 {
                    if let Some(allowed) = &requirements.data_locality {
                        if !allowed.contains(&descriptor.zone) {
                            rejects.entry(ConstraintKind::Locality).or_insert_with(|| {
                                format!("zone {} not allowed for {}", descriptor.zone, component.id)
                            });
                            continue;
                        }
                    }
                }
                if component.role == super::ComponentRole::Eas {
                    match ctx.zone_latency.get(segment) {
                        Some(&l) if l <= requirements.max_latency_ms => {}
                        Some(&l) => {
                            rejects.entry(ConstraintKind::Latency).or_insert_with(|| {
                                format!(
                                    "{segment} is {l}ms from zone {}, bound {}ms",
                                    requirements.user_zone, requirements.max_latency_ms
                                )
                            });
                            continue;
                        }
                        None => {
                            rejects.entry(ConstraintKind::Latency).or_insert_with(|| {
                                format!(
                                    "{segment} unreachable from zone {}",
                                    requirements.user_zone
                                )
                            });
                            continue;
                        }
                    }
                    if requirements.min_throughput_mbps > 0.0
                        && (descriptor.capacity.bandwidth as f64) < requirements.min_throughput_mbps
                    {
                        rejects.entry(ConstraintKind::Throughput).or_insert_with(|| {
                            format!(
                                "{segment} cannot carry {} Mbps",
                                requirements.min_throughput_mbps
                            )
                        });
                        continue;
                    }
                }
                ok.push(segment);
            }
            candidates.push(ok);
            reject_reasons.push(rejects);
        }

        let prior = prior.map(|(assignment, penalty)| {
            let per_component: Vec<Option<&SegmentId>> = ctx
                .components
                .iter()
                .map(|c| assignment.get(&c.id))
                .collect();
            (per_component, penalty)
        });

        Ok(Self {
            ctx,
            candidates,
            reject_reasons,
            prior,
        })
    }

    fn total_assignments(&self) -> u128 {
        self.candidates
            .iter()
            .map(|c| c.len() as u128)
            .try_fold(1u128, |acc, n| acc.checked_mul(n))
            .unwrap_or(u128::MAX)
    }

    fn decode(&self, mut index: u128, out: &mut Vec<u32>) {
        out.clear();
        out.resize(self.candidates.len(), 0);
        for d in (0..self.candidates.len()).rev() {
            let radix = self.candidates[d].len() as u128;
            out[d] = (index % radix) as u32;
            index /= radix;
        }
    }

    fn segments_for(&self, indices: &[u32]) -> Vec<&'a SegmentId> {
        indices
            .iter()
            .enumerate()
            .map(|(d, &i)| self.candidates[d][i as usize])
            .collect()
    }

    /// Move-penalty surcharge for an assignment; zero moves add nothing, so an
    /// infinite penalty still yields a finite objective for the unchanged plan.
    fn penalty(&self, segs: &[&SegmentId]) -> f64 {
        let Some((prior, per_move)) = &self.prior else {
            return 0.0;
        };
        let moves = segs
            .iter()
            .zip(prior.iter())
            .filter(|(seg, prior)| prior.map_or(false, |p| p != **seg))
            .count();
        if moves == 0 {
            0.0
        } else {
            *per_move * moves as f64
        }
    }

    fn evaluate(&self, indices: &[u32]) -> Result<Best, ConstraintViolation> {
        let segs = self.segments_for(indices);
        match self.ctx.evaluate_slice(&segs) {
            ScoreOutcome::Feasible(cost) => Ok(Best {
                objective: cost.scalar + self.penalty(&segs),
                indices: indices.to_vec(),
                cost,
            }),
            ScoreOutcome::Violated(v) => Err(v),
        }
    }

    fn plan_from(&self, best: Best) -> PlacementPlan {
        let assignment = self
            .ctx
            .components
            .iter()
            .zip(self.segments_for(&best.indices))
            .map(|(c, s)| (c.id.clone(), s.clone()))
            .collect();
        PlacementPlan {
            assignment,
            cost: best.cost,
        }
    }

    fn infeasible(&self, observed: BTreeMap<ConstraintKind, String>) -> PlacementError {
        let mut blocking: BTreeMap<ConstraintKind, String> = BTreeMap::new();
        for (component, reasons) in self.ctx.components.iter().zip(&self.reject_reasons) {
            if self.candidates[self.ctx.component_index[&component.id]].is_empty() {
                for (kind, detail) in reasons {
                    blocking.entry(*kind).or_insert_with(|| detail.clone());
                }
            }
        }
        for (kind, detail) in observed {
            blocking.entry(kind).or_insert(detail);
        }
        if blocking.is_empty() {
            blocking.insert(
                ConstraintKind::Capacity,
                "no candidate segments offered".into(),
            );
        }
        PlacementError::Infeasible {
            blocking: blocking
                .into_iter()
                .map(|(kind, detail)| ConstraintViolation { kind, detail })
                .collect(),
        }
    }
}

fn search(
    topology: &Topology,
    view: &CapacityView,
    app: &ApplicationDescriptor,
    weights: &ObjectiveWeights,
    prior: Option<(&BTreeMap<ComponentId, SegmentId>, f64)>,
    parallel: bool,
) -> Result<PlacementPlan, PlacementError> {
    let instance = Instance::build(topology, view, app, weights, prior)?;
    if instance.candidates.iter().any(|c| c.is_empty()) {
        return Err(instance.infeasible(BTreeMap::new()));
    }

    let total = instance.total_assignments();
    let best = if total <= EXHAUSTIVE_LIMIT {
        exhaustive(&instance, total as u64, parallel)
    } else {
        branch_and_bound(&instance, parallel)
    };

    match best {
        Some(best) => Ok(instance.plan_from(best)),
        None => {
            // Collect what ruled everything out: a bounded sequential sweep is
            // affordable in the exhaustive regime, branch and bound reports
            // the kinds it observed while pruning.
            let mut observed = BTreeMap::new();
            if total <= EXHAUSTIVE_LIMIT {
                let mut indices = Vec::new();
                for i in 0..total {
                    instance.decode(i, &mut indices);
                    if let Err(v) = instance.evaluate(&indices) {
                        observed.entry(v.kind).or_insert(v.detail);
                    }
                }
            } else {
                let mut scratch = BbScratch::new(&instance, f64::INFINITY);
                bb_collect(&instance, &mut scratch, 0, &mut observed);
            }
            Err(instance.infeasible(observed))
        }
    }
}

fn exhaustive(instance: &Instance<'_>, total: u64, parallel: bool) -> Option<Best> {
    let eval = |i: u64| -> Option<Best> {
        let mut indices = Vec::new();
        instance.decode(i as u128, &mut indices);
        instance.evaluate(&indices).ok()
    };

    #[cfg(feature = "parallel")]
    if parallel {
        return (0..total)
            .into_par_iter()
            .map(eval)
            .reduce(|| None, min_best);
    }
    let _ = parallel;
    (0..total).map(eval).fold(None, min_best)
}

/// Intermediate totals along a branch-and-bound path. All additive terms only
/// grow as components are assigned, so the partial objective is a valid lower
/// bound for every completion of the path.
struct BbScratch {
    indices: Vec<u32>,
    load: BTreeMap<SegmentId, crate::domain::ResourceVector>,
    energy_w: Vec<f64>,
    carbon_g_per_h: Vec<f64>,
    money_per_h: Vec<f64>,
    latency_ms: Vec<f64>,
    moves: Vec<usize>,
    bound: f64,
    best: Option<Best>,
}

impl BbScratch {
    fn new(instance: &Instance<'_>, bound: f64) -> Self {
        let n = instance.candidates.len();
        Self {
            indices: vec![0; n],
            load: BTreeMap::new(),
            energy_w: vec![0.0; n + 1],
            carbon_g_per_h: vec![0.0; n + 1],
            money_per_h: vec![0.0; n + 1],
            latency_ms: vec![0.0; n + 1],
            moves: vec![0; n + 1],
            bound,
            best: None,
        }
    }
}

fn branch_and_bound(instance: &Instance<'_>, parallel: bool) -> Option<Best> {
    let first = &instance.candidates[0];
    let run_branch = |i: usize| -> Option<Best> {
        let mut scratch = BbScratch::new(instance, f64::INFINITY);
        scratch.indices[0] = i as u32;
        bb_descend(instance, &mut scratch, 0, true);
        scratch.best
    };

    #[cfg(feature = "parallel")]
    if parallel {
        return (0..first.len())
            .into_par_iter()
            .map(run_branch)
            .reduce(|| None, min_best);
    }
    let _ = parallel;
    (0..first.len()).map(run_branch).fold(None, min_best)
}

/// Depth-first descent assigning component `depth`. When `pinned` the index at
/// this depth is fixed (used for the per-branch parallel split).
fn bb_descend(instance: &Instance<'_>, scratch: &mut BbScratch, depth: usize, pinned: bool) {
    let n = instance.candidates.len();
    if depth == n {
        if let Ok(candidate) = instance.evaluate(&scratch.indices.clone()) {
            if scratch
                .best
                .as_ref()
                .map_or(true, |best| better(&candidate, best))
            {
                scratch.bound = candidate.objective;
                scratch.best = Some(candidate);
            }
        }
        return;
    }

    let component = instance.ctx.components[depth];
    let choices: Vec<usize> = if pinned {
        vec![scratch.indices[depth] as usize]
    } else {
        (0..instance.candidates[depth].len()).collect()
    };

    'choices: for choice in choices {
        let segment = instance.candidates[depth][choice];
        scratch.indices[depth] = choice as u32;

        // Relational constraints against already-assigned components.
        for peer in &component.colocation {
            let j = instance.ctx.component_index[peer];
            if j < depth && instance.candidates[j][scratch.indices[j] as usize] != segment {
                continue 'choices;
            }
        }
        for peer in &component.anti_affinity {
            let j = instance.ctx.component_index[peer];
            if j < depth && instance.candidates[j][scratch.indices[j] as usize] == segment {
                continue 'choices;
            }
        }

        // Running capacity.
        let used = scratch
            .load
            .get(segment)
            .copied()
            .unwrap_or(crate::domain::ResourceVector::ZERO);
        let after = used + component.demand;
        if !after.fits_within(&instance.ctx.view[segment]) {
            continue;
        }

        // Accumulate cost terms and bound.
        let (e, c, m) = instance.ctx.component_cost(component, segment);
        scratch.energy_w[depth + 1] = scratch.energy_w[depth] + e;
        scratch.carbon_g_per_h[depth + 1] = scratch.carbon_g_per_h[depth] + c;
        scratch.money_per_h[depth + 1] = scratch.money_per_h[depth] + m;
        scratch.latency_ms[depth + 1] = if component.role == super::ComponentRole::Eas {
            scratch.latency_ms[depth].max(instance.ctx.zone_latency[segment])
        } else {
            scratch.latency_ms[depth]
        };
        scratch.moves[depth + 1] = scratch.moves[depth]
            + match &instance.prior {
                Some((prior, _)) => usize::from(prior[depth].map_or(false, |p| p != segment)),
                None => 0,
            };

        if let Some(cap) = instance.ctx.app.requirements.carbon_cap_g_per_h {
            if scratch.carbon_g_per_h[depth + 1] > cap {
                continue;
            }
        }
        let mut lower = instance.ctx.scalarize(
            scratch.latency_ms[depth + 1],
            scratch.energy_w[depth + 1],
            scratch.carbon_g_per_h[depth + 1],
            scratch.money_per_h[depth + 1],
        );
        if scratch.moves[depth + 1] > 0 {
            if let Some((_, penalty)) = &instance.prior {
                lower += penalty * scratch.moves[depth + 1] as f64;
            }
        }
        if lower >= scratch.bound {
            continue;
        }

        scratch.load.insert(segment.clone(), after);
        bb_descend(instance, scratch, depth + 1, false);
        scratch.load.insert(segment.clone(), used);
    }
}

/// Sweep used only to explain infeasibility in the branch-and-bound regime:
/// walks the tree without bounding and records the violation kinds seen.
fn bb_collect(
    instance: &Instance<'_>,
    scratch: &mut BbScratch,
    depth: usize,
    observed: &mut BTreeMap<ConstraintKind, String>,
) {
    let n = instance.candidates.len();
    if depth == n {
        if let Err(v) = instance.evaluate(&scratch.indices.clone()) {
            observed.entry(v.kind).or_insert(v.detail);
        }
        return;
    }
    if observed.len() >= 4 {
        return;
    }
    let component = instance.ctx.components[depth];
    for choice in 0..instance.candidates[depth].len() {
        let segment = instance.candidates[depth][choice];
        scratch.indices[depth] = choice as u32;
        let used = scratch
            .load
            .get(segment)
            .copied()
            .unwrap_or(crate::domain::ResourceVector::ZERO);
        let after = used + component.demand;
        if !after.fits_within(&instance.ctx.view[segment]) {
            observed
                .entry(ConstraintKind::Capacity)
                .or_insert_with(|| format!("combined demand exceeds {segment}"));
            continue;
        }
        scratch.load.insert(segment.clone(), after);
        bb_collect(instance, scratch, depth + 1, observed);
        scratch.load.insert(segment.clone(), used);
    }
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use super::super::testkit::*;
    use super::super::*;
    use crate::domain::ResourceVector;
    use crate::ids::{ComponentId, SegmentId};

    fn view_of(t: &Topology) -> CapacityView {
        full_capacity_view(t)
    }

    #[test]
    fn single_feasible_segment_is_forced() {
        let t = topology(&[("only", 100.0, "z1")]);
        let app = single_component_app("z-user", 100.0);
        let plan = place(&t, &view_of(&t), &app, &ObjectiveWeights::latency_only()).unwrap();
        assert_eq!(plan.assignment[&ComponentId::new("web")], SegmentId::new("only"));
    }

    #[test]
    fn latency_weights_pick_the_near_segment() {
        // near: 5ms from user zone; far: 5 + 45 = 50ms
        let t = topology(&[("near", 400.0, "z-near"), ("far", 50.0, "z-far")]);
        let app = single_component_app("z-user", 100.0);
        let plan = place(&t, &view_of(&t), &app, &ObjectiveWeights::latency_only()).unwrap();
        assert_eq!(plan.assignment[&ComponentId::new("web")], SegmentId::new("near"));
        assert_eq!(plan.cost.latency_ms, 5.0);
    }

    #[test]
    fn carbon_weights_pick_the_low_carbon_segment() {
        let t = topology(&[("near", 400.0, "z-near"), ("far", 50.0, "z-far")]);
        let app = single_component_app("z-user", 100.0);
        let plan = place(&t, &view_of(&t), &app, &ObjectiveWeights::carbon_only()).unwrap();
        assert_eq!(plan.assignment[&ComponentId::new("web")], SegmentId::new("far"));
    }

    #[test]
    fn impossible_carbon_cap_reports_carbon_blocking() {
        let t = topology(&[("near", 400.0, "z-near"), ("far", 50.0, "z-far")]);
        let mut app = single_component_app("z-user", 100.0);
        app.requirements.carbon_cap_g_per_h = Some(0.0001);
        let err = place(&t, &view_of(&t), &app, &ObjectiveWeights::carbon_only()).unwrap_err();
        match err {
            PlacementError::Infeasible { blocking } => {
                assert!(blocking.iter().any(|b| b.kind == ConstraintKind::Carbon), "{blocking:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn replan_is_a_fixed_point_when_nothing_changed() {
        let t = topology(&[("near", 400.0, "z-near"), ("far", 50.0, "z-far")]);
        let app = single_component_app("z-user", 100.0);
        let weights = ObjectiveWeights::latency_only();
        let view = view_of(&t);
        let plan = place(&t, &view, &app, &weights).unwrap();
        let replanned = replan_migration(&plan, &t, &view, &app, &weights, 10.0).unwrap();
        assert_eq!(replanned.assignment, plan.assignment);
    }

    #[test]
    fn replan_with_zero_penalty_equals_fresh_place() {
        let t = topology(&[("a", 100.0, "z1"), ("b", 100.0, "z1"), ("c", 100.0, "z1")]);
        let app = single_component_app("z-user", 1000.0);
        let weights = ObjectiveWeights::carbon_only();
        let view = view_of(&t);
        let stale = PlacementPlan {
            assignment: BTreeMap::from([(ComponentId::new("web"), SegmentId::new("c"))]),
            cost: CostBreakdown {
                latency_ms: 0.0,
                energy_watts: 0.0,
                carbon_g_per_h: 0.0,
                money_per_h: 0.0,
                scalar: 0.0,
            },
        };
        let fresh = place(&t, &view, &app, &weights).unwrap();
        let replanned = replan_migration(&stale, &t, &view, &app, &weights, 0.0).unwrap();
        assert_eq!(replanned, fresh);
    }

    #[test]
    fn replan_with_infinite_penalty_keeps_feasible_current() {
        let t = topology(&[("near", 400.0, "z-near"), ("far", 50.0, "z-far")]);
        let app = single_component_app("z-user", 100.0);
        let weights = ObjectiveWeights::latency_only();
        let view = view_of(&t);
        // Current sits on the worse segment, but it is feasible: stay put.
        let current = PlacementPlan {
            assignment: BTreeMap::from([(ComponentId::new("web"), SegmentId::new("far"))]),
            cost: CostBreakdown {
                latency_ms: 50.0,
                energy_watts: 0.0,
                carbon_g_per_h: 0.0,
                money_per_h: 0.0,
                scalar: 0.5,
            },
        };
        let replanned =
            replan_migration(&current, &t, &view, &app, &weights, f64::INFINITY).unwrap();
        assert_eq!(replanned.assignment, current.assignment);
    }

    #[test]
    fn replan_moves_when_constraints_force_it() {
        // User moved: the old segment now violates the latency bound, so the
        // component moves despite the penalty.
        let t = topology(&[("near", 400.0, "z-near"), ("far", 50.0, "z-far")]);
        let mut app = single_component_app("z-user", 20.0);
        app.requirements.max_latency_ms = 20.0;
        let weights = ObjectiveWeights::latency_only();
        let view = view_of(&t);
        let current = PlacementPlan {
            assignment: BTreeMap::from([(ComponentId::new("web"), SegmentId::new("far"))]),
            cost: CostBreakdown {
                latency_ms: 50.0,
                energy_watts: 0.0,
                carbon_g_per_h: 0.0,
                money_per_h: 0.0,
                scalar: 0.5,
            },
        };
        let replanned = replan_migration(&current, &t, &view, &app, &weights, 100.0).unwrap();
        assert_eq!(
            replanned.assignment[&ComponentId::new("web")],
            SegmentId::new("near")
        );
    }

    #[test]
    fn ties_break_lexicographically_by_segment_id() {
        // Two identical segments in the same zone: equal cost, "a" wins.
        let t = topology(&[("b", 100.0, "z1"), ("a", 100.0, "z1")]);
        let mut app = single_component_app("z1", 1000.0);
        app.requirements.user_zone = "z1".into();
        let plan = place(&t, &view_of(&t), &app, &ObjectiveWeights::carbon_only()).unwrap();
        assert_eq!(plan.assignment[&ComponentId::new("web")], SegmentId::new("a"));
    }

    #[test]
    fn colocation_and_anti_affinity_are_honored() {
        let t = topology(&[("a", 100.0, "z1"), ("b", 100.0, "z1")]);
        let mut app = single_component_app("z1", 1000.0);
        app.requirements.user_zone = "z1".into();
        let web = app.components[0].clone();
        let mut db = web.clone();
        db.id = "db".into();
        db.role = ComponentRole::Generic;
        db.anti_affinity = BTreeSet::from([ComponentId::new("web")]);
        let mut cache = web.clone();
        cache.id = "cache".into();
        cache.role = ComponentRole::Generic;
        cache.colocation = BTreeSet::from([ComponentId::new("web")]);
        app.components.push(db);
        app.components.push(cache);

        let plan = place(&t, &view_of(&t), &app, &ObjectiveWeights::carbon_only()).unwrap();
        let web_seg = &plan.assignment[&ComponentId::new("web")];
        assert_eq!(&plan.assignment[&ComponentId::new("cache")], web_seg);
        assert_ne!(&plan.assignment[&ComponentId::new("db")], web_seg);
    }

    /// Independent oracle: enumerate every total assignment via the public
    /// scorer and keep the best (scalar, lexicographic assignment).
    pub(crate) fn exhaustive_oracle(
        t: &Topology,
        view: &CapacityView,
        app: &ApplicationDescriptor,
        weights: &ObjectiveWeights,
    ) -> Option<(f64, BTreeMap<ComponentId, SegmentId>)> {
        let mut components: Vec<&ComponentSpec> = app.components.iter().collect();
        components.sort_by(|a, b| a.id.cmp(&b.id));
        let segments: Vec<&SegmentId> = view.keys().collect();
        let mut best: Option<(f64, Vec<&SegmentId>)> = None;
        let mut stack = vec![0usize; components.len()];
        'outer: loop {
            let assignment: BTreeMap<ComponentId, SegmentId> = components
                .iter()
                .zip(&stack)
                .map(|(c, &i)| (c.id.clone(), segments[i].clone()))
                .collect();
            if let Ok(ScoreOutcome::Feasible(cost)) =
                score_placement_in_view(t, view, app, &assignment, weights)
            {
                let key: Vec<&SegmentId> = stack.iter().map(|&i| segments[i]).collect();
                if best
                    .as_ref()
                    .map_or(true, |(s, k)| (cost.scalar, &key) < (*s, k))
                {
                    best = Some((cost.scalar, key));
                }
            }
            // increment mixed-radix counter
            for d in (0..stack.len()).rev() {
                stack[d] += 1;
                if stack[d] < segments.len() {
                    continue 'outer;
                }
                stack[d] = 0;
                if d == 0 {
                    break 'outer;
                }
            }
            if stack.is_empty() {
                break;
            }
        }
        best.map(|(scalar, key)| {
            (
                scalar,
                components
                    .iter()
                    .zip(key)
                    .map(|(c, s)| (c.id.clone(), s.clone()))
                    .collect(),
            )
        })
    }

    pub(crate) fn random_instance(
        rng: &mut impl rand::Rng,
    ) -> (Topology, ApplicationDescriptor, ObjectiveWeights) {
        let n_segments = rng.gen_range(1..=6);
        let segs: Vec<(String, f64, String)> = (0..n_segments)
            .map(|i| {
                (
                    format!("s{i}"),
                    rng.gen_range(10..=800) as f64,
                    format!("z{}", rng.gen_range(0..3)),
                )
            })
            .collect();
        let seg_refs: Vec<(&str, f64, &str)> = segs
            .iter()
            .map(|(id, c, z)| (id.as_str(), *c, z.as_str()))
            .collect();
        let mut t = topology(&seg_refs);
        for (i, seg) in t.segments.iter_mut().enumerate() {
            seg.capacity = ResourceVector::new(
                rng.gen_range(500..=4000),
                rng.gen_range(1024..=16384),
                rng.gen_range(10..=200),
                rng.gen_range(100..=2000),
            );
            seg.power_idle_w = rng.gen_range(50..=150) as f64;
            seg.power_max_w = seg.power_idle_w + rng.gen_range(50..=400) as f64;
            seg.unit_cost_per_h = rng.gen_range(1..=20) as f64 / 10.0;
            let _ = i;
        }
        let n_components = rng.gen_range(1..=4);
        let components: Vec<ComponentSpec> = (0..n_components)
            .map(|i| ComponentSpec {
                id: format!("c{i}").into(),
                demand: ResourceVector::new(
                    rng.gen_range(0..=1500),
                    rng.gen_range(0..=4096),
                    rng.gen_range(0..=50),
                    rng.gen_range(0..=300),
                ),
                role: if i == 0 || rng.gen_bool(0.4) {
                    ComponentRole::Eas
                } else {
                    ComponentRole::Generic
                },
                colocation: BTreeSet::new(),
                anti_affinity: BTreeSet::new(),
            })
            .collect();
        let app = ApplicationDescriptor {
            id: "app".into(),
            provider: "own".into(),
            components,
            requirements: ServiceRequirements {
                user_zone: "z-user".into(),
                max_latency_ms: rng.gen_range(10..=400) as f64,
                min_throughput_mbps: 0.0,
                data_locality: None,
                carbon_cap_g_per_h: None,
                availability_class: AvailabilityClass::BestEffort,
            },
        };
        let weights = ObjectiveWeights {
            w_latency: rng.gen_range(0..=10) as f64 / 10.0,
            w_energy: rng.gen_range(0..=10) as f64 / 10.0,
            w_carbon: rng.gen_range(0..=10) as f64 / 10.0,
            w_cost: rng.gen_range(1..=10) as f64 / 10.0,
            norm_latency_ms: None,
            norm_energy_w: None,
            norm_carbon_g_per_h: None,
            norm_cost_per_h: None,
        };
        (t, app, weights)
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_instances() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(2024);
        let mut feasible_seen = 0;
        for _ in 0..60 {
            let (t, app, weights) = random_instance(&mut rng);
            let view = full_capacity_view(&t);
            let fast = place(&t, &view, &app, &weights);
            let oracle = exhaustive_oracle(&t, &view, &app, &weights);
            match (fast, oracle) {
                (Ok(plan), Some((scalar, assignment))) => {
                    feasible_seen += 1;
                    assert!(
                        (plan.cost.scalar - scalar).abs() <= 1e-9 * scalar.abs().max(1.0),
                        "scalar {} vs oracle {scalar}",
                        plan.cost.scalar
                    );
                    assert_eq!(plan.assignment, assignment);
                }
                (Err(PlacementError::Infeasible { .. }), None) => {}
                (fast, oracle) => panic!("disagreement: {fast:?} vs {oracle:?}"),
            }
        }
        assert!(feasible_seen > 10, "instance generator too restrictive");
    }

    #[test]
    fn scaling_weights_leaves_argmin_unchanged() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(5150);
        for _ in 0..20 {
            let (t, app, weights) = random_instance(&mut rng);
            let view = full_capacity_view(&t);
            let scaled = ObjectiveWeights {
                w_latency: weights.w_latency * 7.5,
                w_energy: weights.w_energy * 7.5,
                w_carbon: weights.w_carbon * 7.5,
                w_cost: weights.w_cost * 7.5,
                ..weights.clone()
            };
            match (place(&t, &view, &app, &weights), place(&t, &view, &app, &scaled)) {
                (Ok(a), Ok(b)) => assert_eq!(a.assignment, b.assignment),
                (Err(_), Err(_)) => {}
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn removing_a_segment_never_improves_the_optimum() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(99);
        for _ in 0..20 {
            let (t, app, weights) = random_instance(&mut rng);
            if t.segments.len() < 2 {
                continue;
            }
            let view = full_capacity_view(&t);
            let Ok(full) = place(&t, &view, &app, &weights) else {
                continue;
            };
            let mut reduced = view.clone();
            let removed: Vec<SegmentId> = reduced.keys().take(1).cloned().collect();
            reduced.remove(&removed[0]);
            match place(&t, &reduced, &app, &weights) {
                Ok(plan) => assert!(plan.cost.scalar >= full.cost.scalar - 1e-12),
                Err(PlacementError::Infeasible { .. }) => {}
                Err(other) => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn identical_inputs_produce_identical_plans() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(4242);
        let (t, app, weights) = random_instance(&mut rng);
        let view = full_capacity_view(&t);
        let a = place(&t, &view, &app, &weights);
        let b = place(&t, &view, &app, &weights);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                assert_eq!(a, b);
                assert_eq!(a.cost.scalar.to_bits(), b.cost.scalar.to_bits());
            }
            (Err(_), Err(_)) => {}
            other => panic!("{other:?}"),
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_agree_bit_for_bit() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(777);
        for _ in 0..40 {
            let (t, app, weights) = random_instance(&mut rng);
            let view = full_capacity_view(&t);
            let par = place_parallel(&t, &view, &app, &weights);
            let seq = place_sequential(&t, &view, &app, &weights);
            match (par, seq) {
                (Ok(p), Ok(s)) => {
                    assert_eq!(p.assignment, s.assignment);
                    assert_eq!(p.cost.scalar.to_bits(), s.cost.scalar.to_bits());
                }
                (Err(_), Err(_)) => {}
                other => panic!("{other:?}"),
            }
        }
    }
}
