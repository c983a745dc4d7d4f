//! Closed-loop composition and evaluation: monitor -> analyze -> decide ->
//! actuate loops assembled from declared parts, evaluated each tick against
//! twin snapshots.
//!
//! Policies are deterministic rules behind a `policy id + parameters`
//! interface; a learned policy can be registered without engine changes.
//! Loops never actuate directly: every evaluation yields at most one
//! proposal, which flows to the coordinator.

pub mod policies;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ResourceVector, Topology};
use crate::ids::{AppId, ComponentId, ContinuumId, LoopId, ProposalId, SegmentId};
use crate::placement::ServiceRequirements;
use crate::twin::{MetricKey, TwinSnapshot};

/// Event categories a loop trigger can subscribe to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    UserMobility,
    MaintenanceShutdown,
    LoadSurge,
    SegmentFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopScope {
    Continuum(ContinuumId),
    CrossSegment,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSelector {
    SegmentCpu(SegmentId),
    AppCpu(AppId),
    AppLatency(AppId),
    AppThroughput(AppId),
    AppReadyInstances(AppId),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Periodic { every: u64 },
    OnEvent { kind: EventKind },
}

/// A policy reference plus its parameter document, parsed by the policy
/// factory at composition time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBinding {
    pub id: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManagedEntity {
    App(AppId),
    Continuum(ContinuumId),
    Segment(SegmentId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopSpec {
    pub id: LoopId,
    pub scope: LoopScope,
    pub monitors: Vec<MetricSelector>,
    pub analyzer: String,
    pub policy: PolicyBinding,
    pub targets: BTreeSet<ManagedEntity>,
    pub trigger: Trigger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<LoopId>,
    #[serde(default)]
    pub priority: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    ScaleUp { amount: u32 },
    ScaleDown { amount: u32 },
    Migrate { component: ComponentId, to: SegmentId },
    Reconfigure { key: String, value: String },
    NegotiateQuality { app: AppId },
}

impl Action {
    pub fn scale_direction(&self) -> Option<ScaleDirection> {
        match self {
            Action::ScaleUp { .. } => Some(ScaleDirection::Up),
            Action::ScaleDown { .. } => Some(ScaleDirection::Down),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleDirection {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedEffect {
    pub metric: MetricKey,
    pub delta: f64,
}

/// An action requested by a loop, pending coordinator approval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuationProposal {
    pub id: ProposalId,
    pub loop_id: LoopId,
    pub target: ManagedEntity,
    pub action: Action,
    pub expected_effect: Option<ExpectedEffect>,
    pub priority: i64,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub proposal: Option<ActuationProposal>,
    pub rationale: String,
}

impl PolicyOutcome {
    pub fn none(rationale: impl Into<String>) -> Self {
        Self {
            proposal: None,
            rationale: rationale.into(),
        }
    }
}

/// Per-loop mutable memory; today only the hysteresis anchor for scale
/// policies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub last_scale: Option<(u64, ScaleDirection)>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopError {
    #[error("loop {0} already composed")]
    DuplicateLoop(LoopId),
    #[error("unknown analyzer {0}")]
    UnknownAnalyzer(String),
    #[error("unknown policy {0}")]
    UnknownPolicy(String),
    #[error("bad policy parameters: {0}")]
    BadParams(String),
    #[error("cyclic loop nesting at {0}")]
    CyclicNesting(LoopId),
    #[error("unknown parent loop {0}")]
    UnknownParent(LoopId),
    #[error("loop has no actuator targets")]
    EmptyTargets,
    #[error("periodic trigger must fire at least every 1 tick")]
    BadTrigger,
    #[error("unknown scope: {0}")]
    UnknownScope(String),
    #[error("target outside loop scope: {0}")]
    ScopeViolation(String),
    #[error("monitor references unknown entity: {0}")]
    UnknownMonitor(String),
    #[error("metric selector absent from snapshot: {0}")]
    MissingMetric(String),
}

/// Everything a policy may read besides the snapshot: the topology, the
/// availability-filtered quota headroom per continuum, and the effective
/// (possibly negotiated) service requirements per application.
pub struct LoopEnv<'a> {
    pub topology: &'a Topology,
    pub headroom: &'a BTreeMap<ContinuumId, BTreeMap<SegmentId, ResourceVector>>,
    pub requirements: &'a BTreeMap<AppId, ServiceRequirements>,
}

pub struct PolicyContext<'a> {
    pub spec: &'a ClosedLoopSpec,
    pub tick: u64,
    pub analysis: &'a AnalysisOutput,
    pub snapshot: &'a TwinSnapshot,
    pub env: &'a LoopEnv<'a>,
    pub state: &'a LoopState,
}

impl PolicyContext<'_> {
    /// The first application among the loop's actuator targets.
    pub fn target_app(&self) -> Option<&AppId> {
        self.spec.targets.iter().find_map(|t| match t {
            ManagedEntity::App(id) => Some(id),
            _ => None,
        })
    }

    pub fn proposal(
        &self,
        target: ManagedEntity,
        action: Action,
        expected_effect: Option<ExpectedEffect>,
    ) -> ActuationProposal {
        ActuationProposal {
            id: ProposalId(0), // assigned by the engine in canonical order
            loop_id: self.spec.id.clone(),
            target,
            action,
            expected_effect,
            priority: self.spec.priority,
            tick: self.tick,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutput {
    pub aggregate: Option<f64>,
    pub values: Vec<(MetricSelector, f64)>,
}

pub trait AnalyzerImpl: Send + Sync {
    fn analyze(&self, values: &[(MetricSelector, f64)]) -> AnalysisOutput;
}

pub trait PolicyImpl: Send + Sync {
    fn decide(&self, ctx: &PolicyContext<'_>) -> Result<PolicyOutcome, LoopError>;
}

type AnalyzerFactory = fn() -> Box<dyn AnalyzerImpl>;
type PolicyFactory = fn(&serde_json::Value) -> Result<Box<dyn PolicyImpl>, LoopError>;

/// Registry of analyzer and policy implementations keyed by id.
pub struct PolicyRegistry {
    analyzers: BTreeMap<String, AnalyzerFactory>,
    policies: BTreeMap<String, PolicyFactory>,
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self {
            analyzers: BTreeMap::new(),
            policies: BTreeMap::new(),
        }
    }

    /// The built-in deterministic analyzers (`mean`, `max`, `min`, `latest`)
    /// and policies (`threshold_scale`, `latency_migration`,
    /// `maintenance_evacuation`).
    pub fn builtin() -> Self {
        let mut registry = Self::empty();
        registry.register_analyzer("mean", policies::mean_analyzer);
        registry.register_analyzer("max", policies::max_analyzer);
        registry.register_analyzer("min", policies::min_analyzer);
        registry.register_analyzer("latest", policies::latest_analyzer);
        registry.register_policy("threshold_scale", policies::threshold_scale_factory);
        registry.register_policy("latency_migration", policies::latency_migration_factory);
        registry.register_policy(
            "maintenance_evacuation",
            policies::maintenance_evacuation_factory,
        );
        registry
    }

    pub fn register_analyzer(&mut self, id: &str, factory: AnalyzerFactory) {
        self.analyzers.insert(id.to_string(), factory);
    }

    pub fn register_policy(&mut self, id: &str, factory: PolicyFactory) {
        self.policies.insert(id.to_string(), factory);
    }
}

/// Entities that exist when loops are composed; used for scope and monitor
/// validation.
#[derive(Debug, Clone, Default)]
pub struct ScopeContext {
    pub apps: BTreeMap<AppId, ContinuumId>,
    pub segments: BTreeSet<SegmentId>,
    pub continuums: BTreeSet<ContinuumId>,
    pub continuum_segments: BTreeMap<ContinuumId, BTreeSet<SegmentId>>,
}

/// A validated, executable loop.
pub struct ComposedLoop {
    pub spec: ClosedLoopSpec,
    /// Nesting depth, 1 for a root loop.
    pub depth: usize,
    pub state: LoopState,
    analyzer: Box<dyn AnalyzerImpl>,
    policy: Box<dyn PolicyImpl>,
}

impl std::fmt::Debug for ComposedLoop {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComposedLoop")
            .field("spec", &self.spec)
            .field("depth", &self.depth)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl ComposedLoop {
    pub fn id(&self) -> &LoopId {
        &self.spec.id
    }

    pub fn due(&self, tick: u64, events: &BTreeSet<EventKind>) -> bool {
        match &self.spec.trigger {
            Trigger::Periodic { every } => tick % every == 0,
            Trigger::OnEvent { kind } => events.contains(kind),
        }
    }
}

/// The set of composed loops, preserving the nesting forest.
#[derive(Default)]
pub struct LoopSet {
    loops: BTreeMap<LoopId, ComposedLoop>,
}

impl LoopSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &LoopId) -> Option<&ComposedLoop> {
        self.loops.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &LoopId> {
        self.loops.keys()
    }

    pub fn len(&self) -> usize {
        self.loops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    /// Validates a spec against the registry and the scope context and
    /// registers the loop. Parents must already be composed.
    pub fn compose(
        &mut self,
        spec: ClosedLoopSpec,
        registry: &PolicyRegistry,
        scope: &ScopeContext,
    ) -> Result<&ComposedLoop, LoopError> {
        if self.loops.contains_key(&spec.id) {
            return Err(LoopError::DuplicateLoop(spec.id));
        }
        if spec.targets.is_empty() {
            return Err(LoopError::EmptyTargets);
        }
        if let Trigger::Periodic { every } = &spec.trigger {
            if *every == 0 {
                return Err(LoopError::BadTrigger);
            }
        }

        let depth = match &spec.parent {
            None => 1,
            Some(parent) => {
                if parent == &spec.id {
                    return Err(LoopError::CyclicNesting(spec.id.clone()));
                }
                let mut walk = Some(parent.clone());
                let mut depth = 1;
                while let Some(at) = walk {
                    if at == spec.id {
                        return Err(LoopError::CyclicNesting(spec.id.clone()));
                    }
                    let node = self
                        .loops
                        .get(&at)
                        .ok_or_else(|| LoopError::UnknownParent(at.clone()))?;
                    depth += 1;
                    walk = node.spec.parent.clone();
                }
                depth
            }
        };

        // Scope and target locality.
        match &spec.scope {
            LoopScope::CrossSegment => {
                for target in &spec.targets {
                    let known = match target {
                        ManagedEntity::App(a) => scope.apps.contains_key(a),
                        ManagedEntity::Segment(s) => scope.segments.contains(s),
                        ManagedEntity::Continuum(c) => scope.continuums.contains(c),
                    };
                    if !known {
                        return Err(LoopError::UnknownScope(format!("{target:?}")));
                    }
                }
            }
            LoopScope::Continuum(continuum) => {
                if !scope.continuums.contains(continuum) {
                    return Err(LoopError::UnknownScope(continuum.to_string()));
                }
                for target in &spec.targets {
                    let local = match target {
                        ManagedEntity::App(a) => scope.apps.get(a) == Some(continuum),
                        ManagedEntity::Continuum(c) => c == continuum,
                        ManagedEntity::Segment(s) => scope
                            .continuum_segments
                            .get(continuum)
                            .map_or(false, |segs| segs.contains(s)),
                    };
                    if !local {
                        return Err(LoopError::ScopeViolation(format!(
                            "{target:?} is outside continuum {continuum}"
                        )));
                    }
                }
            }
        }

        for monitor in &spec.monitors {
            let known = match monitor {
                MetricSelector::SegmentCpu(s) => scope.segments.contains(s),
                MetricSelector::AppCpu(a)
                | MetricSelector::AppLatency(a)
                | MetricSelector::AppThroughput(a)
                | MetricSelector::AppReadyInstances(a) => scope.apps.contains_key(a),
            };
            if !known {
                return Err(LoopError::UnknownMonitor(format!("{monitor:?}")));
            }
        }

        let analyzer = registry
            .analyzers
            .get(&spec.analyzer)
            .ok_or_else(|| LoopError::UnknownAnalyzer(spec.analyzer.clone()))?();
        let policy = registry
            .policies
            .get(&spec.policy.id)
            .ok_or_else(|| LoopError::UnknownPolicy(spec.policy.id.clone()))?(
            &spec.policy.params,
        )?;

        let id = spec.id.clone();
        self.loops.insert(
            id.clone(),
            ComposedLoop {
                spec,
                depth,
                state: LoopState::default(),
                analyzer,
                policy,
            },
        );
        Ok(self.loops.get(&id).expect("just inserted"))
    }

    /// Loop ids due at this tick, in canonical (id) order.
    pub fn due(&self, tick: u64, events: &BTreeSet<EventKind>) -> Vec<LoopId> {
        self.loops
            .values()
            .filter(|l| l.due(tick, events))
            .map(|l| l.spec.id.clone())
            .collect()
    }

    /// Whether `ancestor` lies on `descendant`'s parent chain (proper
    /// ancestry; a loop is not its own ancestor).
    pub fn is_ancestor(&self, ancestor: &LoopId, descendant: &LoopId) -> bool {
        if ancestor == descendant {
            return false;
        }
        let mut walk = self
            .loops
            .get(descendant)
            .and_then(|l| l.spec.parent.clone());
        while let Some(at) = walk {
            if &at == ancestor {
                return true;
            }
            walk = self.loops.get(&at).and_then(|l| l.spec.parent.clone());
        }
        false
    }

    pub fn nesting_depth(&self, id: &LoopId) -> Option<usize> {
        self.loops.get(id).map(|l| l.depth)
    }

    /// Evaluates one loop against a snapshot. Pure apart from the loop's own
    /// recorded state: identical (spec, state, snapshot, tick) yield an
    /// identical outcome.
    pub fn evaluate(
        &self,
        id: &LoopId,
        snapshot: &TwinSnapshot,
        tick: u64,
        env: &LoopEnv<'_>,
    ) -> Result<PolicyOutcome, LoopError> {
        let composed = self
            .loops
            .get(id)
            .ok_or_else(|| LoopError::UnknownScope(id.to_string()))?;
        evaluate_loop(composed, snapshot, tick, env)
    }

    /// Records an emitted action for hysteresis tracking.
    pub fn note_emission(&mut self, id: &LoopId, tick: u64, action: &Action) {
        if let Some(composed) = self.loops.get_mut(id) {
            if let Some(direction) = action.scale_direction() {
                composed.state.last_scale = Some((tick, direction));
            }
        }
    }
}

/// Selects the loop's monitored metrics from the snapshot, runs the analyzer
/// and the policy. No side effects; proposals flow to the coordinator only.
pub fn evaluate_loop(
    composed: &ComposedLoop,
    snapshot: &TwinSnapshot,
    tick: u64,
    env: &LoopEnv<'_>,
) -> Result<PolicyOutcome, LoopError> {
    let mut values = Vec::with_capacity(composed.spec.monitors.len());
    for selector in &composed.spec.monitors {
        let value = select_metric(snapshot, selector)
            .ok_or_else(|| LoopError::MissingMetric(format!("{selector:?}")))?;
        values.push((selector.clone(), value));
    }
    let analysis = composed.analyzer.analyze(&values);
    let ctx = PolicyContext {
        spec: &composed.spec,
        tick,
        analysis: &analysis,
        snapshot,
        env,
        state: &composed.state,
    };
    composed.policy.decide(&ctx)
}

fn select_metric(snapshot: &TwinSnapshot, selector: &MetricSelector) -> Option<f64> {
    match selector {
        MetricSelector::SegmentCpu(segment) => {
            snapshot.segments.get(segment).map(|e| e.utilization)
        }
        MetricSelector::AppCpu(app) => snapshot.apps.get(app).map(|e| e.kpis.cpu_utilization),
        MetricSelector::AppLatency(app) => snapshot
            .apps
            .get(app)
            .map(|e| e.kpis.latency_ms.unwrap_or(f64::INFINITY)),
        MetricSelector::AppThroughput(app) => {
            snapshot.apps.get(app).map(|e| e.kpis.throughput_mbps)
        }
        MetricSelector::AppReadyInstances(app) => {
            snapshot.apps.get(app).map(|e| e.kpis.ready_instances as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scope() -> ScopeContext {
        ScopeContext {
            apps: BTreeMap::from([(AppId::new("a1"), ContinuumId::new("c1"))]),
            segments: BTreeSet::from([SegmentId::new("s1"), SegmentId::new("s2")]),
            continuums: BTreeSet::from([ContinuumId::new("c1")]),
            continuum_segments: BTreeMap::from([(
                ContinuumId::new("c1"),
                BTreeSet::from([SegmentId::new("s1")]),
            )]),
        }
    }

    fn spec(id: &str, parent: Option<&str>) -> ClosedLoopSpec {
        ClosedLoopSpec {
            id: id.into(),
            scope: LoopScope::Continuum("c1".into()),
            monitors: vec![MetricSelector::AppCpu("a1".into())],
            analyzer: "mean".into(),
            policy: PolicyBinding {
                id: "threshold_scale".into(),
                params: serde_json::json!({"hi": 0.8, "lo": 0.2, "step": 1}),
            },
            targets: BTreeSet::from([ManagedEntity::App("a1".into())]),
            trigger: Trigger::Periodic { every: 1 },
            parent: parent.map(Into::into),
            priority: 5,
        }
    }

    #[test]
    fn valid_threshold_loop_composes() {
        let mut set = LoopSet::new();
        let registry = PolicyRegistry::builtin();
        let composed = set.compose(spec("l1", None), &registry, &scope()).unwrap();
        assert_eq!(composed.depth, 1);
    }

    #[test]
    fn self_parent_is_cyclic() {
        let mut set = LoopSet::new();
        let registry = PolicyRegistry::builtin();
        let err = set
            .compose(spec("l1", Some("l1")), &registry, &scope())
            .unwrap_err();
        assert!(matches!(err, LoopError::CyclicNesting(_)));
    }

    #[test]
    fn chain_of_three_reports_depth_three() {
        let mut set = LoopSet::new();
        let registry = PolicyRegistry::builtin();
        set.compose(spec("l1", None), &registry, &scope()).unwrap();
        set.compose(spec("l2", Some("l1")), &registry, &scope()).unwrap();
        let leaf = set.compose(spec("l3", Some("l2")), &registry, &scope()).unwrap();
        assert_eq!(leaf.depth, 3);
        assert!(set.is_ancestor(&"l1".into(), &"l3".into()));
        assert!(!set.is_ancestor(&"l3".into(), &"l1".into()));
        assert!(!set.is_ancestor(&"l1".into(), &"l1".into()));
    }

    #[test]
    fn unknown_analyzer_and_policy_are_rejected() {
        let mut set = LoopSet::new();
        let registry = PolicyRegistry::builtin();
        let mut bad = spec("l1", None);
        bad.analyzer = "nope".into();
        assert!(matches!(
            set.compose(bad, &registry, &scope()),
            Err(LoopError::UnknownAnalyzer(_))
        ));
        let mut bad = spec("l1", None);
        bad.policy.id = "nope".into();
        assert!(matches!(
            set.compose(bad, &registry, &scope()),
            Err(LoopError::UnknownPolicy(_))
        ));
    }

    #[test]
    fn per_continuum_loop_cannot_target_foreign_entities() {
        let mut set = LoopSet::new();
        let registry = PolicyRegistry::builtin();
        let mut foreign = spec("l1", None);
        foreign.targets = BTreeSet::from([ManagedEntity::Segment("s2".into())]);
        // s2 holds no quota of c1
        assert!(matches!(
            set.compose(foreign, &registry, &scope()),
            Err(LoopError::ScopeViolation(_))
        ));
    }

    #[test]
    fn locality_holds_over_random_specs() {
        use rand::prelude::*;
        let registry = PolicyRegistry::builtin();
        let scope = scope();
        let mut rng = rand::rngs::StdRng::seed_from_u64(21);
        for i in 0..200 {
            let mut s = spec(&format!("l{i}"), None);
            let target = match rng.gen_range(0..4) {
                0 => ManagedEntity::App("a1".into()),
                1 => ManagedEntity::App("ghost".into()),
                2 => ManagedEntity::Segment("s1".into()),
                _ => ManagedEntity::Segment("s2".into()),
            };
            s.targets = BTreeSet::from([target.clone()]);
            let mut set = LoopSet::new();
            match set.compose(s, &registry, &scope) {
                Ok(composed) => {
                    // every accepted target resolves inside continuum c1
                    for t in &composed.spec.targets {
                        match t {
                            ManagedEntity::App(a) => {
                                assert_eq!(scope.apps.get(a), Some(&ContinuumId::new("c1")))
                            }
                            ManagedEntity::Segment(seg) => {
                                assert!(scope.continuum_segments[&ContinuumId::new("c1")]
                                    .contains(seg))
                            }
                            ManagedEntity::Continuum(c) => assert_eq!(c.as_str(), "c1"),
                        }
                    }
                }
                Err(LoopError::ScopeViolation(_)) | Err(LoopError::UnknownScope(_)) => {}
                Err(other) => panic!("{other:?}"),
            }
        }
    }
}
