//! Deterministic discrete-event simulation driver.
//!
//! Each tick runs a fixed pipeline: instance state progression, scheduled
//! events, telemetry synthesis from ground truth (optionally with seeded
//! noise), twin ingest and snapshot, evaluation of due loops, coordination,
//! actuation of accepted proposals, and a ground-truth KPI record. Identical
//! (scenario, seed) inputs produce byte-identical traces.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::broker::{Broker, BrokerError};
use crate::coordinator::{
    detect_conflicts, negotiate_quality_targets, resolve, CoordinationError, NegotiationOutcome,
    PrecedencePolicy, ResourceOutlook,
};
use crate::domain::{ResourceVector, Topology};
use crate::edgeapp::{
    authorize, Decision, EasRecord, EasRegistration, EcsConfig, EesRecord, EesRegistration,
    EntityClass, ExposureError, ExposureRegistry, OperationKind,
};
use crate::ids::{AppId, ComponentId, ContinuumId, ProposalId, SegmentId, StakeholderId, ZoneId};
use crate::lifecycle::{
    ContinuumState, DeploymentRecord, LifecycleError, LifecycleManager, LifecycleNote,
    MigrationMode, VirtualContinuum,
};
use crate::loops::{
    Action, ActuationProposal, EventKind, LoopEnv, LoopError, LoopSet, ManagedEntity,
    PolicyRegistry,
};
use crate::placement::{
    place, ApplicationDescriptor, AvailabilityClass, CapacityView, ComponentRole,
    ServiceRequirements,
};
use crate::scenario::{ApplicationBinding, EventAction, ScenarioConfig, ScenarioError};
use crate::trace::{
    summarize, ActuationOutcome, ActuationRecord, KpiRecord, LifecycleEvent, MetricsSummary,
    NegotiationRecord, NegotiationTraceOutcome, SegmentKpi, TraceEntry, TraceError, TraceRecord,
};
use crate::twin::{
    AppDeploymentView, ComponentView, DeploymentView, MetricKey, MetricUnit, NetworkTwin,
    Provenance, TelemetryRecord, TelemetrySource, TwinError, TwinSnapshot,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("loop composition: {0}")]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("engine state: {0}")]
    State(String),
}

pub struct SimOutput {
    pub trace: Vec<TraceRecord>,
    pub metrics: MetricsSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Availability {
    Available,
    Maintenance { until_tick: u64 },
    Failed,
}

/// Mutable per-application state the harness owns: the effective (possibly
/// negotiated) requirements with the current user zone, and the offered-load
/// factor.
struct AppRuntime {
    binding: ApplicationBinding,
    requirements: ServiceRequirements,
    load_factor: f64,
    deployed: bool,
}

impl AppRuntime {
    /// The descriptor with the effective requirements swapped in.
    fn effective_descriptor(&self) -> ApplicationDescriptor {
        let mut descriptor = self.binding.descriptor.clone();
        descriptor.requirements = self.requirements.clone();
        descriptor
    }

    fn migration_mode(&self) -> MigrationMode {
        match self.requirements.availability_class {
            AvailabilityClass::High => MigrationMode::MakeBeforeBreak,
            AvailabilityClass::BestEffort => MigrationMode::BreakBeforeMake,
        }
    }
}

struct SegmentObservation {
    utilization: f64,
    in_maintenance: bool,
    available: bool,
}

struct AppObservation {
    continuum: ContinuumId,
    user_zone: ZoneId,
    scale: u32,
    cpu_utilization: f64,
    latency_ms: Option<f64>,
    throughput_mbps: f64,
    components: BTreeMap<ComponentId, ComponentView>,
    ready_instances: u64,
}

struct Observation {
    segments: BTreeMap<SegmentId, SegmentObservation>,
    apps: BTreeMap<AppId, AppObservation>,
}

/// The orchestration engine wired for simulation and for serving the
/// northbound API.
pub struct SimEngine {
    config: ScenarioConfig,
    topology: Arc<Topology>,
    broker: Broker,
    lifecycle: LifecycleManager,
    twin: NetworkTwin,
    loops: LoopSet,
    exposure: ExposureRegistry,
    apps: BTreeMap<AppId, AppRuntime>,
    availability: BTreeMap<SegmentId, Availability>,
    rng: ChaCha20Rng,
    trace: Vec<TraceRecord>,
    seq: u64,
    next_proposal: u64,
    tick: u64,
    initialized: bool,
}

impl SimEngine {
    /// Builds an engine from a validated scenario. Loops are composed here;
    /// continuums and applications come up in `initialize`.
    pub fn new(config: ScenarioConfig) -> Result<Self, SimError> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(ScenarioError::Validation(problems).into());
        }
        let topology = Arc::new(config.topology.clone());
        let broker = Broker::from_topology(&topology)?;
        let lifecycle = LifecycleManager::new(config.options.startup_delay_ticks);
        let twin = NetworkTwin::new(Arc::clone(&topology));

        let scope = config.scope_context();
        let registry = PolicyRegistry::builtin();
        let mut loops = LoopSet::new();
        for spec in &config.loops {
            loops.compose(spec.clone(), &registry, &scope)?;
        }

        let apps = config
            .applications
            .iter()
            .map(|binding| {
                (
                    binding.descriptor.id.clone(),
                    AppRuntime {
                        requirements: binding.descriptor.requirements.clone(),
                        binding: binding.clone(),
                        load_factor: 1.0,
                        deployed: false,
                    },
                )
            })
            .collect();
        let availability = topology
            .segments
            .iter()
            .map(|s| (s.id.clone(), Availability::Available))
            .collect();
        let rng = ChaCha20Rng::seed_from_u64(config.seed);

        Ok(Self {
            topology,
            broker,
            lifecycle,
            twin,
            loops,
            exposure: ExposureRegistry::new(),
            apps,
            availability,
            rng,
            trace: Vec::new(),
            seq: 0,
            next_proposal: 0,
            tick: 0,
            initialized: false,
            config,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn lifecycle(&self) -> &LifecycleManager {
        &self.lifecycle
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn is_known_stakeholder(&self, actor: &StakeholderId) -> bool {
        self.topology.stakeholder(actor).is_some()
    }

    fn record(&mut self, tick: u64, entry: TraceEntry) {
        self.trace.push(TraceRecord {
            seq: self.seq,
            tick,
            entry,
        });
        self.seq += 1;
    }

    fn available_segments(&self) -> BTreeSet<SegmentId> {
        self.availability
            .iter()
            .filter(|(_, a)| matches!(a, Availability::Available))
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Brings up continuums and deploys applications, negotiating quality
    /// targets for initial placements that turn out infeasible.
    pub fn initialize(&mut self) -> Result<(), SimError> {
        if self.initialized {
            return Ok(());
        }
        self.initialized = true;
        self.record(
            0,
            TraceEntry::Meta {
                seed: self.config.seed,
                horizon: self.config.horizon,
                tick_duration_s: self.config.options.tick_duration_s,
                noise_enabled: self.config.options.noise.enabled,
            },
        );

        for request in self.config.continuums.clone() {
            let id = request.id.clone();
            self.lifecycle
                .create_continuum(&mut self.broker, &self.topology, &self.config.scenario, request)?;
            self.record(0, TraceEntry::Lifecycle(LifecycleEvent::ContinuumCreated {
                continuum: id.clone(),
            }));
            for to in [ContinuumState::Instantiated, ContinuumState::Active] {
                let from = self.lifecycle.continuum_state(&id).expect("just created");
                self.lifecycle.transition(&mut self.broker, &id, to)?;
                self.record(
                    0,
                    TraceEntry::Lifecycle(LifecycleEvent::ContinuumTransition {
                        continuum: id.clone(),
                        from,
                        to,
                    }),
                );
            }
        }

        let app_ids: Vec<AppId> = self.apps.keys().cloned().collect();
        for app_id in app_ids {
            self.deploy_with_negotiation(&app_id, 0)?;
        }
        self.verify_capacity_safety(0);
        Ok(())
    }

    fn deploy_with_negotiation(&mut self, app_id: &AppId, tick: u64) -> Result<(), SimError> {
        let runtime = self.apps.get(app_id).expect("registered");
        let continuum = runtime.binding.continuum.clone();
        let descriptor = runtime.effective_descriptor();
        let weights = runtime.binding.weights.clone();
        let available = self.available_segments();

        match self.lifecycle.deploy_application(
            &self.topology,
            &continuum,
            &descriptor,
            &weights,
            &available,
            tick,
        ) {
            Ok(record) => {
                self.apps.get_mut(app_id).expect("registered").deployed = true;
                self.record(
                    tick,
                    TraceEntry::Lifecycle(LifecycleEvent::ApplicationDeployed {
                        continuum,
                        app: app_id.clone(),
                        assignment: record.plan.assignment.clone(),
                        scalar_cost: record.plan.cost.scalar,
                    }),
                );
                Ok(())
            }
            Err(LifecycleError::Infeasible { reason, .. }) => {
                self.negotiate_and_redeploy(app_id, &continuum, tick, &reason)
            }
            Err(other) => Err(other.into()),
        }
    }

    /// Feasibility probe view for (re-)placing one application: the continuum
    /// headroom plus the application's own current consumption, restricted to
    /// available segments.
    fn probe_view(&self, continuum: &ContinuumId, app: &AppId) -> CapacityView {
        let Some(c) = self.lifecycle.continuum(continuum) else {
            return CapacityView::new();
        };
        let mut view = c.quota_headroom();
        if let Some(record) = c.deployed_apps.get(app) {
            for (segment, used) in record.consumed() {
                *view.entry(segment).or_insert(ResourceVector::ZERO) += used;
            }
        }
        let available = self.available_segments();
        view.retain(|segment, _| available.contains(segment));
        view
    }

    fn negotiate_and_redeploy(
        &mut self,
        app_id: &AppId,
        continuum: &ContinuumId,
        tick: u64,
        reason: &str,
    ) -> Result<(), SimError> {
        let runtime = self.apps.get(app_id).expect("registered");
        let base = runtime.requirements.clone();
        let ladder = runtime.binding.ladder.clone();
        let weights = runtime.binding.weights.clone();
        let mut descriptor = runtime.binding.descriptor.clone();
        let view = self.probe_view(continuum, app_id);

        let outcome = negotiate_quality_targets(app_id, &base, ladder.as_ref(), |candidate| {
            descriptor.requirements = candidate.clone();
            place(&self.topology, &view, &descriptor, &weights).is_ok()
        });

        match outcome {
            Err(CoordinationError::NoLadderDeclared(_)) => {
                self.record(
                    tick,
                    TraceEntry::Negotiation(NegotiationRecord {
                        app: app_id.clone(),
                        outcome: NegotiationTraceOutcome::NoLadder,
                    }),
                );
                self.record(
                    tick,
                    TraceEntry::Lifecycle(LifecycleEvent::ApplicationDeployFailed {
                        continuum: continuum.clone(),
                        app: app_id.clone(),
                        reason: reason.to_string(),
                    }),
                );
                Ok(())
            }
            Ok(NegotiationOutcome::Rejected) => {
                self.record(
                    tick,
                    TraceEntry::Negotiation(NegotiationRecord {
                        app: app_id.clone(),
                        outcome: NegotiationTraceOutcome::Rejected,
                    }),
                );
                self.record(
                    tick,
                    TraceEntry::Lifecycle(LifecycleEvent::ApplicationDeployFailed {
                        continuum: continuum.clone(),
                        app: app_id.clone(),
                        reason: reason.to_string(),
                    }),
                );
                Ok(())
            }
            Ok(NegotiationOutcome::Accepted { rung, requirements }) => {
                self.record(
                    tick,
                    TraceEntry::Negotiation(NegotiationRecord {
                        app: app_id.clone(),
                        outcome: NegotiationTraceOutcome::Accepted {
                            rung,
                            requirements: requirements.clone(),
                        },
                    }),
                );
                let runtime = self.apps.get_mut(app_id).expect("registered");
                runtime.requirements = requirements;
                if runtime.deployed {
                    return Ok(());
                }
                let descriptor = runtime.effective_descriptor();
                let available = self.available_segments();
                match self.lifecycle.deploy_application(
                    &self.topology,
                    continuum,
                    &descriptor,
                    &weights,
                    &available,
                    tick,
                ) {
                    Ok(record) => {
                        self.apps.get_mut(app_id).expect("registered").deployed = true;
                        self.record(
                            tick,
                            TraceEntry::Lifecycle(LifecycleEvent::ApplicationDeployed {
                                continuum: continuum.clone(),
                                app: app_id.clone(),
                                assignment: record.plan.assignment.clone(),
                                scalar_cost: record.plan.cost.scalar,
                            }),
                        );
                        Ok(())
                    }
                    Err(LifecycleError::Infeasible { reason, .. }) => {
                        self.record(
                            tick,
                            TraceEntry::Lifecycle(LifecycleEvent::ApplicationDeployFailed {
                                continuum: continuum.clone(),
                                app: app_id.clone(),
                                reason,
                            }),
                        );
                        Ok(())
                    }
                    Err(other) => Err(other.into()),
                }
            }
        }
    }

    /// Runs the whole configured horizon and summarizes the trace.
    pub fn run(&mut self) -> Result<SimOutput, SimError> {
        self.initialize()?;
        for tick in 0..self.config.horizon {
            self.step(tick)?;
        }
        let metrics = summarize(&self.trace)?;
        Ok(SimOutput {
            trace: std::mem::take(&mut self.trace),
            metrics,
        })
    }

    fn step(&mut self, tick: u64) -> Result<(), SimError> {
        self.tick = tick;

        // (0) time progression: maintenance expiry, instance state machines
        for availability in self.availability.values_mut() {
            if let Availability::Maintenance { until_tick } = availability {
                if tick >= *until_tick {
                    *availability = Availability::Available;
                }
            }
        }
        let notes = self.lifecycle.advance_to_tick(tick);
        for note in notes {
            let entry = lifecycle_note_entry(note);
            self.record(tick, entry);
        }

        // (1) scheduled events
        let due_events: Vec<EventAction> = self
            .config
            .events
            .iter()
            .filter(|e| e.tick == tick)
            .map(|e| e.action.clone())
            .collect();
        let mut event_kinds: BTreeSet<EventKind> = BTreeSet::new();
        for action in due_events {
            event_kinds.insert(action.kind());
            self.record(tick, TraceEntry::ScheduledEvent(action.clone()));
            match action {
                EventAction::UserMobility { from, to } => {
                    for runtime in self.apps.values_mut() {
                        if runtime.requirements.user_zone == from {
                            runtime.requirements.user_zone = to.clone();
                        }
                    }
                }
                EventAction::MaintenanceShutdown {
                    segment,
                    duration_ticks,
                } => {
                    self.availability.insert(
                        segment,
                        Availability::Maintenance {
                            until_tick: tick + duration_ticks,
                        },
                    );
                }
                EventAction::LoadSurge { app, factor } => {
                    if let Some(runtime) = self.apps.get_mut(&app) {
                        runtime.load_factor = factor;
                    }
                }
                EventAction::SegmentFailure { segment } => {
                    self.availability.insert(segment.clone(), Availability::Failed);
                    let notes = self.lifecycle.fail_segment(&segment, tick);
                    for note in notes {
                        let entry = lifecycle_note_entry(note);
                        self.record(tick, entry);
                    }
                }
            }
        }

        // (2) telemetry from ground truth, optionally noisy
        let observation = self.observe();
        let telemetry = self.synthesize_telemetry(tick, &observation);
        self.record(
            tick,
            TraceEntry::Telemetry {
                records: telemetry.clone(),
            },
        );

        // (3) twin ingest + snapshot
        self.twin.sync_deployments(deployment_view(&observation));
        self.twin.ingest(&telemetry)?;
        let snapshot = self.twin.snapshot(tick);

        // (4) evaluate due loops
        let headroom = self.loop_headroom();
        let requirements: BTreeMap<AppId, ServiceRequirements> = self
            .apps
            .iter()
            .map(|(id, r)| (id.clone(), r.requirements.clone()))
            .collect();
        let env = LoopEnv {
            topology: &self.topology,
            headroom: &headroom,
            requirements: &requirements,
        };
        let mut proposals: Vec<ActuationProposal> = Vec::new();
        let mut emitted: Vec<(crate::ids::LoopId, Action)> = Vec::new();
        let mut errors: Vec<(String, String)> = Vec::new();
        for loop_id in self.loops.due(tick, &event_kinds) {
            match self.loops.evaluate(&loop_id, &snapshot, tick, &env) {
                Ok(outcome) => {
                    if let Some(mut proposal) = outcome.proposal {
                        proposal.id = ProposalId(self.next_proposal);
                        self.next_proposal += 1;
                        emitted.push((loop_id.clone(), proposal.action.clone()));
                        proposals.push(proposal);
                    }
                }
                Err(err) => errors.push((format!("loop {loop_id}"), err.to_string())),
            }
        }
        for (loop_id, action) in &emitted {
            self.loops.note_emission(loop_id, tick, action);
        }
        for proposal in &proposals {
            self.record(tick, TraceEntry::Proposal(proposal.clone()));
        }
        for (context, message) in errors {
            self.record(tick, TraceEntry::RuntimeError { context, message });
        }

        // (5) coordination
        if !proposals.is_empty() {
            let outlook = ResourceOutlook {
                residuals: {
                    let available = self.available_segments();
                    let mut residuals = self.broker.residuals();
                    residuals.retain(|segment, _| available.contains(segment));
                    residuals
                },
                headroom: headroom.clone(),
            };
            let report = detect_conflicts(&proposals, &snapshot, &self.loops, &outlook);
            let decision = resolve(&proposals, &report, PrecedencePolicy, &self.loops);
            self.record(tick, TraceEntry::Conflicts(report));
            self.record(tick, TraceEntry::Decision(decision.clone()));

            // (6) actuation of the accepted subset, in decision order
            for accepted in &decision.accepted {
                let proposal = proposals
                    .iter()
                    .find(|p| p.id == *accepted)
                    .expect("accepted ids come from proposals")
                    .clone();
                let outcome = self.actuate(tick, &proposal)?;
                self.record(
                    tick,
                    TraceEntry::Actuation(ActuationRecord {
                        proposal: proposal.id,
                        loop_id: proposal.loop_id.clone(),
                        target: proposal.target.clone(),
                        action: proposal.action.clone(),
                        outcome,
                    }),
                );
            }
        }

        // (7) ground-truth KPI record, post-actuation
        let observation = self.observe();
        let kpi = self.kpi_record(&observation);
        self.record(tick, TraceEntry::Kpi(kpi));
        self.verify_capacity_safety(tick);
        Ok(())
    }

    /// Enacts one accepted proposal through the lifecycle manager and broker.
    /// Failures are reported, never panicked: the capacity ledger stays
    /// consistent because every mutation is an admission-checked broker or
    /// lifecycle operation.
    fn actuate(&mut self, tick: u64, proposal: &ActuationProposal) -> Result<ActuationOutcome, SimError> {
        let outcome = match &proposal.action {
            Action::Reconfigure { key, value } => Ok(format!("recorded {key}={value}")),
            Action::ScaleUp { amount } => self.actuate_scale(tick, proposal, *amount as i64),
            Action::ScaleDown { amount } => self.actuate_scale(tick, proposal, -(*amount as i64)),
            Action::Migrate { component, to } => self.actuate_migration(tick, proposal, component, to),
            Action::NegotiateQuality { app } => {
                let Some(runtime) = self.apps.get(app) else {
                    return Ok(ActuationOutcome::Failed {
                        reason: format!("unknown application {app}"),
                    });
                };
                let continuum = runtime.binding.continuum.clone();
                self.negotiate_and_redeploy(app, &continuum, tick, "negotiation requested by loop")?;
                Ok("negotiation executed".to_string())
            }
        };
        Ok(match outcome {
            Ok(detail) => ActuationOutcome::Applied { detail },
            Err(reason) => ActuationOutcome::Failed { reason },
        })
    }

    fn target_app_runtime(&self, proposal: &ActuationProposal) -> Result<(AppId, ContinuumId), String> {
        let ManagedEntity::App(app) = &proposal.target else {
            return Err(format!("target {:?} is not an application", proposal.target));
        };
        let runtime = self
            .apps
            .get(app)
            .ok_or_else(|| format!("unknown application {app}"))?;
        if !runtime.deployed {
            return Err(format!("application {app} is not deployed"));
        }
        Ok((app.clone(), runtime.binding.continuum.clone()))
    }

    fn actuate_scale(
        &mut self,
        tick: u64,
        proposal: &ActuationProposal,
        delta: i64,
    ) -> Result<String, String> {
        let (app, continuum) = self.target_app_runtime(proposal)?;
        if delta > 0 {
            // Expand quota where headroom falls short of the extra demand.
            let record = self
                .lifecycle
                .deployment(&continuum, &app)
                .ok_or_else(|| format!("no deployment record for {app}"))?;
            let mut needed: BTreeMap<SegmentId, ResourceVector> = BTreeMap::new();
            for (component, instances) in &record.instances {
                let demand = record
                    .descriptor
                    .component(component)
                    .map(|c| c.demand)
                    .unwrap_or(ResourceVector::ZERO)
                    .scaled(delta as u64);
                for instance in instances {
                    if instance.state.is_live() {
                        *needed
                            .entry(instance.segment.clone())
                            .or_insert(ResourceVector::ZERO) += demand;
                    }
                }
            }
            let headroom = self
                .lifecycle
                .continuum(&continuum)
                .map(|c| c.quota_headroom())
                .unwrap_or_default();
            for (segment, amount) in &needed {
                if self.availability.get(segment) == Some(&Availability::Failed) {
                    return Err(format!("segment {segment} has failed"));
                }
                let free = headroom.get(segment).copied().unwrap_or(ResourceVector::ZERO);
                let shortfall = amount.saturating_sub(&free);
                if !shortfall.is_zero() {
                    self.lifecycle
                        .expand_quota(&mut self.broker, &continuum, segment, shortfall)
                        .map_err(|e| e.to_string())?;
                    self.record(
                        tick,
                        TraceEntry::Lifecycle(LifecycleEvent::QuotaExpanded {
                            continuum: continuum.clone(),
                            segment: segment.clone(),
                            amount: shortfall,
                        }),
                    );
                }
            }
        }
        let before = self
            .lifecycle
            .deployment(&continuum, &app)
            .map(|r| r.scale)
            .unwrap_or(1);
        let after = self
            .lifecycle
            .scale_application(&continuum, &app, delta)
            .map_err(|e| e.to_string())?;
        self.record(
            tick,
            TraceEntry::Lifecycle(LifecycleEvent::ScaleChanged {
                continuum,
                app,
                from: before,
                to: after,
            }),
        );
        Ok(format!("scale {before} -> {after}"))
    }

    fn actuate_migration(
        &mut self,
        tick: u64,
        proposal: &ActuationProposal,
        component: &ComponentId,
        to: &SegmentId,
    ) -> Result<String, String> {
        let (app, continuum) = self.target_app_runtime(proposal)?;
        let record = self
            .lifecycle
            .deployment(&continuum, &app)
            .ok_or_else(|| format!("no deployment record for {app}"))?;
        let from = record.live_segment(component).cloned();
        let spec_demand = record
            .descriptor
            .component(component)
            .map(|c| c.demand)
            .ok_or_else(|| format!("unknown component {component}"))?
            .scaled(record.scale as u64);
        let mode = self
            .apps
            .get(&app)
            .map(|r| r.migration_mode())
            .unwrap_or(MigrationMode::MakeBeforeBreak);

        // Expand quota at the target when headroom falls short.
        let headroom = self
            .lifecycle
            .continuum(&continuum)
            .map(|c| c.quota_headroom())
            .unwrap_or_default();
        let free = headroom.get(to).copied().unwrap_or(ResourceVector::ZERO);
        let shortfall = spec_demand.saturating_sub(&free);
        if !shortfall.is_zero() {
            self.lifecycle
                .expand_quota(&mut self.broker, &continuum, to, shortfall)
                .map_err(|e| e.to_string())?;
            self.record(
                tick,
                TraceEntry::Lifecycle(LifecycleEvent::QuotaExpanded {
                    continuum: continuum.clone(),
                    segment: to.clone(),
                    amount: shortfall,
                }),
            );
        }

        let available = self.available_segments();
        let report = self
            .lifecycle
            .migrate_component(
                &self.topology,
                &continuum,
                &app,
                component,
                to,
                mode,
                &available,
                tick,
            )
            .map_err(|e| e.to_string())?;
        self.record(
            tick,
            TraceEntry::Lifecycle(LifecycleEvent::MigrationStarted {
                continuum,
                app,
                component: component.clone(),
                from,
                to: to.clone(),
                mode,
                expected_downtime_ticks: report.downtime_ticks,
            }),
        );
        Ok(format!(
            "migration to {to} completes at tick {}",
            report.completes_at_tick
        ))
    }

    /// Quota headroom per continuum, restricted to available segments; the
    /// capacity view loops and the coordinator reason over.
    fn loop_headroom(&self) -> BTreeMap<ContinuumId, BTreeMap<SegmentId, ResourceVector>> {
        let available = self.available_segments();
        self.lifecycle
            .continuums()
            .map(|c| {
                let mut headroom = c.quota_headroom();
                headroom.retain(|segment, _| available.contains(segment));
                (c.id.clone(), headroom)
            })
            .collect()
    }

    /// Ground truth at this instant, derived from lifecycle state, load
    /// factors and current user zones.
    fn observe(&self) -> Observation {
        let mut provisioned: BTreeMap<SegmentId, ResourceVector> = BTreeMap::new();
        for continuum in self.lifecycle.continuums() {
            for record in continuum.deployed_apps.values() {
                for (segment, used) in record.consumed() {
                    *provisioned.entry(segment).or_insert(ResourceVector::ZERO) += used;
                }
            }
        }

        let mut segments = BTreeMap::new();
        for descriptor in &self.topology.segments {
            let used = provisioned
                .get(&descriptor.id)
                .copied()
                .unwrap_or(ResourceVector::ZERO);
            let utilization = if descriptor.capacity.cpu > 0 {
                (used.cpu as f64 / descriptor.capacity.cpu as f64).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let availability = self
                .availability
                .get(&descriptor.id)
                .copied()
                .unwrap_or(Availability::Available);
            segments.insert(
                descriptor.id.clone(),
                SegmentObservation {
                    utilization,
                    in_maintenance: matches!(availability, Availability::Maintenance { .. }),
                    available: !matches!(availability, Availability::Failed),
                },
            );
        }

        let mut apps = BTreeMap::new();
        for (app_id, runtime) in &self.apps {
            if !runtime.deployed {
                continue;
            }
            let Some(record) = self.lifecycle.deployment(&runtime.binding.continuum, app_id) else {
                continue;
            };
            let components: BTreeMap<ComponentId, ComponentView> = record
                .instances
                .iter()
                .map(|(component, instances)| {
                    (
                        component.clone(),
                        ComponentView {
                            demand: record
                                .descriptor
                                .component(component)
                                .map(|c| c.demand)
                                .unwrap_or(ResourceVector::ZERO),
                            role: record
                                .descriptor
                                .component(component)
                                .map(|c| c.role)
                                .unwrap_or(ComponentRole::Generic),
                            instances: instances
                                .iter()
                                .map(|i| (i.segment.clone(), i.state))
                                .collect(),
                        },
                    )
                })
                .collect();

            let zone = &runtime.requirements.user_zone;
            let mut latency: Option<f64> = Some(0.0);
            let mut eas_bandwidth = 0u64;
            for (component, view) in &components {
                let spec = record.descriptor.component(component).expect("from record");
                if spec.role != ComponentRole::Eas {
                    continue;
                }
                eas_bandwidth += spec.demand.bandwidth;
                let serving = view.ready_segment();
                let reach = serving
                    .and_then(|segment| self.topology.zone_latency(zone, segment).ok())
                    .flatten();
                match (latency, reach) {
                    (Some(worst), Some(l)) => latency = Some(worst.max(l)),
                    _ => latency = None,
                }
            }
            let scale = record.scale;
            let load = runtime.load_factor;
            let served_factor = load.min(scale as f64);
            let throughput_mbps = served_factor * eas_bandwidth as f64;
            let cpu_utilization = (load / scale as f64).clamp(0.0, 1.0);
            let ready_instances = components.values().map(|c| c.ready_count()).sum();

            apps.insert(
                app_id.clone(),
                AppObservation {
                    continuum: runtime.binding.continuum.clone(),
                    user_zone: zone.clone(),
                    scale,
                    cpu_utilization,
                    latency_ms: latency,
                    throughput_mbps,
                    components,
                    ready_instances,
                },
            );
        }

        Observation { segments, apps }
    }

    fn noisy(&mut self, value: f64) -> f64 {
        if !self.config.options.noise.enabled {
            return value;
        }
        let u: f64 = self.rng.gen();
        value * (1.0 + self.config.options.noise.amplitude * (2.0 * u - 1.0))
    }

    fn synthesize_telemetry(&mut self, tick: u64, observation: &Observation) -> Vec<TelemetryRecord> {
        let mut records = Vec::new();
        let segment_record = |segment: &SegmentId, metric, value, unit| TelemetryRecord {
            tick,
            source: TelemetrySource::Segment(segment.clone()),
            metric,
            value,
            unit,
            provenance: Provenance::Local,
        };
        let app_record = |app: &AppId, metric, value, unit| TelemetryRecord {
            tick,
            source: TelemetrySource::App(app.clone()),
            metric,
            value,
            unit,
            provenance: Provenance::Local,
        };

        let segments: Vec<(SegmentId, f64, bool, bool)> = observation
            .segments
            .iter()
            .map(|(id, o)| (id.clone(), o.utilization, o.in_maintenance, o.available))
            .collect();
        for (segment, utilization, in_maintenance, available) in segments {
            let value = self.noisy(utilization).clamp(0.0, 1.0);
            records.push(segment_record(
                &segment,
                MetricKey::CpuUtilization,
                value,
                MetricUnit::Fraction,
            ));
            records.push(segment_record(
                &segment,
                MetricKey::InMaintenance,
                f64::from(in_maintenance),
                MetricUnit::Flag,
            ));
            records.push(segment_record(
                &segment,
                MetricKey::Available,
                f64::from(available),
                MetricUnit::Flag,
            ));
        }

        let apps: Vec<(AppId, f64, Option<f64>, f64)> = observation
            .apps
            .iter()
            .map(|(id, o)| (id.clone(), o.cpu_utilization, o.latency_ms, o.throughput_mbps))
            .collect();
        for (app, cpu, latency, throughput) in apps {
            let value = self.noisy(cpu).clamp(0.0, 1.0);
            records.push(app_record(
                &app,
                MetricKey::CpuUtilization,
                value,
                MetricUnit::Fraction,
            ));
            let value = self.noisy(throughput).max(0.0);
            records.push(app_record(
                &app,
                MetricKey::ThroughputMbps,
                value,
                MetricUnit::Mbps,
            ));
            records.push(app_record(
                &app,
                MetricKey::Reachable,
                f64::from(latency.is_some()),
                MetricUnit::Flag,
            ));
            if let Some(latency) = latency {
                let value = self.noisy(latency).max(0.0);
                records.push(app_record(
                    &app,
                    MetricKey::LatencyMs,
                    value,
                    MetricUnit::Milliseconds,
                ));
            }
        }
        records
    }

    fn kpi_record(&self, observation: &Observation) -> KpiRecord {
        let mut segments = BTreeMap::new();
        for (segment, o) in &observation.segments {
            let descriptor = self.topology.segment(segment).expect("topology segment");
            let power_w = if o.available {
                descriptor.power_draw(o.utilization).expect("clamped")
            } else {
                0.0
            };
            segments.insert(
                segment.clone(),
                SegmentKpi {
                    utilization: o.utilization,
                    power_w,
                    carbon_g_per_h: descriptor.carbon_rate_g_per_h(power_w),
                },
            );
        }
        let mut apps = BTreeMap::new();
        for (app, o) in &observation.apps {
            apps.insert(
                app.clone(),
                crate::trace::AppKpi {
                    latency_ms: o.latency_ms,
                    throughput_mbps: o.throughput_mbps,
                    cpu_utilization: o.cpu_utilization,
                    ready_instances: o.ready_instances,
                    scale: o.scale,
                    components_ready: o
                        .components
                        .iter()
                        .map(|(c, v)| (c.clone(), v.ready_count()))
                        .collect(),
                    deployed_components: o.components.len() as u64,
                },
            );
        }
        KpiRecord { segments, apps }
    }

    /// Internal consistency guard run after every tick: the broker ledger
    /// balances and no continuum consumes beyond its quota.
    fn verify_capacity_safety(&mut self, tick: u64) {
        let mut violations: Vec<(String, String)> = Vec::new();
        for (segment, entry) in self.broker.utilization_report() {
            if entry.held + entry.residual != entry.capacity {
                violations.push((
                    format!("ledger {segment}"),
                    "held + residual != capacity".into(),
                ));
            }
        }
        for continuum in self.lifecycle.continuums() {
            let mut consumed: BTreeMap<SegmentId, ResourceVector> = BTreeMap::new();
            for record in continuum.deployed_apps.values() {
                for (segment, used) in record.consumed() {
                    *consumed.entry(segment).or_insert(ResourceVector::ZERO) += used;
                }
            }
            let over: Vec<String> = consumed
                .iter()
                .filter(|(segment, used)| {
                    let quota = continuum
                        .quota_by_segment
                        .get(*segment)
                        .copied()
                        .unwrap_or(ResourceVector::ZERO);
                    !used.fits_within(&quota)
                })
                .map(|(segment, _)| segment.to_string())
                .collect();
            if !over.is_empty() {
                violations.push((
                    format!("quota {}", continuum.id),
                    format!("consumption exceeds quota on {}", over.join(", ")),
                ));
            }
        }
        for (context, message) in violations {
            self.record(tick, TraceEntry::RuntimeError { context, message });
        }
    }

    // Northbound operations used by the API server. Each one authorizes the
    // acting stakeholder against the business scenario before mutating.

    pub fn create_continuum_as(
        &mut self,
        actor: &StakeholderId,
        request: crate::lifecycle::ContinuumRequest,
    ) -> Result<VirtualContinuum, LifecycleError> {
        if let Decision::Deny { reason } = authorize(
            &self.topology,
            &self.config.scenario,
            actor,
            OperationKind::Offer,
            EntityClass::Continuum,
        ) {
            return Err(LifecycleError::UnauthorizedScenario(reason));
        }
        let id = request.id.clone();
        self.lifecycle
            .create_continuum(&mut self.broker, &self.topology, &self.config.scenario, request)?;
        for to in [ContinuumState::Instantiated, ContinuumState::Active] {
            self.lifecycle.transition(&mut self.broker, &id, to)?;
        }
        Ok(self.lifecycle.continuum(&id).expect("just created").clone())
    }

    pub fn deploy_application_as(
        &mut self,
        actor: &StakeholderId,
        continuum: &ContinuumId,
        descriptor: ApplicationDescriptor,
        weights: crate::placement::ObjectiveWeights,
    ) -> Result<DeploymentRecord, LifecycleError> {
        if let Decision::Deny { reason } = authorize(
            &self.topology,
            &self.config.scenario,
            actor,
            OperationKind::Manage,
            EntityClass::ApplicationServer,
        ) {
            return Err(LifecycleError::UnauthorizedScenario(reason));
        }
        let available = self.available_segments();
        let record = self.lifecycle.deploy_application(
            &self.topology,
            continuum,
            &descriptor,
            &weights,
            &available,
            self.tick,
        )?;
        self.apps.insert(
            descriptor.id.clone(),
            AppRuntime {
                requirements: descriptor.requirements.clone(),
                binding: ApplicationBinding {
                    continuum: continuum.clone(),
                    descriptor,
                    weights,
                    ladder: None,
                },
                load_factor: 1.0,
                deployed: true,
            },
        );
        Ok(record)
    }

    pub fn register_ees_as(
        &mut self,
        actor: &StakeholderId,
        registration: EesRegistration,
    ) -> Result<EesRecord, ExposureError> {
        let state = self.lifecycle.continuum_state(&registration.continuum);
        self.exposure.register_ees(
            &self.topology,
            &self.config.scenario,
            actor,
            state,
            registration,
        )
    }

    pub fn register_eas_as(
        &mut self,
        actor: &StakeholderId,
        registration: EasRegistration,
    ) -> Result<EasRecord, ExposureError> {
        self.exposure
            .register_eas(&self.topology, &self.config.scenario, actor, registration)
    }

    pub fn provision_client(&self, zone: &ZoneId) -> Result<EcsConfig, ExposureError> {
        self.exposure.provision_client(&self.topology, zone)
    }

    pub fn discover_eas(
        &self,
        ees: &crate::ids::EesId,
        filter: &crate::edgeapp::DiscoveryFilter,
    ) -> Result<Vec<EasRecord>, ExposureError> {
        self.exposure.discover_eas(&self.topology, ees, filter)
    }

    /// A fresh snapshot from current ground truth (used by the API server).
    pub fn twin_snapshot_now(&mut self) -> Result<TwinSnapshot, SimError> {
        let observation = self.observe();
        let telemetry = self.synthesize_telemetry(self.tick, &observation);
        self.twin.sync_deployments(deployment_view(&observation));
        self.twin.ingest(&telemetry)?;
        Ok(self.twin.snapshot(self.tick))
    }

    pub fn broker_utilization(&self) -> BTreeMap<SegmentId, crate::broker::UtilizationEntry> {
        self.broker.utilization_report()
    }
}

fn deployment_view(observation: &Observation) -> DeploymentView {
    DeploymentView {
        apps: observation
            .apps
            .iter()
            .map(|(app, o)| {
                (
                    app.clone(),
                    AppDeploymentView {
                        continuum: o.continuum.clone(),
                        user_zone: o.user_zone.clone(),
                        scale: o.scale,
                        components: o.components.clone(),
                    },
                )
            })
            .collect(),
    }
}

fn lifecycle_note_entry(note: LifecycleNote) -> TraceEntry {
    TraceEntry::Lifecycle(match note {
        LifecycleNote::MigrationCompleted {
            continuum,
            app,
            component,
            segment,
        } => LifecycleEvent::MigrationCompleted {
            continuum,
            app,
            component,
            segment,
        },
        LifecycleNote::InstanceStopped {
            continuum,
            app,
            component,
            segment,
        } => LifecycleEvent::InstanceStopped {
            continuum,
            app,
            component,
            segment,
        },
        LifecycleNote::InstanceLost {
            continuum,
            app,
            component,
            segment,
        } => LifecycleEvent::InstanceLost {
            continuum,
            app,
            component,
            segment,
        },
    })
}
