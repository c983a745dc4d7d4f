//! Continuum and application lifecycle: explicit state machines, quota-bound
//! deployment, and migration workflows with make-before-break continuity.
//!
//! Deployments bind against continuum quotas (the reservations held at the
//! broker), never against raw segment capacity; that is what makes sharing
//! fine-grained rather than slice-level.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Broker, BrokerError, ReservationState};
use crate::domain::{ResourceVector, Topology};
use crate::edgeapp::{authorize, BusinessScenario, Decision, EntityClass, OperationKind};
use crate::ids::{AppId, ComponentId, ContinuumId, LoopId, ReservationId, SegmentId, StakeholderId};
use crate::placement::{
    place, ApplicationDescriptor, CapacityView, ConstraintViolation, ObjectiveWeights,
    PlacementError, PlacementPlan,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuumState {
    Prepared,
    Instantiated,
    Active,
    Maintenance,
    Modifying,
    Terminated,
}

impl ContinuumState {
    /// The declared transition relation. Terminated is absorbing and is not
    /// reachable from Modifying.
    pub fn may_transition(self, to: ContinuumState) -> bool {
        use ContinuumState::*;
        matches!(
            (self, to),
            (Prepared, Instantiated)
                | (Instantiated, Active)
                | (Active, Maintenance)
                | (Maintenance, Active)
                | (Active, Modifying)
                | (Modifying, Active)
                | (Prepared, Terminated)
                | (Instantiated, Terminated)
                | (Active, Terminated)
                | (Maintenance, Terminated)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    User,
    Control,
    Cloud,
    Management,
    Intelligence,
}

impl Plane {
    pub const ALL: [Plane; 5] = [
        Plane::User,
        Plane::Control,
        Plane::Cloud,
        Plane::Management,
        Plane::Intelligence,
    ];

    pub fn full_set() -> BTreeSet<Plane> {
        Self::ALL.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Starting,
    Ready,
    Draining,
    Stopped,
}

impl InstanceState {
    /// Whether the instance currently consumes quota.
    pub fn is_live(self) -> bool {
        !matches!(self, InstanceState::Stopped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub segment: SegmentId,
    pub state: InstanceState,
    pub since_tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrationMode {
    MakeBeforeBreak,
    BreakBeforeMake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationWindow {
    pub mode: MigrationMode,
    /// Index of the instance being replaced, if it was still live.
    pub old: Option<usize>,
    pub new: usize,
    pub started_tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub downtime_ticks: u64,
    pub completes_at_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub app: AppId,
    pub descriptor: ApplicationDescriptor,
    pub weights: ObjectiveWeights,
    pub plan: PlacementPlan,
    /// Vertical scale multiplier applied to every component demand.
    pub scale: u32,
    pub instances: BTreeMap<ComponentId, Vec<InstanceRecord>>,
    pub windows: BTreeMap<ComponentId, MigrationWindow>,
}

impl DeploymentRecord {
    pub fn ready_count(&self, component: &ComponentId) -> usize {
        self.instances
            .get(component)
            .map(|list| list.iter().filter(|i| i.state == InstanceState::Ready).count())
            .unwrap_or(0)
    }

    /// The segment of the newest live instance of a component, preferring a
    /// Ready one.
    pub fn live_segment(&self, component: &ComponentId) -> Option<&SegmentId> {
        let list = self.instances.get(component)?;
        list.iter()
            .rev()
            .find(|i| i.state == InstanceState::Ready)
            .or_else(|| list.iter().rev().find(|i| i.state.is_live()))
            .map(|i| &i.segment)
    }

    /// Quota consumed by this deployment, per segment: every live instance
    /// carries its component demand times the app scale.
    pub fn consumed(&self) -> BTreeMap<SegmentId, ResourceVector> {
        let mut consumed: BTreeMap<SegmentId, ResourceVector> = BTreeMap::new();
        for (component, instances) in &self.instances {
            let demand = self
                .descriptor
                .component(component)
                .map(|c| c.demand)
                .unwrap_or(ResourceVector::ZERO)
                .scaled(self.scale as u64);
            for instance in instances {
                if instance.state.is_live() {
                    *consumed
                        .entry(instance.segment.clone())
                        .or_insert(ResourceVector::ZERO) += demand;
                }
            }
        }
        consumed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualContinuum {
    pub id: ContinuumId,
    pub business_provider: StakeholderId,
    pub scenario: BusinessScenario,
    pub quotas: Vec<ReservationId>,
    pub quota_by_segment: BTreeMap<SegmentId, ResourceVector>,
    pub state: ContinuumState,
    pub deployed_apps: BTreeMap<AppId, DeploymentRecord>,
    pub loops: Vec<LoopId>,
    pub planes: BTreeSet<Plane>,
}

impl VirtualContinuum {
    /// Remaining quota per segment after subtracting every deployment's live
    /// consumption.
    pub fn quota_headroom(&self) -> BTreeMap<SegmentId, ResourceVector> {
        let mut headroom = self.quota_by_segment.clone();
        for record in self.deployed_apps.values() {
            for (segment, used) in record.consumed() {
                let entry = headroom.entry(segment).or_insert(ResourceVector::ZERO);
                *entry = entry.saturating_sub(&used);
            }
        }
        headroom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuotaDemand {
    pub segment: SegmentId,
    pub amount: ResourceVector,
}

fn default_planes() -> BTreeSet<Plane> {
    Plane::full_set()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuumRequest {
    pub id: ContinuumId,
    pub business_provider: StakeholderId,
    pub quotas: Vec<QuotaDemand>,
    #[serde(default = "default_planes")]
    pub planes: BTreeSet<Plane>,
}

/// Lifecycle side effects surfaced to the caller for tracing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleNote {
    MigrationCompleted {
        continuum: ContinuumId,
        app: AppId,
        component: ComponentId,
        segment: SegmentId,
    },
    InstanceStopped {
        continuum: ContinuumId,
        app: AppId,
        component: ComponentId,
        segment: SegmentId,
    },
    InstanceLost {
        continuum: ContinuumId,
        app: AppId,
        component: ComponentId,
        segment: SegmentId,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LifecycleError {
    #[error("continuum {0} already exists")]
    DuplicateContinuum(ContinuumId),
    #[error("unknown continuum {0}")]
    UnknownContinuum(ContinuumId),
    #[error("scenario authorization failed: {0}")]
    UnauthorizedScenario(String),
    #[error("infeasible: {reason}")]
    Infeasible {
        reason: String,
        blocking: Vec<ConstraintViolation>,
    },
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition {
        from: ContinuumState,
        to: ContinuumState,
    },
    #[error("continuum planes incomplete")]
    PlanesIncomplete,
    #[error("continuum {0} is not active")]
    ContinuumNotActive(ContinuumId),
    #[error("application {0} already deployed")]
    DuplicateApplication(AppId),
    #[error("unknown application {0}")]
    UnknownApplication(AppId),
    #[error("unknown component {0}")]
    UnknownComponent(ComponentId),
    #[error("component {0} already has a migration in progress")]
    MigrationInProgress(ComponentId),
    #[error("insufficient quota: {0}")]
    InsufficientQuota(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Placement(PlacementError),
}

/// Drives continuums and applications through their state machines. All
/// broker interactions happen through the `&mut Broker` handed to each
/// operation so mutations stay serialized on one ledger.
#[derive(Debug, Clone)]
pub struct LifecycleManager {
    continuums: BTreeMap<ContinuumId, VirtualContinuum>,
    startup_delay_ticks: u64,
    current_tick: u64,
}

impl LifecycleManager {
    pub fn new(startup_delay_ticks: u64) -> Self {
        Self {
            continuums: BTreeMap::new(),
            startup_delay_ticks,
            current_tick: 0,
        }
    }

    pub fn startup_delay_ticks(&self) -> u64 {
        self.startup_delay_ticks
    }

    pub fn continuum(&self, id: &ContinuumId) -> Option<&VirtualContinuum> {
        self.continuums.get(id)
    }

    pub fn continuum_state(&self, id: &ContinuumId) -> Option<ContinuumState> {
        self.continuums.get(id).map(|c| c.state)
    }

    pub fn continuums(&self) -> impl Iterator<Item = &VirtualContinuum> {
        self.continuums.values()
    }

    pub fn deployment(&self, continuum: &ContinuumId, app: &AppId) -> Option<&DeploymentRecord> {
        self.continuums.get(continuum)?.deployed_apps.get(app)
    }

    pub fn attach_loop(&mut self, continuum: &ContinuumId, id: LoopId) -> Result<(), LifecycleError> {
        let c = self
            .continuums
            .get_mut(continuum)
            .ok_or_else(|| LifecycleError::UnknownContinuum(continuum.clone()))?;
        c.loops.push(id);
        Ok(())
    }

    /// Creates a continuum in Prepared state, reserving every requested quota
    /// atomically: on any failure the already-held reservations are released
    /// and nothing leaks.
    pub fn create_continuum(
        &mut self,
        broker: &mut Broker,
        topology: &Topology,
        scenario: &BusinessScenario,
        request: ContinuumRequest,
    ) -> Result<&VirtualContinuum, LifecycleError> {
        if self.continuums.contains_key(&request.id) {
            return Err(LifecycleError::DuplicateContinuum(request.id));
        }
        if let Decision::Deny { reason } = authorize(
            topology,
            scenario,
            &request.business_provider,
            OperationKind::Offer,
            EntityClass::Continuum,
        ) {
            return Err(LifecycleError::UnauthorizedScenario(reason));
        }

        broker.register_continuum(request.id.clone(), request.business_provider.clone());
        let mut held: Vec<ReservationId> = Vec::new();
        let mut quota_by_segment: BTreeMap<SegmentId, ResourceVector> = BTreeMap::new();
        for demand in &request.quotas {
            match broker.reserve(&request.id, &demand.segment, demand.amount) {
                Ok(reservation) => {
                    held.push(reservation.id);
                    *quota_by_segment
                        .entry(demand.segment.clone())
                        .or_insert(ResourceVector::ZERO) += demand.amount;
                }
                Err(err) => {
                    for id in held {
                        broker.release(id).expect("held reservation releases");
                    }
                    broker.forget_continuum(&request.id);
                    return Err(LifecycleError::Infeasible {
                        reason: err.to_string(),
                        blocking: Vec::new(),
                    });
                }
            }
        }

        let continuum = VirtualContinuum {
            id: request.id.clone(),
            business_provider: request.business_provider,
            scenario: scenario.clone(),
            quotas: held,
            quota_by_segment,
            state: ContinuumState::Prepared,
            deployed_apps: BTreeMap::new(),
            loops: Vec::new(),
            planes: request.planes,
        };
        Ok(self.continuums.entry(request.id).or_insert(continuum))
    }

    /// Moves a continuum along the declared transition relation. Activation
    /// requires the full set of planes; termination releases every held
    /// reservation and stops every instance.
    pub fn transition(
        &mut self,
        broker: &mut Broker,
        id: &ContinuumId,
        to: ContinuumState,
    ) -> Result<(), LifecycleError> {
        let continuum = self
            .continuums
            .get_mut(id)
            .ok_or_else(|| LifecycleError::UnknownContinuum(id.clone()))?;
        if !continuum.state.may_transition(to) {
            return Err(LifecycleError::IllegalTransition {
                from: continuum.state,
                to,
            });
        }
        if to == ContinuumState::Active && continuum.planes != Plane::full_set() {
            return Err(LifecycleError::PlanesIncomplete);
        }
        if to == ContinuumState::Terminated {
            for reservation in &continuum.quotas {
                if let Some(r) = broker.reservation(*reservation) {
                    if r.state == ReservationState::Held {
                        broker.release(*reservation)?;
                    }
                }
            }
            for record in continuum.deployed_apps.values_mut() {
                for instances in record.instances.values_mut() {
                    for instance in instances.iter_mut() {
                        instance.state = InstanceState::Stopped;
                    }
                }
            }
            continuum.deployed_apps.clear();
            continuum.quota_by_segment.clear();
        }
        continuum.state = to;
        Ok(())
    }

    /// Places and deploys an application within the continuum's quota
    /// headroom, restricted to `available` segments. Every component comes up
    /// with one Ready instance.
    pub fn deploy_application(
        &mut self,
        topology: &Topology,
        continuum_id: &ContinuumId,
        app: &ApplicationDescriptor,
        weights: &ObjectiveWeights,
        available: &BTreeSet<SegmentId>,
        tick: u64,
    ) -> Result<DeploymentRecord, LifecycleError> {
        let continuum = self
            .continuums
            .get(continuum_id)
            .ok_or_else(|| LifecycleError::UnknownContinuum(continuum_id.clone()))?;
        if continuum.state != ContinuumState::Active {
            return Err(LifecycleError::ContinuumNotActive(continuum_id.clone()));
        }
        if continuum.deployed_apps.contains_key(&app.id) {
            return Err(LifecycleError::DuplicateApplication(app.id.clone()));
        }

        let mut view: CapacityView = continuum.quota_headroom();
        view.retain(|segment, _| available.contains(segment));
        let plan = place(topology, &view, app, weights).map_err(|err| match err {
            PlacementError::Infeasible { blocking } => LifecycleError::Infeasible {
                reason: format!("no feasible placement for {}", app.id),
                blocking,
            },
            other => LifecycleError::Placement(other),
        })?;

        let instances: BTreeMap<ComponentId, Vec<InstanceRecord>> = plan
            .assignment
            .iter()
            .map(|(component, segment)| {
                (
                    component.clone(),
                    vec![InstanceRecord {
                        segment: segment.clone(),
                        state: InstanceState::Ready,
                        since_tick: tick,
                    }],
                )
            })
            .collect();
        let record = DeploymentRecord {
            app: app.id.clone(),
            descriptor: app.clone(),
            weights: weights.clone(),
            plan,
            scale: 1,
            instances,
            windows: BTreeMap::new(),
        };
        let continuum = self.continuums.get_mut(continuum_id).expect("checked");
        continuum
            .deployed_apps
            .insert(app.id.clone(), record.clone());
        Ok(record)
    }

    /// Adjusts the vertical scale of a deployed application. Positive deltas
    /// must fit inside the continuum's quota headroom; negative deltas floor
    /// at one instance-equivalent.
    pub fn scale_application(
        &mut self,
        continuum_id: &ContinuumId,
        app: &AppId,
        delta: i64,
    ) -> Result<u32, LifecycleError> {
        let continuum = self
            .continuums
            .get(continuum_id)
            .ok_or_else(|| LifecycleError::UnknownContinuum(continuum_id.clone()))?;
        let record = continuum
            .deployed_apps
            .get(app)
            .ok_or_else(|| LifecycleError::UnknownApplication(app.clone()))?;

        let new_scale = if delta >= 0 {
            let headroom = continuum.quota_headroom();
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
            for (segment, amount) in &needed {
                let free = headroom.get(segment).copied().unwrap_or(ResourceVector::ZERO);
                if !amount.fits_within(&free) {
                    return Err(LifecycleError::InsufficientQuota(format!(
                        "scaling {app} needs {amount} on {segment}, headroom {free}"
                    )));
                }
            }
            record.scale + delta as u32
        } else {
            record.scale.saturating_sub((-delta) as u32).max(1)
        };

        let record = self
            .continuums
            .get_mut(continuum_id)
            .expect("checked")
            .deployed_apps
            .get_mut(app)
            .expect("checked");
        record.scale = new_scale;
        Ok(new_scale)
    }

    /// Migrates one component to a target segment.
    ///
    /// Make-before-break starts the replacement first and reports zero
    /// downtime; break-before-make stops the old instance immediately and
    /// reports the startup delay. Migrating a component with no live instance
    /// restarts it at the target and reports the startup delay either way.
    pub fn migrate_component(
        &mut self,
        topology: &Topology,
        continuum_id: &ContinuumId,
        app: &AppId,
        component: &ComponentId,
        target: &SegmentId,
        mode: MigrationMode,
        available: &BTreeSet<SegmentId>,
        tick: u64,
    ) -> Result<MigrationReport, LifecycleError> {
        let continuum = self
            .continuums
            .get(continuum_id)
            .ok_or_else(|| LifecycleError::UnknownContinuum(continuum_id.clone()))?;
        let record = continuum
            .deployed_apps
            .get(app)
            .ok_or_else(|| LifecycleError::UnknownApplication(app.clone()))?;
        let spec = record
            .descriptor
            .component(component)
            .ok_or_else(|| LifecycleError::UnknownComponent(component.clone()))?;
        if record.windows.contains_key(component) {
            return Err(LifecycleError::MigrationInProgress(component.clone()));
        }
        if topology.segment(target).is_none() {
            return Err(LifecycleError::Infeasible {
                reason: format!("unknown target segment {target}"),
                blocking: Vec::new(),
            });
        }
        if !available.contains(target) {
            return Err(LifecycleError::Infeasible {
                reason: format!("target segment {target} is unavailable"),
                blocking: Vec::new(),
            });
        }

        let current = record.live_segment(component).cloned();
        if current.as_ref() == Some(target) {
            return Ok(MigrationReport {
                downtime_ticks: 0,
                completes_at_tick: tick,
            });
        }

        // Component constraints against the peers' current segments.
        for peer in &spec.colocation {
            if record.live_segment(peer) != Some(target) {
                return Err(LifecycleError::Infeasible {
                    reason: format!("{component} must stay colocated with {peer}"),
                    blocking: Vec::new(),
                });
            }
        }
        for peer in &spec.anti_affinity {
            if record.live_segment(peer) == Some(target) {
                return Err(LifecycleError::Infeasible {
                    reason: format!("{component} must not share {target} with {peer}"),
                    blocking: Vec::new(),
                });
            }
        }
        if spec.demand.storage > 0 {
            if let Some(allowed) = &record.descriptor.requirements.data_locality {
                let zone = &topology.segment(target).expect("checked").zone;
                if !allowed.contains(zone) {
                    return Err(LifecycleError::Infeasible {
                        reason: format!("zone {zone} not allowed for storage-bearing {component}"),
                        blocking: Vec::new(),
                    });
                }
            }
        }
        let needed = spec.demand.scaled(record.scale as u64);
        let headroom = continuum.quota_headroom();
        let free = headroom.get(target).copied().unwrap_or(ResourceVector::ZERO);
        if !needed.fits_within(&free) {
            return Err(LifecycleError::Infeasible {
                reason: format!("target {target} headroom {free} cannot host {needed}"),
                blocking: Vec::new(),
            });
        }

        let delay = self.startup_delay_ticks;
        let record = self
            .continuums
            .get_mut(continuum_id)
            .expect("checked")
            .deployed_apps
            .get_mut(app)
            .expect("checked");

        let instances = record.instances.entry(component.clone()).or_default();
        let old_index = instances
            .iter()
            .rposition(|i| i.state == InstanceState::Ready || i.state == InstanceState::Starting);
        let had_live = old_index.is_some();
        if mode == MigrationMode::BreakBeforeMake {
            if let Some(old) = old_index {
                instances[old].state = InstanceState::Stopped;
                instances[old].since_tick = tick;
            }
        }
        let new_state = if delay == 0 {
            InstanceState::Ready
        } else {
            InstanceState::Starting
        };
        instances.push(InstanceRecord {
            segment: target.clone(),
            state: new_state,
            since_tick: tick,
        });
        let new_index = instances.len() - 1;

        record.plan.assignment.insert(component.clone(), target.clone());

        if delay == 0 {
            // Completed inline: drain the old instance now under MBB.
            if mode == MigrationMode::MakeBeforeBreak {
                if let Some(old) = old_index {
                    let instances = record.instances.get_mut(component).expect("present");
                    instances[old].state = InstanceState::Draining;
                    instances[old].since_tick = tick;
                }
            }
            return Ok(MigrationReport {
                downtime_ticks: 0,
                completes_at_tick: tick,
            });
        }

        record.windows.insert(
            component.clone(),
            MigrationWindow {
                mode,
                old: if mode == MigrationMode::MakeBeforeBreak {
                    old_index
                } else {
                    None
                },
                new: new_index,
                started_tick: tick,
            },
        );

        let downtime = match mode {
            MigrationMode::MakeBeforeBreak if had_live => 0,
            _ => delay,
        };
        Ok(MigrationReport {
            downtime_ticks: downtime,
            completes_at_tick: tick + delay,
        })
    }

    /// Stops every instance of an application and returns its quota to the
    /// continuum pool. A migration window in flight is closed with both
    /// instances stopped.
    pub fn terminate_application(
        &mut self,
        continuum_id: &ContinuumId,
        app: &AppId,
    ) -> Result<(), LifecycleError> {
        let continuum = self
            .continuums
            .get_mut(continuum_id)
            .ok_or_else(|| LifecycleError::UnknownContinuum(continuum_id.clone()))?;
        let mut record = continuum
            .deployed_apps
            .remove(app)
            .ok_or_else(|| LifecycleError::UnknownApplication(app.clone()))?;
        for instances in record.instances.values_mut() {
            for instance in instances.iter_mut() {
                instance.state = InstanceState::Stopped;
            }
        }
        record.windows.clear();
        Ok(())
    }

    /// Advances instance state machines to `tick`: startups whose delay has
    /// elapsed become Ready (closing their migration windows), instances that
    /// began draining earlier stop.
    pub fn advance_to_tick(&mut self, tick: u64) -> Vec<LifecycleNote> {
        self.current_tick = tick;
        let delay = self.startup_delay_ticks;
        let mut notes = Vec::new();
        for (continuum_id, continuum) in self.continuums.iter_mut() {
            for (app_id, record) in continuum.deployed_apps.iter_mut() {
                // Drain-to-stop for instances draining since an earlier tick.
                for (component, instances) in record.instances.iter_mut() {
                    for instance in instances.iter_mut() {
                        if instance.state == InstanceState::Draining && instance.since_tick < tick {
                            instance.state = InstanceState::Stopped;
                            instance.since_tick = tick;
                            notes.push(LifecycleNote::InstanceStopped {
                                continuum: continuum_id.clone(),
                                app: app_id.clone(),
                                component: component.clone(),
                                segment: instance.segment.clone(),
                            });
                        }
                    }
                }
                // Startup completions.
                let due: Vec<ComponentId> = record
                    .windows
                    .iter()
                    .filter(|(_, w)| w.started_tick + delay <= tick)
                    .map(|(c, _)| c.clone())
                    .collect();
                for component in due {
                    let window = record.windows.remove(&component).expect("listed above");
                    let instances = record.instances.get_mut(&component).expect("window target");
                    if instances[window.new].state == InstanceState::Starting {
                        instances[window.new].state = InstanceState::Ready;
                        instances[window.new].since_tick = tick;
                    }
                    if let Some(old) = window.old {
                        if instances[old].state.is_live() {
                            instances[old].state = InstanceState::Draining;
                            instances[old].since_tick = tick;
                        }
                    }
                    notes.push(LifecycleNote::MigrationCompleted {
                        continuum: continuum_id.clone(),
                        app: app_id.clone(),
                        component: component.clone(),
                        segment: instances[window.new].segment.clone(),
                    });
                }
                // Stray startups outside a window (defensive; normally none).
                for instances in record.instances.values_mut() {
                    for instance in instances.iter_mut() {
                        if instance.state == InstanceState::Starting
                            && instance.since_tick + delay <= tick
                        {
                            instance.state = InstanceState::Ready;
                            instance.since_tick = tick;
                        }
                    }
                }
            }
        }
        notes
    }

    /// Abrupt segment loss: every live instance hosted there stops now, and
    /// any migration window whose replacement sat there is cancelled.
    pub fn fail_segment(&mut self, segment: &SegmentId, tick: u64) -> Vec<LifecycleNote> {
        let mut notes = Vec::new();
        for (continuum_id, continuum) in self.continuums.iter_mut() {
            for (app_id, record) in continuum.deployed_apps.iter_mut() {
                let mut cancelled: Vec<ComponentId> = Vec::new();
                for (component, window) in &record.windows {
                    let new_seg = &record.instances[component][window.new].segment;
                    if new_seg == segment {
                        cancelled.push(component.clone());
                    }
                }
                for component in cancelled {
                    record.windows.remove(&component);
                }
                for (component, instances) in record.instances.iter_mut() {
                    for instance in instances.iter_mut() {
                        if &instance.segment == segment && instance.state.is_live() {
                            let was_ready = instance.state == InstanceState::Ready;
                            instance.state = InstanceState::Stopped;
                            instance.since_tick = tick;
                            if was_ready {
                                notes.push(LifecycleNote::InstanceLost {
                                    continuum: continuum_id.clone(),
                                    app: app_id.clone(),
                                    component: component.clone(),
                                    segment: segment.clone(),
                                });
                            }
                        }
                    }
                }
            }
        }
        notes
    }

    /// Expands a continuum's quota with a fresh reservation; used when an
    /// accepted actuation needs more than the current headroom.
    pub fn expand_quota(
        &mut self,
        broker: &mut Broker,
        continuum_id: &ContinuumId,
        segment: &SegmentId,
        amount: ResourceVector,
    ) -> Result<ReservationId, LifecycleError> {
        let continuum = self
            .continuums
            .get_mut(continuum_id)
            .ok_or_else(|| LifecycleError::UnknownContinuum(continuum_id.clone()))?;
        let reservation = broker.reserve(continuum_id, segment, amount)?;
        continuum.quotas.push(reservation.id);
        *continuum
            .quota_by_segment
            .entry(segment.clone())
            .or_insert(ResourceVector::ZERO) += amount;
        Ok(reservation.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edgeapp::testkit as edgeapp_testkit;
    use crate::placement::{ComponentRole, ComponentSpec};

    fn setup() -> (Topology, BusinessScenario, Broker, LifecycleManager) {
        let topology = edgeapp_testkit::topology();
        let scenario = edgeapp_testkit::scenario_c();
        let broker = Broker::from_topology(&topology).unwrap();
        let lifecycle = LifecycleManager::new(2);
        (topology, scenario, broker, lifecycle)
    }

    fn request(id: &str, cpu: u64) -> ContinuumRequest {
        ContinuumRequest {
            id: id.into(),
            business_provider: "edge".into(),
            quotas: vec![
                QuotaDemand {
                    segment: "s-near".into(),
                    amount: ResourceVector::new(cpu, 4096, 50, 500),
                },
                QuotaDemand {
                    segment: "s-far".into(),
                    amount: ResourceVector::new(cpu, 4096, 50, 500),
                },
            ],
            planes: Plane::full_set(),
        }
    }

    fn app(id: &str, cpu: u64) -> ApplicationDescriptor {
        ApplicationDescriptor {
            id: id.into(),
            provider: "app".into(),
            components: vec![ComponentSpec {
                id: "web".into(),
                demand: ResourceVector::new(cpu, 1024, 0, 50),
                role: ComponentRole::Eas,
                colocation: BTreeSet::new(),
                anti_affinity: BTreeSet::new(),
            }],
            requirements: crate::placement::ServiceRequirements {
                user_zone: "z1".into(),
                max_latency_ms: 100.0,
                min_throughput_mbps: 0.0,
                data_locality: None,
                carbon_cap_g_per_h: None,
                availability_class: crate::placement::AvailabilityClass::High,
            },
        }
    }

    fn activate(
        lifecycle: &mut LifecycleManager,
        broker: &mut Broker,
        id: &ContinuumId,
    ) {
        lifecycle
            .transition(broker, id, ContinuumState::Instantiated)
            .unwrap();
        lifecycle.transition(broker, id, ContinuumState::Active).unwrap();
    }

    fn all_segments(t: &Topology) -> BTreeSet<SegmentId> {
        t.segment_ids()
    }

    // The broker owner is "mno" but the business provider is "edge": grant an
    // agreement so the edge provider can hold mno capacity.
    fn grant_agreement(broker: &mut Broker) {
        broker.declare_agreement("mno".into(), "edge".into(), 1.0);
    }

    #[test]
    fn feasible_request_yields_prepared_continuum() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        let c = lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 1000))
            .unwrap();
        assert_eq!(c.state, ContinuumState::Prepared);
        assert_eq!(c.quotas.len(), 2);
    }

    #[test]
    fn unauthorized_provider_is_rejected() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        let mut req = request("c1", 1000);
        req.business_provider = "mno".into(); // mno does not offer continuums under C
        let err = lifecycle
            .create_continuum(&mut broker, &topology, &scenario, req)
            .unwrap_err();
        assert!(matches!(err, LifecycleError::UnauthorizedScenario(_)));
    }

    #[test]
    fn infeasible_request_leaks_nothing() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        let residual_before = broker.residuals();
        let err = lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 1_000_000))
            .unwrap_err();
        assert!(matches!(err, LifecycleError::Infeasible { .. }));
        assert_eq!(broker.residuals(), residual_before);
        assert!(lifecycle.continuum(&"c1".into()).is_none());
    }

    #[test]
    fn two_continuums_share_a_segment_within_capacity() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 1500))
            .unwrap();
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c2", 1500))
            .unwrap();
        assert_eq!(
            lifecycle.continuum_state(&"c1".into()),
            Some(ContinuumState::Prepared)
        );
        assert_eq!(
            lifecycle.continuum_state(&"c2".into()),
            Some(ContinuumState::Prepared)
        );
    }

    #[test]
    fn prepared_cannot_jump_to_active() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 100))
            .unwrap();
        let err = lifecycle
            .transition(&mut broker, &"c1".into(), ContinuumState::Active)
            .unwrap_err();
        assert!(matches!(err, LifecycleError::IllegalTransition { .. }));
    }

    #[test]
    fn activation_requires_all_planes() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        let mut req = request("c1", 100);
        req.planes = BTreeSet::from([Plane::User, Plane::Control]);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, req)
            .unwrap();
        lifecycle
            .transition(&mut broker, &"c1".into(), ContinuumState::Instantiated)
            .unwrap();
        let err = lifecycle
            .transition(&mut broker, &"c1".into(), ContinuumState::Active)
            .unwrap_err();
        assert!(matches!(err, LifecycleError::PlanesIncomplete));
    }

    #[test]
    fn termination_releases_every_reservation() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        let residual_before = broker.residuals();
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 1000))
            .unwrap();
        activate(&mut lifecycle, &mut broker, &"c1".into());
        lifecycle
            .transition(&mut broker, &"c1".into(), ContinuumState::Terminated)
            .unwrap();
        assert_eq!(broker.residuals(), residual_before);
        assert!(broker.held_by_continuum(&"c1".into()).is_empty());
        let c = lifecycle.continuum(&"c1".into()).unwrap();
        assert!(c.deployed_apps.is_empty());
        // absorbing
        let err = lifecycle
            .transition(&mut broker, &"c1".into(), ContinuumState::Active)
            .unwrap_err();
        assert!(matches!(err, LifecycleError::IllegalTransition { .. }));
    }

    #[test]
    fn random_transition_walks_stay_in_relation() {
        use rand::prelude::*;
        let states = [
            ContinuumState::Prepared,
            ContinuumState::Instantiated,
            ContinuumState::Active,
            ContinuumState::Maintenance,
            ContinuumState::Modifying,
            ContinuumState::Terminated,
        ];
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 10))
            .unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..1000 {
            let from = lifecycle.continuum_state(&"c1".into()).unwrap();
            let to = states[rng.gen_range(0..states.len())];
            let result = lifecycle.transition(&mut broker, &"c1".into(), to);
            let now = lifecycle.continuum_state(&"c1".into()).unwrap();
            if result.is_ok() {
                assert!(from.may_transition(to));
                assert_eq!(now, to);
            } else {
                assert_eq!(now, from);
            }
        }
    }

    #[test]
    fn deploy_binds_to_quota_not_capacity() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 1000))
            .unwrap();
        activate(&mut lifecycle, &mut broker, &"c1".into());
        // 2000 cpu exceeds the 1000 quota but not the 4000 segment capacity
        let err = lifecycle
            .deploy_application(
                &topology,
                &"c1".into(),
                &app("a1", 2000),
                &ObjectiveWeights::latency_only(),
                &all_segments(&topology),
                0,
            )
            .unwrap_err();
        assert!(matches!(err, LifecycleError::Infeasible { .. }));

        let record = lifecycle
            .deploy_application(
                &topology,
                &"c1".into(),
                &app("a1", 800),
                &ObjectiveWeights::latency_only(),
                &all_segments(&topology),
                0,
            )
            .unwrap();
        assert_eq!(record.ready_count(&"web".into()), 1);
    }

    #[test]
    fn deploy_into_prepared_continuum_fails() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 1000))
            .unwrap();
        let err = lifecycle
            .deploy_application(
                &topology,
                &"c1".into(),
                &app("a1", 100),
                &ObjectiveWeights::latency_only(),
                &all_segments(&topology),
                0,
            )
            .unwrap_err();
        assert!(matches!(err, LifecycleError::ContinuumNotActive(_)));
    }

    #[test]
    fn make_before_break_keeps_a_ready_instance() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 2000))
            .unwrap();
        activate(&mut lifecycle, &mut broker, &"c1".into());
        lifecycle
            .deploy_application(
                &topology,
                &"c1".into(),
                &app("a1", 500),
                &ObjectiveWeights::latency_only(),
                &all_segments(&topology),
                0,
            )
            .unwrap();
        let report = lifecycle
            .migrate_component(
                &topology,
                &"c1".into(),
                &"a1".into(),
                &"web".into(),
                &"s-far".into(),
                MigrationMode::MakeBeforeBreak,
                &all_segments(&topology),
                1,
            )
            .unwrap();
        assert_eq!(report.downtime_ticks, 0);
        assert_eq!(report.completes_at_tick, 3);

        for tick in 1..=4 {
            lifecycle.advance_to_tick(tick);
            let record = lifecycle.deployment(&"c1".into(), &"a1".into()).unwrap();
            assert!(
                record.ready_count(&"web".into()) >= 1,
                "no ready instance at tick {tick}"
            );
        }
        let record = lifecycle.deployment(&"c1".into(), &"a1".into()).unwrap();
        assert_eq!(record.live_segment(&"web".into()), Some(&"s-far".into()));
    }

    #[test]
    fn break_before_make_downtime_is_the_startup_delay() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 2000))
            .unwrap();
        activate(&mut lifecycle, &mut broker, &"c1".into());
        lifecycle
            .deploy_application(
                &topology,
                &"c1".into(),
                &app("a1", 500),
                &ObjectiveWeights::latency_only(),
                &all_segments(&topology),
                0,
            )
            .unwrap();
        let report = lifecycle
            .migrate_component(
                &topology,
                &"c1".into(),
                &"a1".into(),
                &"web".into(),
                &"s-far".into(),
                MigrationMode::BreakBeforeMake,
                &all_segments(&topology),
                1,
            )
            .unwrap();
        assert_eq!(report.downtime_ticks, 3 - 1);

        // ticks 1 and 2: nothing ready; tick 3: ready again
        let record = lifecycle.deployment(&"c1".into(), &"a1".into()).unwrap();
        assert_eq!(record.ready_count(&"web".into()), 0);
        lifecycle.advance_to_tick(2);
        assert_eq!(
            lifecycle
                .deployment(&"c1".into(), &"a1".into())
                .unwrap()
                .ready_count(&"web".into()),
            0
        );
        lifecycle.advance_to_tick(3);
        assert_eq!(
            lifecycle
                .deployment(&"c1".into(), &"a1".into())
                .unwrap()
                .ready_count(&"web".into()),
            1
        );
    }

    #[test]
    fn migration_respects_anti_affinity() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 3000))
            .unwrap();
        activate(&mut lifecycle, &mut broker, &"c1".into());
        let mut two_tier = app("a1", 500);
        let mut db = two_tier.components[0].clone();
        db.id = "db".into();
        db.role = ComponentRole::Generic;
        db.anti_affinity = BTreeSet::from([ComponentId::new("web")]);
        two_tier.components.push(db);
        lifecycle
            .deploy_application(
                &topology,
                &"c1".into(),
                &two_tier,
                &ObjectiveWeights::latency_only(),
                &all_segments(&topology),
                0,
            )
            .unwrap();
        let record = lifecycle.deployment(&"c1".into(), &"a1".into()).unwrap();
        let web_segment = record.live_segment(&"web".into()).unwrap().clone();
        let err = lifecycle
            .migrate_component(
                &topology,
                &"c1".into(),
                &"a1".into(),
                &"db".into(),
                &web_segment,
                MigrationMode::MakeBeforeBreak,
                &all_segments(&topology),
                1,
            )
            .unwrap_err();
        assert!(matches!(err, LifecycleError::Infeasible { .. }));
    }

    #[test]
    fn terminate_returns_quota_and_is_single_shot() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 2000))
            .unwrap();
        activate(&mut lifecycle, &mut broker, &"c1".into());
        let headroom_before = lifecycle.continuum(&"c1".into()).unwrap().quota_headroom();
        lifecycle
            .deploy_application(
                &topology,
                &"c1".into(),
                &app("a1", 500),
                &ObjectiveWeights::latency_only(),
                &all_segments(&topology),
                0,
            )
            .unwrap();
        assert_ne!(
            lifecycle.continuum(&"c1".into()).unwrap().quota_headroom(),
            headroom_before
        );
        lifecycle
            .terminate_application(&"c1".into(), &"a1".into())
            .unwrap();
        assert_eq!(
            lifecycle.continuum(&"c1".into()).unwrap().quota_headroom(),
            headroom_before
        );
        assert!(matches!(
            lifecycle.terminate_application(&"c1".into(), &"a1".into()),
            Err(LifecycleError::UnknownApplication(_))
        ));
    }

    #[test]
    fn terminate_during_window_stops_both_instances() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 2000))
            .unwrap();
        activate(&mut lifecycle, &mut broker, &"c1".into());
        lifecycle
            .deploy_application(
                &topology,
                &"c1".into(),
                &app("a1", 500),
                &ObjectiveWeights::latency_only(),
                &all_segments(&topology),
                0,
            )
            .unwrap();
        lifecycle
            .migrate_component(
                &topology,
                &"c1".into(),
                &"a1".into(),
                &"web".into(),
                &"s-far".into(),
                MigrationMode::MakeBeforeBreak,
                &all_segments(&topology),
                1,
            )
            .unwrap();
        lifecycle
            .terminate_application(&"c1".into(), &"a1".into())
            .unwrap();
        assert!(lifecycle.deployment(&"c1".into(), &"a1".into()).is_none());
        // quota fully restored
        let c = lifecycle.continuum(&"c1".into()).unwrap();
        assert_eq!(c.quota_headroom(), c.quota_by_segment);
    }

    #[test]
    fn quota_isolation_between_continuums() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 600))
            .unwrap();
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c2", 600))
            .unwrap();
        activate(&mut lifecycle, &mut broker, &"c1".into());
        activate(&mut lifecycle, &mut broker, &"c2".into());
        lifecycle
            .deploy_application(
                &topology,
                &"c1".into(),
                &app("a1", 500),
                &ObjectiveWeights::latency_only(),
                &all_segments(&topology),
                0,
            )
            .unwrap();
        // c2's headroom is untouched by c1's deployment
        let c2 = lifecycle.continuum(&"c2".into()).unwrap();
        assert_eq!(c2.quota_headroom(), c2.quota_by_segment);
        // and an app too big for c2's own quota cannot borrow c1's
        let err = lifecycle
            .deploy_application(
                &topology,
                &"c2".into(),
                &app("a2", 700),
                &ObjectiveWeights::latency_only(),
                &all_segments(&topology),
                0,
            )
            .unwrap_err();
        assert!(matches!(err, LifecycleError::Infeasible { .. }));
    }

    #[test]
    fn segment_failure_stops_hosted_instances() {
        let (topology, scenario, mut broker, mut lifecycle) = setup();
        grant_agreement(&mut broker);
        lifecycle
            .create_continuum(&mut broker, &topology, &scenario, request("c1", 2000))
            .unwrap();
        activate(&mut lifecycle, &mut broker, &"c1".into());
        lifecycle
            .deploy_application(
                &topology,
                &"c1".into(),
                &app("a1", 500),
                &ObjectiveWeights::latency_only(),
                &all_segments(&topology),
                0,
            )
            .unwrap();
        let record = lifecycle.deployment(&"c1".into(), &"a1".into()).unwrap();
        let hosting = record.live_segment(&"web".into()).unwrap().clone();
        let notes = lifecycle.fail_segment(&hosting, 5);
        assert!(matches!(notes[0], LifecycleNote::InstanceLost { .. }));
        let record = lifecycle.deployment(&"c1".into(), &"a1".into()).unwrap();
        assert_eq!(record.ready_count(&"web".into()), 0);
    }
}
