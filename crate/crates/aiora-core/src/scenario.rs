//! Scenario files: everything a simulation run needs, cross-validated before
//! any engine state is built. Unknown keys are rejected everywhere.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::RelaxationLadder;
use crate::domain::Topology;
use crate::edgeapp::BusinessScenario;
use crate::ids::{AppId, ContinuumId, SegmentId, ZoneId};
use crate::lifecycle::ContinuumRequest;
use crate::loops::{ClosedLoopSpec, EventKind, LoopSet, PolicyRegistry, ScopeContext};
use crate::placement::{ApplicationDescriptor, ObjectiveWeights};

/// An application bound to the continuum that hosts it, with its placement
/// weights and optional quality-negotiation ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationBinding {
    pub continuum: ContinuumId,
    pub descriptor: ApplicationDescriptor,
    pub weights: ObjectiveWeights,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<RelaxationLadder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseOptions {
    #[serde(default)]
    pub enabled: bool,
    /// Multiplicative amplitude: values are scaled by 1 + a*(2u-1), u~U[0,1).
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    0.05
}

impl Default for NoiseOptions {
    fn default() -> Self {
        Self {
            enabled: false,
            amplitude: default_amplitude(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    #[serde(default = "default_tick_duration")]
    pub tick_duration_s: f64,
    #[serde(default = "default_startup_delay")]
    pub startup_delay_ticks: u64,
    #[serde(default)]
    pub noise: NoiseOptions,
}

fn default_tick_duration() -> f64 {
    1.0
}

fn default_startup_delay() -> u64 {
    2
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            tick_duration_s: default_tick_duration(),
            startup_delay_ticks: default_startup_delay(),
            noise: NoiseOptions::default(),
        }
    }
}

/// A scheduled disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub tick: u64,
    pub action: EventAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventAction {
    /// Users of every application currently anchored in `from` move to `to`.
    UserMobility { from: ZoneId, to: ZoneId },
    /// Graceful drain: the segment stops accepting placements for the given
    /// duration; evacuation loops migrate workloads away.
    MaintenanceShutdown { segment: SegmentId, duration_ticks: u64 },
    /// Sets the application's offered-load factor (>= 1).
    LoadSurge { app: AppId, factor: f64 },
    /// Abrupt loss: hosted instances stop immediately.
    SegmentFailure { segment: SegmentId },
}

impl EventAction {
    pub fn kind(&self) -> EventKind {
        match self {
            EventAction::UserMobility { .. } => EventKind::UserMobility,
            EventAction::MaintenanceShutdown { .. } => EventKind::MaintenanceShutdown,
            EventAction::LoadSurge { .. } => EventKind::LoadSurge,
            EventAction::SegmentFailure { .. } => EventKind::SegmentFailure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub topology: Topology,
    pub scenario: BusinessScenario,
    pub continuums: Vec<ContinuumRequest>,
    #[serde(default)]
    pub applications: Vec<ApplicationBinding>,
    #[serde(default)]
    pub loops: Vec<ClosedLoopSpec>,
    #[serde(default)]
    pub events: Vec<Event>,
    pub horizon: u64,
    pub seed: u64,
    #[serde(default)]
    pub options: SimOptions,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
}

/// Loads and fully validates a scenario file; the error lists every violation
/// found, not just the first.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    let config: ScenarioConfig = serde_json::from_str(&text)?;
    let problems = config.validate();
    if problems.is_empty() {
        Ok(config)
    } else {
        Err(ScenarioError::Validation(problems))
    }
}

impl ScenarioConfig {
    /// The scope context loops are validated against: every declared
    /// application, segment, continuum, and the segments each continuum holds
    /// quota on.
    pub fn scope_context(&self) -> ScopeContext {
        let mut scope = ScopeContext {
            segments: self.topology.segment_ids(),
            ..ScopeContext::default()
        };
        for request in &self.continuums {
            scope.continuums.insert(request.id.clone());
            let segments = scope.continuum_segments.entry(request.id.clone()).or_default();
            for quota in &request.quotas {
                segments.insert(quota.segment.clone());
            }
        }
        for binding in &self.applications {
            scope
                .apps
                .insert(binding.descriptor.id.clone(), binding.continuum.clone());
        }
        scope
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems: Vec<String> = Vec::new();

        for violation in self.topology.validate().violations {
            problems.push(format!("topology: {} ({:?})", violation.detail, violation.kind));
        }
        for problem in self.scenario.validate(&self.topology) {
            problems.push(format!("scenario: {problem}"));
        }
        if self.horizon == 0 {
            problems.push("horizon must be at least 1 tick".into());
        }
        if !(self.options.tick_duration_s > 0.0) {
            problems.push("tick duration must be positive".into());
        }
        if self.options.noise.enabled && !(0.0..1.0).contains(&self.options.noise.amplitude) {
            problems.push("noise amplitude must lie in [0, 1)".into());
        }

        let mut continuum_ids: BTreeSet<&ContinuumId> = BTreeSet::new();
        for request in &self.continuums {
            if !continuum_ids.insert(&request.id) {
                problems.push(format!("duplicate continuum request id {}", request.id));
            }
            if self.topology.stakeholder(&request.business_provider).is_none() {
                problems.push(format!(
                    "continuum {} names unknown business provider {}",
                    request.id, request.business_provider
                ));
            }
            for quota in &request.quotas {
                if self.topology.segment(&quota.segment).is_none() {
                    problems.push(format!(
                        "continuum {} requests quota on unknown segment {}",
                        request.id, quota.segment
                    ));
                }
            }
        }

        let mut app_ids: BTreeSet<&AppId> = BTreeSet::new();
        for binding in &self.applications {
            let app = &binding.descriptor;
            if !app_ids.insert(&app.id) {
                problems.push(format!("duplicate application id {}", app.id));
            }
            if !continuum_ids.contains(&binding.continuum) {
                problems.push(format!(
                    "application {} targets unknown continuum {}",
                    app.id, binding.continuum
                ));
            }
            if self.topology.stakeholder(&app.provider).is_none() {
                problems.push(format!(
                    "application {} names unknown provider {}",
                    app.id, app.provider
                ));
            }
            if self.topology.zone(&app.requirements.user_zone).is_none() {
                problems.push(format!(
                    "application {} uses unknown zone {}",
                    app.id, app.requirements.user_zone
                ));
            }
            if let Some(locality) = &app.requirements.data_locality {
                for zone in locality {
                    if self.topology.zone(zone).is_none() {
                        problems.push(format!(
                            "application {} restricts data to unknown zone {zone}",
                            app.id
                        ));
                    }
                }
            }
            for problem in app.validate() {
                problems.push(format!("application {}: {problem}", app.id));
            }
            for problem in binding.weights.validate() {
                problems.push(format!("application {} weights: {problem}", app.id));
            }
        }

        // Compose every loop into a throwaway set: this checks analyzers,
        // policies, parameters, nesting and scope in one pass. Parents must
        // precede children in the file.
        let scope = self.scope_context();
        let registry = PolicyRegistry::builtin();
        let mut loop_set = LoopSet::new();
        for spec in &self.loops {
            if let Err(err) = loop_set.compose(spec.clone(), &registry, &scope) {
                problems.push(format!("loop {}: {err}", spec.id));
            }
        }

        for (index, event) in self.events.iter().enumerate() {
            if event.tick >= self.horizon {
                problems.push(format!(
                    "event #{index} at tick {} is outside the horizon {}",
                    event.tick, self.horizon
                ));
            }
            match &event.action {
                EventAction::UserMobility { from, to } => {
                    for zone in [from, to] {
                        if self.topology.zone(zone).is_none() {
                            problems.push(format!("event #{index} references unknown zone {zone}"));
                        }
                    }
                }
                EventAction::MaintenanceShutdown { segment, duration_ticks } => {
                    if self.topology.segment(segment).is_none() {
                        problems.push(format!(
                            "event #{index} references unknown segment {segment}"
                        ));
                    }
                    if *duration_ticks == 0 {
                        problems.push(format!("event #{index} has zero maintenance duration"));
                    }
                }
                EventAction::LoadSurge { app, factor } => {
                    if !app_ids.contains(app) {
                        problems.push(format!("event #{index} references unknown app {app}"));
                    }
                    if !(*factor >= 1.0) {
                        problems.push(format!(
                            "event #{index} load factor {factor} must be >= 1"
                        ));
                    }
                }
                EventAction::SegmentFailure { segment } => {
                    if self.topology.segment(segment).is_none() {
                        problems.push(format!(
                            "event #{index} references unknown segment {segment}"
                        ));
                    }
                }
            }
        }

        problems
    }
}
