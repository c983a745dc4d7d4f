//! Network digital twin: a time-stamped analytic mirror of segment
//! utilization and per-application KPIs, built from telemetry and the
//! deployment view, serving immutable snapshots and what-if projections.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ResourceVector, Topology};
use crate::ids::{AppId, ComponentId, ContinuumId, SegmentId, ZoneId};
use crate::lifecycle::InstanceState;
use crate::loops::{Action, ActuationProposal, ManagedEntity};
use crate::placement::ComponentRole;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TelemetrySource {
    Segment(SegmentId),
    App(AppId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKey {
    CpuUtilization,
    LatencyMs,
    ThroughputMbps,
    /// 1.0 while the application has a reachable ready path; 0.0 otherwise.
    /// Gates the latency sample so outages are not masked by stale values.
    Reachable,
    InMaintenance,
    Available,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricUnit {
    Fraction,
    Milliseconds,
    Mbps,
    Flag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Local,
    ExternalTwin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub tick: u64,
    pub source: TelemetrySource,
    pub metric: MetricKey,
    pub value: f64,
    pub unit: MetricUnit,
    #[serde(default = "default_provenance")]
    pub provenance: Provenance,
}

fn default_provenance() -> Provenance {
    Provenance::Local
}

/// Deployment state mirrored into the twin alongside telemetry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeploymentView {
    pub apps: BTreeMap<AppId, AppDeploymentView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppDeploymentView {
    pub continuum: ContinuumId,
    pub user_zone: ZoneId,
    pub scale: u32,
    pub components: BTreeMap<ComponentId, ComponentView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentView {
    pub demand: ResourceVector,
    pub role: ComponentRole,
    pub instances: Vec<(SegmentId, InstanceState)>,
}

impl ComponentView {
    pub fn ready_count(&self) -> u64 {
        self.instances
            .iter()
            .filter(|(_, s)| *s == InstanceState::Ready)
            .count() as u64
    }

    pub fn ready_segment(&self) -> Option<&SegmentId> {
        self.instances
            .iter()
            .rev()
            .find(|(_, s)| *s == InstanceState::Ready)
            .map(|(seg, _)| seg)
    }

    pub fn migration_in_progress(&self) -> bool {
        self.instances
            .iter()
            .any(|(_, s)| matches!(s, InstanceState::Starting | InstanceState::Draining))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTwinEntry {
    pub utilization: f64,
    pub power_w: f64,
    pub carbon_g_per_h: f64,
    pub in_maintenance: bool,
    pub available: bool,
    /// Set when a what-if projection pushed demand past full utilization.
    #[serde(default)]
    pub saturated: bool,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppKpis {
    pub latency_ms: Option<f64>,
    pub throughput_mbps: f64,
    pub cpu_utilization: f64,
    pub ready_instances: u64,
    pub scale: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppTwinEntry {
    pub continuum: ContinuumId,
    pub user_zone: ZoneId,
    pub kpis: AppKpis,
    pub components: BTreeMap<ComponentId, ComponentView>,
    pub provenance: Provenance,
}

/// Immutable view of the mirrored world at one tick. Issuing later ingests
/// never changes an already issued snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinSnapshot {
    pub tick: u64,
    pub segments: BTreeMap<SegmentId, SegmentTwinEntry>,
    pub apps: BTreeMap<AppId, AppTwinEntry>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwinError {
    #[error("out-of-order telemetry from {origin:?}: tick {tick} after {last}")]
    OutOfOrderTelemetry {
        origin: TelemetrySource,
        tick: u64,
        last: u64,
    },
    #[error("unknown entity {0}")]
    UnknownEntity(String),
}

#[derive(Debug, Clone)]
struct MetricSample {
    value: f64,
    provenance: Provenance,
}

/// Single-writer twin state: `ingest` is the only mutation, snapshots are
/// value copies safe to hand to any number of readers.
#[derive(Debug, Clone)]
pub struct NetworkTwin {
    topology: Arc<Topology>,
    samples: BTreeMap<(TelemetrySource, MetricKey), MetricSample>,
    last_tick: BTreeMap<TelemetrySource, u64>,
    deployments: DeploymentView,
}

impl NetworkTwin {
    pub fn new(topology: Arc<Topology>) -> Self {
        Self {
            topology,
            samples: BTreeMap::new(),
            last_tick: BTreeMap::new(),
            deployments: DeploymentView::default(),
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Applies a telemetry batch. Ticks must be non-decreasing per source;
    /// within a batch, the last record for a (source, metric) pair wins.
    pub fn ingest(&mut self, records: &[TelemetryRecord]) -> Result<(), TwinError> {
        for record in records {
            if let Some(&last) = self.last_tick.get(&record.source) {
                if record.tick < last {
                    return Err(TwinError::OutOfOrderTelemetry {
                        origin: record.source.clone(),
                        tick: record.tick,
                        last,
                    });
                }
            }
        }
        for record in records {
            self.last_tick.insert(record.source.clone(), record.tick);
            self.samples.insert(
                (record.source.clone(), record.metric),
                MetricSample {
                    value: record.value,
                    provenance: record.provenance,
                },
            );
        }
        Ok(())
    }

    /// Mirrors the current deployment state (assignments, scales, instance
    /// states) so snapshots can answer per-application questions.
    pub fn sync_deployments(&mut self, view: DeploymentView) {
        self.deployments = view;
    }

    fn metric(&self, source: TelemetrySource, key: MetricKey) -> Option<&MetricSample> {
        self.samples.get(&(source, key))
    }

    /// Builds an immutable snapshot of the mirrored state at `tick`. Segment
    /// power and carbon are derived from the utilization via the affine power
    /// model; unknown metrics default to idle.
    pub fn snapshot(&self, tick: u64) -> TwinSnapshot {
        let mut segments = BTreeMap::new();
        for descriptor in &self.topology.segments {
            let source = TelemetrySource::Segment(descriptor.id.clone());
            let sample = self.metric(source.clone(), MetricKey::CpuUtilization);
            let utilization = sample.map(|s| s.value.clamp(0.0, 1.0)).unwrap_or(0.0);
            let provenance = sample.map(|s| s.provenance).unwrap_or(Provenance::Local);
            let power_w = descriptor
                .power_draw(utilization)
                .expect("clamped utilization");
            let in_maintenance = self
                .metric(source.clone(), MetricKey::InMaintenance)
                .map(|s| s.value > 0.0)
                .unwrap_or(false);
            let available = self
                .metric(source.clone(), MetricKey::Available)
                .map(|s| s.value > 0.0)
                .unwrap_or(true);
            segments.insert(
                descriptor.id.clone(),
                SegmentTwinEntry {
                    utilization,
                    power_w,
                    carbon_g_per_h: descriptor.carbon_rate_g_per_h(power_w),
                    in_maintenance,
                    available,
                    saturated: false,
                    provenance,
                },
            );
        }

        let mut apps = BTreeMap::new();
        for (app_id, deployment) in &self.deployments.apps {
            let source = TelemetrySource::App(app_id.clone());
            let reachable = self
                .metric(source.clone(), MetricKey::Reachable)
                .map(|s| s.value > 0.0)
                .unwrap_or(true);
            let latency = self.metric(source.clone(), MetricKey::LatencyMs);
            let latency_ms = if reachable {
                latency.and_then(|s| s.value.is_finite().then_some(s.value))
            } else {
                None
            };
            let provenance = latency.map(|s| s.provenance).unwrap_or(Provenance::Local);
            let throughput_mbps = self
                .metric(source.clone(), MetricKey::ThroughputMbps)
                .map(|s| s.value)
                .unwrap_or(0.0);
            let cpu_utilization = self
                .metric(source.clone(), MetricKey::CpuUtilization)
                .map(|s| s.value.clamp(0.0, 1.0))
                .unwrap_or(0.0);
            let ready_instances = deployment
                .components
                .values()
                .map(|c| c.ready_count())
                .sum();
            apps.insert(
                app_id.clone(),
                AppTwinEntry {
                    continuum: deployment.continuum.clone(),
                    user_zone: deployment.user_zone.clone(),
                    kpis: AppKpis {
                        latency_ms,
                        throughput_mbps,
                        cpu_utilization,
                        ready_instances,
                        scale: deployment.scale,
                    },
                    components: deployment.components.clone(),
                    provenance,
                },
            );
        }

        TwinSnapshot {
            tick,
            segments,
            apps,
        }
    }

    /// Analytic projection of a proposal onto a snapshot. The input snapshot
    /// is untouched; scale actions shift utilization by the marginal demand,
    /// migrations move demand and recompute the app latency over the path
    /// model. Projections that push a segment past full utilization clamp at
    /// 1.0 and set the saturation flag.
    pub fn what_if(
        &self,
        snapshot: &TwinSnapshot,
        proposal: &ActuationProposal,
    ) -> Result<TwinSnapshot, TwinError> {
        let mut predicted = snapshot.clone();
        match &proposal.action {
            Action::Reconfigure { .. } | Action::NegotiateQuality { .. } => {}
            Action::ScaleUp { amount } => {
                let app = target_app(proposal)?;
                self.project_scale(&mut predicted, &app, *amount as i64)?;
            }
            Action::ScaleDown { amount } => {
                let app = target_app(proposal)?;
                self.project_scale(&mut predicted, &app, -(*amount as i64))?;
            }
            Action::Migrate { component, to } => {
                let app = target_app(proposal)?;
                self.project_migration(&mut predicted, &app, component, to)?;
            }
        }
        Ok(predicted)
    }

    fn project_scale(
        &self,
        snapshot: &mut TwinSnapshot,
        app: &AppId,
        delta: i64,
    ) -> Result<(), TwinError> {
        let entry = snapshot
            .apps
            .get_mut(app)
            .ok_or_else(|| TwinError::UnknownEntity(app.to_string()))?;
        let old_scale = entry.kpis.scale as i64;
        let new_scale = (old_scale + delta).max(1) as u32;
        let applied_delta = new_scale as i64 - old_scale;
        entry.kpis.scale = new_scale;
        // offered load stays constant: utilization scales inversely
        if new_scale > 0 {
            entry.kpis.cpu_utilization =
                (entry.kpis.cpu_utilization * old_scale as f64 / new_scale as f64).clamp(0.0, 1.0);
        }
        let per_segment: Vec<(SegmentId, ResourceVector)> = entry
            .components
            .values()
            .flat_map(|c| {
                c.instances
                    .iter()
                    .filter(|(_, s)| s.is_live())
                    .map(|(seg, _)| (seg.clone(), c.demand))
                    .collect::<Vec<_>>()
            })
            .collect();
        for (segment, demand) in per_segment {
            let Some(seg_entry) = snapshot.segments.get_mut(&segment) else {
                return Err(TwinError::UnknownEntity(segment.to_string()));
            };
            let descriptor = self
                .topology
                .segment(&segment)
                .ok_or_else(|| TwinError::UnknownEntity(segment.to_string()))?;
            if descriptor.capacity.cpu == 0 {
                continue;
            }
            let shift = applied_delta as f64 * demand.cpu as f64 / descriptor.capacity.cpu as f64;
            let raw = seg_entry.utilization + shift;
            if raw > 1.0 {
                seg_entry.saturated = true;
            }
            seg_entry.utilization = raw.clamp(0.0, 1.0);
            seg_entry.power_w = descriptor
                .power_draw(seg_entry.utilization)
                .expect("clamped");
            seg_entry.carbon_g_per_h = descriptor.carbon_rate_g_per_h(seg_entry.power_w);
        }
        Ok(())
    }

    fn project_migration(
        &self,
        snapshot: &mut TwinSnapshot,
        app: &AppId,
        component: &ComponentId,
        to: &SegmentId,
    ) -> Result<(), TwinError> {
        if self.topology.segment(to).is_none() {
            return Err(TwinError::UnknownEntity(to.to_string()));
        }
        let entry = snapshot
            .apps
            .get_mut(app)
            .ok_or_else(|| TwinError::UnknownEntity(app.to_string()))?;
        let scale = entry.kpis.scale as u64;
        let view = entry
            .components
            .get_mut(component)
            .ok_or_else(|| TwinError::UnknownEntity(component.to_string()))?;
        let demand = view.demand.scaled(scale);
        let from = view.ready_segment().cloned();
        view.instances = vec![(to.clone(), InstanceState::Ready)];

        // shift utilization between segments
        let mut shift = |segment: &SegmentId, sign: f64| -> Result<(), TwinError> {
            let descriptor = self
                .topology
                .segment(segment)
                .ok_or_else(|| TwinError::UnknownEntity(segment.to_string()))?;
            let Some(seg_entry) = snapshot.segments.get_mut(segment) else {
                return Err(TwinError::UnknownEntity(segment.to_string()));
            };
            if descriptor.capacity.cpu == 0 {
                return Ok(());
            }
            let raw = seg_entry.utilization
                + sign * demand.cpu as f64 / descriptor.capacity.cpu as f64;
            if raw > 1.0 {
                seg_entry.saturated = true;
            }
            seg_entry.utilization = raw.clamp(0.0, 1.0);
            seg_entry.power_w = descriptor
                .power_draw(seg_entry.utilization)
                .expect("clamped");
            seg_entry.carbon_g_per_h = descriptor.carbon_rate_g_per_h(seg_entry.power_w);
            Ok(())
        };
        if let Some(from) = from {
            shift(&from, -1.0)?;
        }
        shift(to, 1.0)?;

        // recompute the app latency over the path model
        let entry = snapshot.apps.get_mut(app).expect("present above");
        let mut worst: Option<f64> = None;
        for view in entry.components.values() {
            if view.role != ComponentRole::Eas {
                continue;
            }
            let Some(segment) = view.ready_segment() else {
                worst = None;
                break;
            };
            match self
                .topology
                .zone_latency(&entry.user_zone, segment)
                .ok()
                .flatten()
            {
                Some(latency) => {
                    worst = Some(worst.map_or(latency, |w: f64| w.max(latency)));
                }
                None => {
                    worst = None;
                    break;
                }
            }
        }
        entry.kpis.latency_ms = worst;
        Ok(())
    }
}

fn target_app(proposal: &ActuationProposal) -> Result<AppId, TwinError> {
    match &proposal.target {
        ManagedEntity::App(id) => Ok(id.clone()),
        other => Err(TwinError::UnknownEntity(format!(
            "proposal targets {other:?}, expected an application"
        ))),
    }
}
