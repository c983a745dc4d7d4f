//! Append-only run traces and their aggregation into metrics.
//!
//! A trace is a sequence of records with strictly increasing sequence
//! numbers; serialized as JSON lines it is byte-reproducible for a fixed
//! (scenario, seed).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{ConflictReport, CoordinationDecision};
use crate::ids::{AppId, ComponentId, ContinuumId, LoopId, ProposalId, SegmentId};
use crate::lifecycle::{ContinuumState, MigrationMode};
use crate::loops::{Action, ActuationProposal, ManagedEntity};
use crate::placement::ServiceRequirements;
use crate::scenario::EventAction;
use crate::twin::TelemetryRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub tick: u64,
    pub entry: TraceEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEntry {
    Meta {
        seed: u64,
        horizon: u64,
        tick_duration_s: f64,
        noise_enabled: bool,
    },
    Lifecycle(LifecycleEvent),
    ScheduledEvent(EventAction),
    Telemetry {
        records: Vec<TelemetryRecord>,
    },
    Proposal(ActuationProposal),
    Conflicts(ConflictReport),
    Decision(CoordinationDecision),
    Actuation(ActuationRecord),
    Negotiation(NegotiationRecord),
    Kpi(KpiRecord),
    RuntimeError {
        context: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleEvent {
    ContinuumCreated {
        continuum: ContinuumId,
    },
    ContinuumTransition {
        continuum: ContinuumId,
        from: ContinuumState,
        to: ContinuumState,
    },
    ApplicationDeployed {
        continuum: ContinuumId,
        app: AppId,
        assignment: BTreeMap<ComponentId, SegmentId>,
        scalar_cost: f64,
    },
    ApplicationDeployFailed {
        continuum: ContinuumId,
        app: AppId,
        reason: String,
    },
    ApplicationTerminated {
        continuum: ContinuumId,
        app: AppId,
    },
    ScaleChanged {
        continuum: ContinuumId,
        app: AppId,
        from: u32,
        to: u32,
    },
    MigrationStarted {
        continuum: ContinuumId,
        app: AppId,
        component: ComponentId,
        from: Option<SegmentId>,
        to: SegmentId,
        mode: MigrationMode,
        expected_downtime_ticks: u64,
    },
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
    QuotaExpanded {
        continuum: ContinuumId,
        segment: SegmentId,
        amount: crate::domain::ResourceVector,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuationRecord {
    pub proposal: ProposalId,
    pub loop_id: LoopId,
    pub target: ManagedEntity,
    pub action: Action,
    pub outcome: ActuationOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActuationOutcome {
    Applied { detail: String },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationRecord {
    pub app: AppId,
    pub outcome: NegotiationTraceOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegotiationTraceOutcome {
    Accepted {
        rung: usize,
        requirements: ServiceRequirements,
    },
    Rejected,
    NoLadder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentKpi {
    pub utilization: f64,
    pub power_w: f64,
    pub carbon_g_per_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppKpi {
    pub latency_ms: Option<f64>,
    pub throughput_mbps: f64,
    pub cpu_utilization: f64,
    pub ready_instances: u64,
    pub scale: u32,
    pub components_ready: BTreeMap<ComponentId, u64>,
    pub deployed_components: u64,
}

/// Ground-truth per-tick observation appended after actuation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KpiRecord {
    pub segments: BTreeMap<SegmentId, SegmentKpi>,
    pub apps: BTreeMap<AppId, AppKpi>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed trace: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppMetrics {
    pub latency_samples: u64,
    pub latency_p50_ms: Option<f64>,
    pub latency_p95_ms: Option<f64>,
    pub latency_max_ms: Option<f64>,
    pub downtime_ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub ticks: u64,
    pub tick_duration_s: f64,
    pub apps: BTreeMap<AppId, AppMetrics>,
    pub total_energy_wh: f64,
    pub total_carbon_g: f64,
    pub proposals: u64,
    pub actuations_applied: u64,
    pub actuations_failed: u64,
    pub deferrals: u64,
    pub negotiations_accepted: u64,
    pub negotiations_rejected: u64,
}

/// Nearest-rank percentile over a sorted sample set.
fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Pure aggregation of a trace into run metrics. Energy integrates segment
/// power over ticks at the recorded tick duration.
pub fn summarize(records: &[TraceRecord]) -> Result<MetricsSummary, TraceError> {
    let mut last_seq: Option<u64> = None;
    for record in records {
        if let Some(last) = last_seq {
            if record.seq <= last {
                return Err(TraceError::Malformed(format!(
                    "sequence numbers must strictly increase: {} after {last}",
                    record.seq
                )));
            }
        }
        last_seq = Some(record.seq);
    }
    let Some(TraceRecord {
        entry: TraceEntry::Meta {
            tick_duration_s, ..
        },
        ..
    }) = records.first()
    else {
        return Err(TraceError::Malformed(
            "trace must begin with a meta record".into(),
        ));
    };
    let tick_duration_s = *tick_duration_s;

    let mut ticks = 0u64;
    let mut latencies: BTreeMap<AppId, Vec<f64>> = BTreeMap::new();
    let mut downtime: BTreeMap<AppId, u64> = BTreeMap::new();
    let mut energy_wh = 0.0f64;
    let mut carbon_g = 0.0f64;
    let mut proposals = 0u64;
    let mut applied = 0u64;
    let mut failed = 0u64;
    let mut deferrals = 0u64;
    let mut negotiations_accepted = 0u64;
    let mut negotiations_rejected = 0u64;

    for record in records {
        match &record.entry {
            TraceEntry::Kpi(kpi) => {
                ticks += 1;
                for segment in kpi.segments.values() {
                    energy_wh += segment.power_w * tick_duration_s / 3600.0;
                    carbon_g += segment.carbon_g_per_h * tick_duration_s / 3600.0;
                }
                for (app, entry) in &kpi.apps {
                    if let Some(latency) = entry.latency_ms {
                        latencies.entry(app.clone()).or_default().push(latency);
                    }
                    let down = entry.deployed_components > 0
                        && entry.components_ready.values().any(|&ready| ready == 0);
                    let slot = downtime.entry(app.clone()).or_insert(0);
                    if down {
                        *slot += 1;
                    }
                }
            }
            TraceEntry::Proposal(_) => proposals += 1,
            TraceEntry::Actuation(actuation) => match actuation.outcome {
                ActuationOutcome::Applied { .. } => applied += 1,
                ActuationOutcome::Failed { .. } => failed += 1,
            },
            TraceEntry::Decision(decision) => deferrals += decision.deferred.len() as u64,
            TraceEntry::Negotiation(negotiation) => match negotiation.outcome {
                NegotiationTraceOutcome::Accepted { .. } => negotiations_accepted += 1,
                _ => negotiations_rejected += 1,
            },
            _ => {}
        }
    }

    let mut apps = BTreeMap::new();
    let observed: Vec<AppId> = latencies
        .keys()
        .chain(downtime.keys())
        .cloned()
        .collect();
    for app in observed {
        let mut samples = latencies.remove(&app).unwrap_or_default();
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
        apps.insert(
            app.clone(),
            AppMetrics {
                latency_samples: samples.len() as u64,
                latency_p50_ms: percentile(&samples, 50.0),
                latency_p95_ms: percentile(&samples, 95.0),
                latency_max_ms: samples.last().copied(),
                downtime_ticks: downtime.get(&app).copied().unwrap_or(0),
            },
        );
    }

    Ok(MetricsSummary {
        ticks,
        tick_duration_s,
        apps,
        total_energy_wh: energy_wh,
        total_carbon_g: carbon_g,
        proposals,
        actuations_applied: applied,
        actuations_failed: failed,
        deferrals,
        negotiations_accepted,
        negotiations_rejected,
    })
}

/// Writes a trace as JSON lines, one record per line.
pub fn write_jsonl(records: &[TraceRecord], mut writer: impl Write) -> Result<(), TraceError> {
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(seq: u64) -> TraceRecord {
        TraceRecord {
            seq,
            tick: 0,
            entry: TraceEntry::Meta {
                seed: 42,
                horizon: 10,
                tick_duration_s: 1.0,
                noise_enabled: false,
            },
        }
    }

    fn kpi_record(seq: u64, tick: u64, power_w: f64, ready: u64) -> TraceRecord {
        TraceRecord {
            seq,
            tick,
            entry: TraceEntry::Kpi(KpiRecord {
                segments: BTreeMap::from([(
                    SegmentId::new("s1"),
                    SegmentKpi {
                        utilization: 0.0,
                        power_w,
                        carbon_g_per_h: 40.0,
                    },
                )]),
                apps: BTreeMap::from([(
                    AppId::new("a1"),
                    AppKpi {
                        latency_ms: Some(5.0 + tick as f64),
                        throughput_mbps: 100.0,
                        cpu_utilization: 0.5,
                        ready_instances: ready,
                        scale: 1,
                        components_ready: BTreeMap::from([(ComponentId::new("web"), ready)]),
                        deployed_components: 1,
                    },
                )]),
            }),
        }
    }

    #[test]
    fn quiescent_energy_matches_hand_arithmetic() {
        // idle 100 W segment, 10 ticks of 1 s: 1000 J = 0.2777... Wh
        let mut records = vec![meta(0)];
        for tick in 0..10 {
            records.push(kpi_record(tick + 1, tick, 100.0, 1));
        }
        let summary = summarize(&records).unwrap();
        assert!((summary.total_energy_wh - 1000.0 / 3600.0).abs() < 1e-12);
        assert_eq!(summary.ticks, 10);
        assert_eq!(summary.apps[&AppId::new("a1")].downtime_ticks, 0);
    }

    #[test]
    fn downtime_counts_ticks_without_ready_instances() {
        let mut records = vec![meta(0)];
        for tick in 0..10 {
            let ready = if (3..5).contains(&tick) { 0 } else { 1 };
            records.push(kpi_record(tick + 1, tick, 100.0, ready));
        }
        let summary = summarize(&records).unwrap();
        assert_eq!(summary.apps[&AppId::new("a1")].downtime_ticks, 2);
    }

    #[test]
    fn latency_percentiles_use_nearest_rank() {
        let mut records = vec![meta(0)];
        for tick in 0..10 {
            records.push(kpi_record(tick + 1, tick, 0.0, 1));
        }
        // latencies 5..14
        let summary = summarize(&records).unwrap();
        let metrics = &summary.apps[&AppId::new("a1")];
        assert_eq!(metrics.latency_samples, 10);
        assert_eq!(metrics.latency_p50_ms, Some(9.0));
        assert_eq!(metrics.latency_p95_ms, Some(14.0));
        assert_eq!(metrics.latency_max_ms, Some(14.0));
    }

    #[test]
    fn non_monotone_sequence_is_malformed() {
        let records = vec![meta(0), meta(0)];
        assert!(matches!(
            summarize(&records),
            Err(TraceError::Malformed(_))
        ));
        assert!(matches!(summarize(&[]), Err(TraceError::Malformed(_))));
    }

    #[test]
    fn jsonl_roundtrip_preserves_records() {
        let records = vec![meta(0), kpi_record(1, 0, 100.0, 1)];
        let mut buffer = Vec::new();
        write_jsonl(&records, &mut buffer).unwrap();
        let restored = read_jsonl(buffer.as_slice()).unwrap();
        assert_eq!(restored, records);
    }
}
