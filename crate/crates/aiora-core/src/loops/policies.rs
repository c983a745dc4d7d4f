//! Built-in analyzers and deterministic rule policies.

use serde::Deserialize;

use crate::ids::SegmentId;
use crate::placement::ComponentRole;
use crate::twin::MetricKey;

use super::{
    Action, AnalysisOutput, AnalyzerImpl, ExpectedEffect, LoopError, ManagedEntity,
    MetricSelector, PolicyContext, PolicyImpl, PolicyOutcome,
};

struct Aggregator(fn(&[f64]) -> Option<f64>);

impl AnalyzerImpl for Aggregator {
    fn analyze(&self, values: &[(MetricSelector, f64)]) -> AnalysisOutput {
        let raw: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
        AnalysisOutput {
            aggregate: (self.0)(&raw),
            values: values.to_vec(),
        }
    }
}

pub(super) fn mean_analyzer() -> Box<dyn AnalyzerImpl> {
    Box::new(Aggregator(|v| {
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }))
}

pub(super) fn max_analyzer() -> Box<dyn AnalyzerImpl> {
    Box::new(Aggregator(|v| {
        v.iter().copied().fold(None, |acc: Option<f64>, x| {
            Some(acc.map_or(x, |a| a.max(x)))
        })
    }))
}

pub(super) fn min_analyzer() -> Box<dyn AnalyzerImpl> {
    Box::new(Aggregator(|v| {
        v.iter().copied().fold(None, |acc: Option<f64>, x| {
            Some(acc.map_or(x, |a| a.min(x)))
        })
    }))
}

pub(super) fn latest_analyzer() -> Box<dyn AnalyzerImpl> {
    Box::new(Aggregator(|v| v.last().copied()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdScaleParams {
    hi: f64,
    lo: f64,
    step: u32,
    #[serde(default)]
    cooldown_ticks: u64,
}

/// Scale the target application up when the monitored utilization exceeds
/// `hi` (strictly) and down below `lo` (strictly), never below one
/// instance-equivalent. After any scale action the loop holds off further
/// scale actions for `cooldown_ticks`.
pub struct ThresholdScalePolicy {
    params: ThresholdScaleParams,
}

pub(super) fn threshold_scale_factory(
    params: &serde_json::Value,
) -> Result<Box<dyn PolicyImpl>, LoopError> {
    let params: ThresholdScaleParams =
        serde_json::from_value(params.clone()).map_err(|e| LoopError::BadParams(e.to_string()))?;
    if !(0.0..=1.0).contains(&params.lo)
        || !(0.0..=1.0).contains(&params.hi)
        || params.lo >= params.hi
    {
        return Err(LoopError::BadParams(format!(
            "need 0 <= lo < hi <= 1, got lo={} hi={}",
            params.lo, params.hi
        )));
    }
    if params.step == 0 {
        return Err(LoopError::BadParams("step must be at least 1".into()));
    }
    Ok(Box::new(ThresholdScalePolicy { params }))
}

impl PolicyImpl for ThresholdScalePolicy {
    fn decide(&self, ctx: &PolicyContext<'_>) -> Result<PolicyOutcome, LoopError> {
        let utilization = ctx
            .analysis
            .aggregate
            .ok_or_else(|| LoopError::MissingMetric("no monitored values".into()))?;
        let Some(app) = ctx.target_app() else {
            return Ok(PolicyOutcome::none("no application target"));
        };
        if let Some((since, _)) = ctx.state.last_scale {
            if ctx.tick.saturating_sub(since) < self.params.cooldown_ticks {
                return Ok(PolicyOutcome::none(format!(
                    "cooldown until tick {}",
                    since + self.params.cooldown_ticks
                )));
            }
        }
        let scale = ctx
            .snapshot
            .apps
            .get(app)
            .map(|e| e.kpis.scale)
            .unwrap_or(1);

        if utilization > self.params.hi {
            let predicted = utilization * scale as f64 / (scale + self.params.step) as f64;
            let proposal = ctx.proposal(
                ManagedEntity::App(app.clone()),
                Action::ScaleUp {
                    amount: self.params.step,
                },
                Some(ExpectedEffect {
                    metric: MetricKey::CpuUtilization,
                    delta: predicted - utilization,
                }),
            );
            return Ok(PolicyOutcome {
                proposal: Some(proposal),
                rationale: format!("utilization {utilization:.3} above {}", self.params.hi),
            });
        }
        if utilization < self.params.lo {
            if scale <= 1 {
                return Ok(PolicyOutcome::none("already at minimum scale"));
            }
            let step = self.params.step.min(scale - 1);
            let predicted = utilization * scale as f64 / (scale - step) as f64;
            let proposal = ctx.proposal(
                ManagedEntity::App(app.clone()),
                Action::ScaleDown { amount: step },
                Some(ExpectedEffect {
                    metric: MetricKey::CpuUtilization,
                    delta: predicted - utilization,
                }),
            );
            return Ok(PolicyOutcome {
                proposal: Some(proposal),
                rationale: format!("utilization {utilization:.3} below {}", self.params.lo),
            });
        }
        Ok(PolicyOutcome::none("within band"))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatencyMigrationParams {
    /// Explicit latency bound; when absent the target application's effective
    /// max latency requirement applies.
    #[serde(default)]
    bound_ms: Option<f64>,
}

/// Migrate the worst-latency EAS component of the target application to the
/// feasible segment with the lowest model latency, strictly lower than the
/// current one. When no candidate fits the quota, fall back to proposing a
/// quality-target negotiation.
///
/// Feasibility here covers quota headroom, reachability and maintenance
/// state; relational constraints are re-checked by the lifecycle manager at
/// actuation time.
pub struct LatencyMigrationPolicy {
    params: LatencyMigrationParams,
}

pub(super) fn latency_migration_factory(
    params: &serde_json::Value,
) -> Result<Box<dyn PolicyImpl>, LoopError> {
    let params: LatencyMigrationParams =
        serde_json::from_value(params.clone()).map_err(|e| LoopError::BadParams(e.to_string()))?;
    if let Some(bound) = params.bound_ms {
        if !(bound > 0.0) {
            return Err(LoopError::BadParams("bound_ms must be positive".into()));
        }
    }
    Ok(Box::new(LatencyMigrationPolicy { params }))
}

impl PolicyImpl for LatencyMigrationPolicy {
    fn decide(&self, ctx: &PolicyContext<'_>) -> Result<PolicyOutcome, LoopError> {
        let Some(app) = ctx.target_app() else {
            return Ok(PolicyOutcome::none("no application target"));
        };
        let Some(entry) = ctx.snapshot.apps.get(app) else {
            return Ok(PolicyOutcome::none("application not deployed"));
        };
        let bound = match self.params.bound_ms {
            Some(bound) => bound,
            None => match ctx.env.requirements.get(app) {
                Some(req) => req.max_latency_ms,
                None => return Ok(PolicyOutcome::none("no latency requirement known")),
            },
        };
        let measured = entry.kpis.latency_ms.unwrap_or(f64::INFINITY);
        if measured <= bound {
            return Ok(PolicyOutcome::none(format!(
                "latency {measured:.1}ms within bound {bound:.1}ms"
            )));
        }

        // Worst EAS component by current model latency.
        let mut worst: Option<(&crate::ids::ComponentId, f64)> = None;
        for (component, view) in &entry.components {
            if view.role != ComponentRole::Eas {
                continue;
            }
            let current = view
                .ready_segment()
                .and_then(|seg| ctx.env.topology.zone_latency(&entry.user_zone, seg).ok())
                .flatten()
                .unwrap_or(f64::INFINITY);
            if worst.as_ref().map_or(true, |(_, w)| current > *w) {
                worst = Some((component, current));
            }
        }
        let Some((component, current_latency)) = worst else {
            return Ok(PolicyOutcome::none("no EAS component to move"));
        };
        let view = &entry.components[component];
        if view.migration_in_progress() {
            return Ok(PolicyOutcome::none("migration already in progress"));
        }

        let needed = view.demand.scaled(entry.kpis.scale as u64);
        let headroom = ctx.env.headroom.get(&entry.continuum);
        let mut best: Option<(&SegmentId, f64)> = None;
        if let Some(headroom) = headroom {
            for (segment, free) in headroom {
                if !needed.fits_within(free) {
                    continue;
                }
                if ctx
                    .snapshot
                    .segments
                    .get(segment)
                    .map_or(true, |e| e.in_maintenance || !e.available)
                {
                    continue;
                }
                let Ok(Some(latency)) = ctx.env.topology.zone_latency(&entry.user_zone, segment)
                else {
                    continue;
                };
                if latency >= current_latency {
                    continue;
                }
                if best.as_ref().map_or(true, |(seg, l)| {
                    (latency, segment) < (*l, seg)
                }) {
                    best = Some((segment, latency));
                }
            }
        }

        match best {
            Some((segment, latency)) => {
                let proposal = ctx.proposal(
                    ManagedEntity::App(app.clone()),
                    Action::Migrate {
                        component: component.clone(),
                        to: segment.clone(),
                    },
                    Some(ExpectedEffect {
                        metric: MetricKey::LatencyMs,
                        delta: latency - measured.min(current_latency),
                    }),
                );
                Ok(PolicyOutcome {
                    proposal: Some(proposal),
                    rationale: format!(
                        "latency {measured:.1}ms over bound {bound:.1}ms, {segment} at {latency:.1}ms"
                    ),
                })
            }
            None => {
                let proposal = ctx.proposal(
                    ManagedEntity::App(app.clone()),
                    Action::NegotiateQuality { app: app.clone() },
                    None,
                );
                Ok(PolicyOutcome {
                    proposal: Some(proposal),
                    rationale: "no feasible segment improves latency; negotiating quality targets"
                        .into(),
                })
            }
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaintenanceEvacuationParams {}

/// Drain target applications off segments that entered maintenance: the first
/// affected component (application id, then component id order) is moved to
/// the lowest-latency feasible segment each evaluation.
pub struct MaintenanceEvacuationPolicy {
    _params: MaintenanceEvacuationParams,
}

pub(super) fn maintenance_evacuation_factory(
    params: &serde_json::Value,
) -> Result<Box<dyn PolicyImpl>, LoopError> {
    let params: MaintenanceEvacuationParams = if params.is_null() {
        MaintenanceEvacuationParams::default()
    } else {
        serde_json::from_value(params.clone()).map_err(|e| LoopError::BadParams(e.to_string()))?
    };
    Ok(Box::new(MaintenanceEvacuationPolicy { _params: params }))
}

impl PolicyImpl for MaintenanceEvacuationPolicy {
    fn decide(&self, ctx: &PolicyContext<'_>) -> Result<PolicyOutcome, LoopError> {
        for target in &ctx.spec.targets {
            let ManagedEntity::App(app) = target else { continue };
            let Some(entry) = ctx.snapshot.apps.get(app) else { continue };
            for (component, view) in &entry.components {
                let exposed = view.instances.iter().any(|(segment, state)| {
                    state.is_live()
                        && ctx
                            .snapshot
                            .segments
                            .get(segment)
                            .map_or(false, |e| e.in_maintenance)
                });
                if !exposed || view.migration_in_progress() {
                    continue;
                }
                let needed = view.demand.scaled(entry.kpis.scale as u64);
                let Some(headroom) = ctx.env.headroom.get(&entry.continuum) else { continue };
                let mut best: Option<(&SegmentId, f64)> = None;
                for (segment, free) in headroom {
                    if !needed.fits_within(free) {
                        continue;
                    }
                    if ctx
                        .snapshot
                        .segments
                        .get(segment)
                        .map_or(true, |e| e.in_maintenance || !e.available)
                    {
                        continue;
                    }
                    let Ok(Some(latency)) =
                        ctx.env.topology.zone_latency(&entry.user_zone, segment)
                    else {
                        continue;
                    };
                    if best.as_ref().map_or(true, |(seg, l)| (latency, segment) < (*l, seg)) {
                        best = Some((segment, latency));
                    }
                }
                if let Some((segment, _)) = best {
                    let proposal = ctx.proposal(
                        ManagedEntity::App(app.clone()),
                        Action::Migrate {
                            component: component.clone(),
                            to: segment.clone(),
                        },
                        None,
                    );
                    return Ok(PolicyOutcome {
                        proposal: Some(proposal),
                        rationale: format!("draining {component} off a maintenance segment"),
                    });
                }
            }
        }
        Ok(PolicyOutcome::none("nothing to evacuate"))
    }
}
