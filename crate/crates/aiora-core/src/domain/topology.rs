//! Multi-stakeholder topology: stakeholders, segments, links, zones, and the
//! latency/energy arithmetic every other module consumes.
//!
//! All types here are immutable values after construction and safe to share
//! across threads; the operations are pure functions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::resource::ResourceVector;
use crate::ids::{SegmentId, StakeholderId, ZoneId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StakeholderRole {
    Mno,
    EdgeProvider,
    AppProvider,
    ContinuumBusinessProvider,
}

/// A bilateral sharing agreement: `peer` may hold up to `fraction` of the
/// owning stakeholder's fleet capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Agreement {
    pub peer: StakeholderId,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StakeholderDescriptor {
    pub id: StakeholderId,
    pub role: StakeholderRole,
    #[serde(default)]
    pub agreements: Vec<Agreement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    RadioAccess,
    Edge,
    Cloud,
}

/// One stakeholder-owned infrastructure segment (a site/cluster treated as the
/// federation unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentDescriptor {
    pub id: SegmentId,
    pub owner: StakeholderId,
    pub kind: SegmentKind,
    pub capacity: ResourceVector,
    pub power_idle_w: f64,
    pub power_max_w: f64,
    pub carbon_g_per_kwh: f64,
    pub zone: ZoneId,
    pub unit_cost_per_h: f64,
}

impl SegmentDescriptor {
    /// Electrical draw at the given CPU utilization: affine between idle and
    /// max draw.
    pub fn power_draw(&self, utilization: f64) -> Result<f64, DomainError> {
        if !(0.0..=1.0).contains(&utilization) || utilization.is_nan() {
            return Err(DomainError::UtilizationOutOfRange(utilization));
        }
        Ok(self.power_idle_w + utilization * (self.power_max_w - self.power_idle_w))
    }

    /// Marginal watts per unit of CPU utilization.
    pub fn power_slope_w(&self) -> f64 {
        self.power_max_w - self.power_idle_w
    }

    /// Emission rate in gCO2/h at the given electrical draw.
    pub fn carbon_rate_g_per_h(&self, power_w: f64) -> f64 {
        power_w / 1000.0 * self.carbon_g_per_kwh
    }
}

/// Undirected latency/bandwidth edge between two segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDescriptor {
    pub endpoints: (SegmentId, SegmentId),
    pub latency_ms: f64,
    pub bandwidth_mbps: u64,
}

/// Radio attachment point for users in a zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneAttachment {
    pub segment: SegmentId,
    pub access_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneDescriptor {
    pub attachments: Vec<ZoneAttachment>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default)]
    pub stakeholders: Vec<StakeholderDescriptor>,
    #[serde(default)]
    pub segments: Vec<SegmentDescriptor>,
    #[serde(default)]
    pub links: Vec<LinkDescriptor>,
    #[serde(default)]
    pub zones: BTreeMap<ZoneId, ZoneDescriptor>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
    #[error("unknown zone {0}")]
    UnknownZone(ZoneId),
    #[error("utilization {0} outside [0, 1]")]
    UtilizationOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DuplicateId,
    DanglingReference,
    NonPositiveLatency,
    InvalidValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

/// Outcome of a topology validation pass; `ok()` iff no violations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, detail: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            detail: detail.into(),
        });
    }
}

impl Topology {
    pub fn segment(&self, id: &SegmentId) -> Option<&SegmentDescriptor> {
        self.segments.iter().find(|s| &s.id == id)
    }

    pub fn stakeholder(&self, id: &StakeholderId) -> Option<&StakeholderDescriptor> {
        self.stakeholders.iter().find(|s| &s.id == id)
    }

    pub fn zone(&self, id: &ZoneId) -> Option<&ZoneDescriptor> {
        self.zones.get(id)
    }

    pub fn segment_ids(&self) -> BTreeSet<SegmentId> {
        self.segments.iter().map(|s| s.id.clone()).collect()
    }

    /// Agreement fraction granted by `owner` to `consumer`; absent agreements
    /// grant nothing, a stakeholder always has full access to its own fleet.
    pub fn agreement_fraction(&self, owner: &StakeholderId, consumer: &StakeholderId) -> f64 {
        if owner == consumer {
            return 1.0;
        }
        self.stakeholder(owner)
            .and_then(|s| s.agreements.iter().find(|a| &a.peer == consumer))
            .map(|a| a.fraction)
            .unwrap_or(0.0)
    }

    /// Structural validation: referential integrity, id uniqueness, value
    /// ranges. Connectivity is deliberately not checked here; reachability is
    /// reported by `path_latency` instead.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();

        let mut stakeholder_ids = BTreeSet::new();
        for s in &self.stakeholders {
            if !stakeholder_ids.insert(&s.id) {
                report.push(ViolationKind::DuplicateId, format!("stakeholder {}", s.id));
            }
            for a in &s.agreements {
                if !(0.0..=1.0).contains(&a.fraction) || a.fraction.is_nan() {
                    report.push(
                        ViolationKind::InvalidValue,
                        format!("agreement fraction {} from {} to {}", a.fraction, s.id, a.peer),
                    );
                }
            }
        }
        // Agreement peers may name stakeholders declared later in the list, so
        // check them after the id set is complete.
        for s in &self.stakeholders {
            for a in &s.agreements {
                if !stakeholder_ids.contains(&a.peer) {
                    report.push(
                        ViolationKind::DanglingReference,
                        format!("agreement peer {} of {}", a.peer, s.id),
                    );
                }
            }
        }

        let mut segment_ids = BTreeSet::new();
        for seg in &self.segments {
            if !segment_ids.insert(&seg.id) {
                report.push(ViolationKind::DuplicateId, format!("segment {}", seg.id));
            }
            if !stakeholder_ids.contains(&seg.owner) {
                report.push(
                    ViolationKind::DanglingReference,
                    format!("unknown owner {} of segment {}", seg.owner, seg.id),
                );
            }
            if seg.power_idle_w < 0.0 || seg.power_max_w < seg.power_idle_w {
                report.push(
                    ViolationKind::InvalidValue,
                    format!(
                        "segment {} power range idle={}W max={}W",
                        seg.id, seg.power_idle_w, seg.power_max_w
                    ),
                );
            }
            if seg.carbon_g_per_kwh < 0.0 {
                report.push(
                    ViolationKind::InvalidValue,
                    format!("segment {} carbon intensity {}", seg.id, seg.carbon_g_per_kwh),
                );
            }
            if seg.unit_cost_per_h < 0.0 {
                report.push(
                    ViolationKind::InvalidValue,
                    format!("segment {} unit cost {}", seg.id, seg.unit_cost_per_h),
                );
            }
            if !self.zones.contains_key(&seg.zone) {
                report.push(
                    ViolationKind::DanglingReference,
                    format!("unknown zone {} of segment {}", seg.zone, seg.id),
                );
            }
        }

        for link in &self.links {
            let (a, b) = &link.endpoints;
            if a == b {
                report.push(
                    ViolationKind::InvalidValue,
                    format!("link with identical endpoints {}", a),
                );
            }
            for end in [a, b] {
                if !segment_ids.contains(end) {
                    report.push(
                        ViolationKind::DanglingReference,
                        format!("link endpoint {}", end),
                    );
                }
            }
            if !(link.latency_ms > 0.0) {
                report.push(
                    ViolationKind::NonPositiveLatency,
                    format!("non-positive latency {}ms on link {}-{}", link.latency_ms, a, b),
                );
            }
        }

        for (zone_id, zone) in &self.zones {
            for att in &zone.attachments {
                if !segment_ids.contains(&att.segment) {
                    report.push(
                        ViolationKind::DanglingReference,
                        format!("zone {} attachment segment {}", zone_id, att.segment),
                    );
                }
                if !(att.access_latency_ms >= 0.0) {
                    report.push(
                        ViolationKind::InvalidValue,
                        format!("zone {} access latency {}", zone_id, att.access_latency_ms),
                    );
                }
            }
        }

        report
    }

    /// Minimum one-way latency between two segments over the link graph.
    /// `Ok(None)` means the segments are not connected.
    pub fn path_latency(
        &self,
        from: &SegmentId,
        to: &SegmentId,
    ) -> Result<Option<f64>, DomainError> {
        if self.segment(from).is_none() {
            return Err(DomainError::UnknownSegment(from.clone()));
        }
        if self.segment(to).is_none() {
            return Err(DomainError::UnknownSegment(to.clone()));
        }
        if from == to {
            return Ok(Some(0.0));
        }
        Ok(self.shortest_paths_from(&[(from.clone(), 0.0)]).remove(to))
    }

    /// User-to-segment latency from a zone: best attachment access latency
    /// plus the path latency from that attachment. `Ok(None)` if no attachment
    /// reaches the segment.
    pub fn zone_latency(&self, zone: &ZoneId, to: &SegmentId) -> Result<Option<f64>, DomainError> {
        let zone_desc = self
            .zone(zone)
            .ok_or_else(|| DomainError::UnknownZone(zone.clone()))?;
        if self.segment(to).is_none() {
            return Err(DomainError::UnknownSegment(to.clone()));
        }
        let sources: Vec<(SegmentId, f64)> = zone_desc
            .attachments
            .iter()
            .map(|a| (a.segment.clone(), a.access_latency_ms))
            .collect();
        Ok(self.shortest_paths_from(&sources).remove(to))
    }

    /// All reachable segment latencies from a zone in one pass; used by the
    /// placement search so the graph is only walked once per request.
    pub fn zone_latency_map(&self, zone: &ZoneId) -> Result<BTreeMap<SegmentId, f64>, DomainError> {
        let zone_desc = self
            .zone(zone)
            .ok_or_else(|| DomainError::UnknownZone(zone.clone()))?;
        let sources: Vec<(SegmentId, f64)> = zone_desc
            .attachments
            .iter()
            .map(|a| (a.segment.clone(), a.access_latency_ms))
            .collect();
        Ok(self.shortest_paths_from(&sources))
    }

    /// Dijkstra from a set of seeded sources. Quadratic scan is plenty at
    /// federation scale (tens of segments) and keeps results deterministic.
    fn shortest_paths_from(&self, sources: &[(SegmentId, f64)]) -> BTreeMap<SegmentId, f64> {
        let ids: Vec<&SegmentId> = {
            let mut v: Vec<&SegmentId> = self.segments.iter().map(|s| &s.id).collect();
            v.sort();
            v
        };
        let index: BTreeMap<&SegmentId, usize> =
            ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let n = ids.len();
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for link in &self.links {
            let (a, b) = (&link.endpoints.0, &link.endpoints.1);
            if let (Some(&ia), Some(&ib)) = (index.get(a), index.get(b)) {
                adj[ia].push((ib, link.latency_ms));
                adj[ib].push((ia, link.latency_ms));
            }
        }

        let mut dist = vec![f64::INFINITY; n];
        for (src, seed) in sources {
            if let Some(&i) = index.get(src) {
                if *seed < dist[i] {
                    dist[i] = *seed;
                }
            }
        }
        let mut done = vec![false; n];
        loop {
            let mut next: Option<usize> = None;
            for i in 0..n {
                if !done[i] && dist[i].is_finite() {
                    if next.map_or(true, |j| dist[i] < dist[j]) {
                        next = Some(i);
                    }
                }
            }
            let Some(u) = next else { break };
            done[u] = true;
            for &(v, w) in &adj[u] {
                if dist[u] + w < dist[v] {
                    dist[v] = dist[u] + w;
                }
            }
        }

        ids.into_iter()
            .zip(dist)
            .filter(|(_, d)| d.is_finite())
            .map(|(id, d)| (id.clone(), d))
            .collect()
    }
}
