//! Edge enablement and exposure layer: EES/EAS registration, client
//! provisioning, discovery, and the business-scenario authorization matrix
//! that gates every northbound operation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{StakeholderRole, Topology};
use crate::ids::{ContinuumId, EasId, EesId, SegmentId, StakeholderId, ZoneId};
use crate::lifecycle::ContinuumState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioVariant {
    A,
    B,
    C,
}

impl std::fmt::Display for ScenarioVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioVariant::A => f.write_str("A"),
            ScenarioVariant::B => f.write_str("B"),
            ScenarioVariant::C => f.write_str("C"),
        }
    }
}

/// The three classes of system entities whose ownership and management the
/// business scenarios split among stakeholders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityClass {
    VirtualInfrastructure,
    Continuum,
    ApplicationServer,
}

impl std::fmt::Display for EntityClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EntityClass::VirtualInfrastructure => f.write_str("virtual_infrastructure"),
            EntityClass::Continuum => f.write_str("continuum"),
            EntityClass::ApplicationServer => f.write_str("application_server"),
        }
    }
}

/// Operation kinds partition into two buckets: offering rights gate
/// create/offer operations, managing rights gate lifecycle, registration and
/// actuation operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationKind {
    Offer,
    Manage,
}

impl std::fmt::Display for OperationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OperationKind::Offer => f.write_str("offer"),
            OperationKind::Manage => f.write_str("manage"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleAssignment {
    pub offering: StakeholderId,
    pub managing: StakeholderId,
}

/// Who offers and who manages each entity class under one of the three
/// supported business scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusinessScenario {
    pub variant: ScenarioVariant,
    pub roles: BTreeMap<EntityClass, RoleAssignment>,
}

impl BusinessScenario {
    pub fn role(&self, class: EntityClass) -> Option<&RoleAssignment> {
        self.roles.get(&class)
    }

    /// Checks the role matrix against the variant's ownership/management
    /// pattern and the stakeholders' declared roles.
    pub fn validate(&self, topology: &Topology) -> Vec<String> {
        let mut problems = Vec::new();
        let classes = [
            EntityClass::VirtualInfrastructure,
            EntityClass::Continuum,
            EntityClass::ApplicationServer,
        ];
        for class in classes {
            let Some(assignment) = self.roles.get(&class) else {
                problems.push(format!("scenario lacks a role assignment for {class}"));
                continue;
            };
            for id in [&assignment.offering, &assignment.managing] {
                if topology.stakeholder(id).is_none() {
                    problems.push(format!("scenario references unknown stakeholder {id}"));
                }
            }
        }
        if !problems.is_empty() {
            return problems;
        }
        let vi = &self.roles[&EntityClass::VirtualInfrastructure];
        let cont = &self.roles[&EntityClass::Continuum];
        let app = &self.roles[&EntityClass::ApplicationServer];
        let role_of = |id: &StakeholderId| topology.stakeholder(id).map(|s| s.role);

        match self.variant {
            ScenarioVariant::A => {
                let operator = &vi.offering;
                let all_same = [
                    &vi.managing,
                    &cont.offering,
                    &cont.managing,
                    &app.offering,
                    &app.managing,
                ]
                .iter()
                .all(|id| *id == operator);
                if !all_same {
                    problems.push(
                        "scenario A requires a single operator offering and managing all entities"
                            .into(),
                    );
                }
                if !matches!(
                    role_of(operator),
                    Some(StakeholderRole::Mno) | Some(StakeholderRole::AppProvider)
                ) {
                    problems.push(format!(
                        "scenario A operator {operator} must be an MNO or application provider"
                    ));
                }
            }
            ScenarioVariant::B => {
                let operator = &vi.offering;
                if &cont.offering != operator {
                    problems.push(
                        "scenario B: one operator offers both the virtual infrastructure and the continuums"
                            .into(),
                    );
                }
                if &vi.managing != operator
                    || &cont.managing != operator
                    || &app.managing != operator
                {
                    problems.push("scenario B: the offering operator manages all entities".into());
                }
                if !matches!(
                    role_of(operator),
                    Some(StakeholderRole::Mno)
                        | Some(StakeholderRole::EdgeProvider)
                        | Some(StakeholderRole::ContinuumBusinessProvider)
                ) {
                    problems.push(format!(
                        "scenario B operator {operator} must be an MNO or edge computing provider"
                    ));
                }
                if role_of(&app.offering) != Some(StakeholderRole::AppProvider) {
                    problems.push(format!(
                        "scenario B: {} must be an application provider",
                        app.offering
                    ));
                }
                if &app.offering == operator {
                    problems.push(
                        "scenario B: the application provider is distinct from the operator".into(),
                    );
                }
            }
            ScenarioVariant::C => {
                if vi.managing != vi.offering {
                    problems.push(
                        "scenario C: the MNO offers and manages the virtual infrastructure".into(),
                    );
                }
                if role_of(&vi.offering) != Some(StakeholderRole::Mno) {
                    problems.push(format!("scenario C: {} must be an MNO", vi.offering));
                }
                if cont.managing != cont.offering {
                    problems.push(
                        "scenario C: the edge provider offers and manages the continuums".into(),
                    );
                }
                if !matches!(
                    role_of(&cont.offering),
                    Some(StakeholderRole::EdgeProvider)
                        | Some(StakeholderRole::ContinuumBusinessProvider)
                ) {
                    problems.push(format!(
                        "scenario C: {} must be an edge computing provider",
                        cont.offering
                    ));
                }
                if role_of(&app.offering) != Some(StakeholderRole::AppProvider) {
                    problems.push(format!(
                        "scenario C: {} must be an application provider",
                        app.offering
                    ));
                }
                if app.managing != cont.offering {
                    problems
                        .push("scenario C: the edge provider manages the application server".into());
                }
                let distinct = vi.offering != cont.offering
                    && vi.offering != app.offering
                    && cont.offering != app.offering;
                if !distinct {
                    problems.push("scenario C involves three distinct stakeholders".into());
                }
            }
        }
        problems
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Allow,
    Deny { reason: String },
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow)
    }

    pub fn deny_reason(&self) -> Option<&str> {
        match self {
            Decision::Allow => None,
            Decision::Deny { reason } => Some(reason),
        }
    }
}

/// Pure lookup in the scenario role matrix. Total: every (actor, operation,
/// class) triple gets a decision, unknown actors are denied.
pub fn authorize(
    topology: &Topology,
    scenario: &BusinessScenario,
    actor: &StakeholderId,
    operation: OperationKind,
    class: EntityClass,
) -> Decision {
    if topology.stakeholder(actor).is_none() {
        return Decision::Deny {
            reason: "unknown stakeholder".into(),
        };
    }
    let Some(assignment) = scenario.role(class) else {
        return Decision::Deny {
            reason: format!("scenario {} assigns no roles for {class}", scenario.variant),
        };
    };
    let holder = match operation {
        OperationKind::Offer => &assignment.offering,
        OperationKind::Manage => &assignment.managing,
    };
    if holder == actor {
        Decision::Allow
    } else {
        Decision::Deny {
            reason: format!(
                "{actor} may not {operation} {class} under scenario {}: {holder} holds that right",
                scenario.variant
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationState {
    Registered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EesRecord {
    pub id: EesId,
    pub continuum: ContinuumId,
    pub segment: SegmentId,
    pub capabilities: BTreeSet<String>,
    pub state: RegistrationState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EasRecord {
    pub id: EasId,
    pub ees: EesId,
    pub segment: SegmentId,
    pub capabilities: BTreeSet<String>,
    pub state: RegistrationState,
}

/// The configuration server singleton scoped to the virtual infrastructure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcsRecord {
    pub id: String,
    pub capabilities: BTreeSet<String>,
    pub state: RegistrationState,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EesRegistration {
    pub id: EesId,
    pub continuum: ContinuumId,
    pub segment: SegmentId,
    #[serde(default)]
    pub capabilities: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EasRegistration {
    pub id: EasId,
    pub ees: EesId,
    pub segment: SegmentId,
    #[serde(default)]
    pub capabilities: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EesCandidate {
    pub ees: EesId,
    pub segment: SegmentId,
    pub latency_ms: f64,
}

/// What a client in a zone receives from the configuration server: candidate
/// enablement servers ordered by model latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcsConfig {
    pub ecs: String,
    pub zone: ZoneId,
    pub candidates: Vec<EesCandidate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryFilter {
    #[serde(default)]
    pub capabilities: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_latency_ms: Option<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExposureError {
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("continuum {0} is not active")]
    ContinuumNotActive(ContinuumId),
    #[error("unknown continuum {0}")]
    UnknownContinuum(ContinuumId),
    #[error("unknown EES {0}")]
    UnknownEes(EesId),
    #[error("unknown zone {0}")]
    UnknownZone(ZoneId),
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
    #[error("EES {0} already registered")]
    DuplicateEes(EesId),
    #[error("EAS {0} already registered")]
    DuplicateEas(EasId),
}

/// Registry of enablement and application servers. Mutations are serialized
/// through `&mut self`; reads return snapshot-consistent clones.
#[derive(Debug, Clone)]
pub struct ExposureRegistry {
    ecs: EcsRecord,
    ees: BTreeMap<EesId, EesRecord>,
    eas: BTreeMap<EasId, EasRecord>,
}

impl Default for ExposureRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl ExposureRegistry {
    pub fn new() -> Self {
        Self {
            ecs: EcsRecord {
                id: "ecs".into(),
                capabilities: BTreeSet::from(["provisioning".to_string()]),
                state: RegistrationState::Registered,
            },
            ees: BTreeMap::new(),
            eas: BTreeMap::new(),
        }
    }

    /// Registers an enablement server into an active continuum. The caller
    /// must hold the continuum management right for the scenario.
    pub fn register_ees(
        &mut self,
        topology: &Topology,
        scenario: &BusinessScenario,
        actor: &StakeholderId,
        continuum_state: Option<ContinuumState>,
        registration: EesRegistration,
    ) -> Result<EesRecord, ExposureError> {
        if let Decision::Deny { reason } = authorize(
            topology,
            scenario,
            actor,
            OperationKind::Manage,
            EntityClass::Continuum,
        ) {
            return Err(ExposureError::Unauthorized(reason));
        }
        match continuum_state {
            None => return Err(ExposureError::UnknownContinuum(registration.continuum)),
            Some(ContinuumState::Active) => {}
            Some(_) => return Err(ExposureError::ContinuumNotActive(registration.continuum)),
        }
        if topology.segment(&registration.segment).is_none() {
            return Err(ExposureError::UnknownSegment(registration.segment));
        }
        if self.ees.contains_key(&registration.id) {
            return Err(ExposureError::DuplicateEes(registration.id));
        }
        let record = EesRecord {
            id: registration.id.clone(),
            continuum: registration.continuum,
            segment: registration.segment,
            capabilities: registration.capabilities,
            state: RegistrationState::Registered,
        };
        self.ees.insert(registration.id, record.clone());
        Ok(record)
    }

    /// Registers an application server under a registered EES. The caller must
    /// hold the application-server management right for the scenario.
    pub fn register_eas(
        &mut self,
        topology: &Topology,
        scenario: &BusinessScenario,
        actor: &StakeholderId,
        registration: EasRegistration,
    ) -> Result<EasRecord, ExposureError> {
        if let Decision::Deny { reason } = authorize(
            topology,
            scenario,
            actor,
            OperationKind::Manage,
            EntityClass::ApplicationServer,
        ) {
            return Err(ExposureError::Unauthorized(reason));
        }
        if !self.ees.contains_key(&registration.ees) {
            return Err(ExposureError::UnknownEes(registration.ees));
        }
        if topology.segment(&registration.segment).is_none() {
            return Err(ExposureError::UnknownSegment(registration.segment));
        }
        if self.eas.contains_key(&registration.id) {
            return Err(ExposureError::DuplicateEas(registration.id));
        }
        let record = EasRecord {
            id: registration.id.clone(),
            ees: registration.ees,
            segment: registration.segment,
            capabilities: registration.capabilities,
            state: RegistrationState::Registered,
        };
        self.eas.insert(registration.id, record.clone());
        Ok(record)
    }

    /// Removes an EES and, to preserve referential integrity, every EAS
    /// registered under it. Returns the removed EAS ids.
    pub fn deregister_ees(&mut self, id: &EesId) -> Result<Vec<EasId>, ExposureError> {
        if self.ees.remove(id).is_none() {
            return Err(ExposureError::UnknownEes(id.clone()));
        }
        let orphaned: Vec<EasId> = self
            .eas
            .values()
            .filter(|eas| &eas.ees == id)
            .map(|eas| eas.id.clone())
            .collect();
        for eas in &orphaned {
            self.eas.remove(eas);
        }
        Ok(orphaned)
    }

    /// Client provisioning: every registered EES reachable from the zone,
    /// ordered by model latency then id.
    pub fn provision_client(
        &self,
        topology: &Topology,
        zone: &ZoneId,
    ) -> Result<EcsConfig, ExposureError> {
        if topology.zone(zone).is_none() {
            return Err(ExposureError::UnknownZone(zone.clone()));
        }
        let mut candidates = Vec::new();
        for record in self.ees.values() {
            let latency = topology
                .zone_latency(zone, &record.segment)
                .map_err(|_| ExposureError::UnknownSegment(record.segment.clone()))?;
            if let Some(latency_ms) = latency {
                candidates.push(EesCandidate {
                    ees: record.id.clone(),
                    segment: record.segment.clone(),
                    latency_ms,
                });
            }
        }
        candidates.sort_by(|a, b| {
            a.latency_ms
                .partial_cmp(&b.latency_ms)
                .expect("latencies are finite")
                .then_with(|| a.ees.cmp(&b.ees))
        });
        Ok(EcsConfig {
            ecs: self.ecs.id.clone(),
            zone: zone.clone(),
            candidates,
        })
    }

    /// All and only the EAS under an EES matching every filter predicate, in
    /// id order. The latency filter bounds the EES-to-EAS path latency.
    pub fn discover_eas(
        &self,
        topology: &Topology,
        ees: &EesId,
        filter: &DiscoveryFilter,
    ) -> Result<Vec<EasRecord>, ExposureError> {
        let ees_record = self
            .ees
            .get(ees)
            .ok_or_else(|| ExposureError::UnknownEes(ees.clone()))?;
        let mut matches = Vec::new();
        for eas in self.eas.values() {
            if &eas.ees != ees {
                continue;
            }
            if !filter.capabilities.is_subset(&eas.capabilities) {
                continue;
            }
            if let Some(bound) = filter.max_latency_ms {
                match topology
                    .path_latency(&ees_record.segment, &eas.segment)
                    .map_err(|_| ExposureError::UnknownSegment(eas.segment.clone()))?
                {
                    Some(latency) if latency <= bound => {}
                    _ => continue,
                }
            }
            matches.push(eas.clone());
        }
        Ok(matches)
    }

    pub fn ees(&self, id: &EesId) -> Option<&EesRecord> {
        self.ees.get(id)
    }

    pub fn eas(&self, id: &EasId) -> Option<&EasRecord> {
        self.eas.get(id)
    }

    pub fn eas_records(&self) -> impl Iterator<Item = &EasRecord> {
        self.eas.values()
    }

    pub fn ecs(&self) -> &EcsRecord {
        &self.ecs
    }
}


#[cfg(test)]
mod tests {
    use super::testkit::{scenario_c, topology};
    use super::*;

    fn ees_reg(id: &str, segment: &str) -> EesRegistration {
        EesRegistration {
            id: id.into(),
            continuum: "c1".into(),
            segment: segment.into(),
            capabilities: BTreeSet::from(["exposure".to_string()]),
        }
    }

    #[test]
    fn scenario_c_validates() {
        assert!(scenario_c().validate(&topology()).is_empty());
    }

    #[test]
    fn continuum_manager_registers_ees() {
        let t = topology();
        let s = scenario_c();
        let mut reg = ExposureRegistry::new();
        let record = reg
            .register_ees(
                &t,
                &s,
                &"edge".into(),
                Some(ContinuumState::Active),
                ees_reg("ees1", "s-near"),
            )
            .unwrap();
        assert_eq!(record.state, RegistrationState::Registered);
    }

    #[test]
    fn app_provider_cannot_register_ees_under_scenario_c() {
        let t = topology();
        let s = scenario_c();
        let mut reg = ExposureRegistry::new();
        let err = reg
            .register_ees(
                &t,
                &s,
                &"app".into(),
                Some(ContinuumState::Active),
                ees_reg("ees1", "s-near"),
            )
            .unwrap_err();
        assert!(matches!(err, ExposureError::Unauthorized(_)));
    }

    #[test]
    fn registering_against_terminated_continuum_fails() {
        let t = topology();
        let s = scenario_c();
        let mut reg = ExposureRegistry::new();
        let err = reg
            .register_ees(
                &t,
                &s,
                &"edge".into(),
                Some(ContinuumState::Terminated),
                ees_reg("ees1", "s-near"),
            )
            .unwrap_err();
        assert!(matches!(err, ExposureError::ContinuumNotActive(_)));
    }

    #[test]
    fn eas_requires_registered_ees_and_manager_rights() {
        let t = topology();
        let s = scenario_c();
        let mut reg = ExposureRegistry::new();
        let eas = EasRegistration {
            id: "eas1".into(),
            ees: "ees1".into(),
            segment: "s-near".into(),
            capabilities: BTreeSet::new(),
        };
        assert!(matches!(
            reg.register_eas(&t, &s, &"edge".into(), eas.clone()),
            Err(ExposureError::UnknownEes(_))
        ));
        reg.register_ees(
            &t,
            &s,
            &"edge".into(),
            Some(ContinuumState::Active),
            ees_reg("ees1", "s-near"),
        )
        .unwrap();
        // the app provider offers but does not manage the app server under C
        assert!(matches!(
            reg.register_eas(&t, &s, &"app".into(), eas.clone()),
            Err(ExposureError::Unauthorized(_))
        ));
        reg.register_eas(&t, &s, &"edge".into(), eas).unwrap();
    }

    #[test]
    fn provisioning_orders_by_latency_then_id() {
        let t = topology();
        let s = scenario_c();
        let mut reg = ExposureRegistry::new();
        for (id, seg) in [("ees-far", "s-far"), ("ees-near", "s-near"), ("ees-b", "s-near")] {
            reg.register_ees(
                &t,
                &s,
                &"edge".into(),
                Some(ContinuumState::Active),
                ees_reg(id, seg),
            )
            .unwrap();
        }
        let config = reg.provision_client(&t, &"z1".into()).unwrap();
        let ids: Vec<&str> = config.candidates.iter().map(|c| c.ees.as_str()).collect();
        // from z1: s-near at 5ms (ees-b and ees-near tie, id order), s-far at 20ms
        assert_eq!(ids, vec!["ees-b", "ees-near", "ees-far"]);
        assert_eq!(config.candidates[2].latency_ms, 20.0);
    }

    #[test]
    fn provisioning_with_no_ees_is_empty() {
        let t = topology();
        let reg = ExposureRegistry::new();
        let config = reg.provision_client(&t, &"z1".into()).unwrap();
        assert!(config.candidates.is_empty());
        assert!(matches!(
            reg.provision_client(&t, &"z-missing".into()),
            Err(ExposureError::UnknownZone(_))
        ));
    }

    #[test]
    fn discovery_filters_capabilities_and_latency() {
        let t = topology();
        let s = scenario_c();
        let mut reg = ExposureRegistry::new();
        reg.register_ees(
            &t,
            &s,
            &"edge".into(),
            Some(ContinuumState::Active),
            ees_reg("ees1", "s-near"),
        )
        .unwrap();
        for (id, seg, caps) in [
            ("eas-a", "s-near", vec!["video"]),
            ("eas-b", "s-far", vec!["video", "ml"]),
            ("eas-c", "s-far", vec!["ml"]),
        ] {
            reg.register_eas(
                &t,
                &s,
                &"edge".into(),
                EasRegistration {
                    id: id.into(),
                    ees: "ees1".into(),
                    segment: seg.into(),
                    capabilities: caps.into_iter().map(String::from).collect(),
                },
            )
            .unwrap();
        }

        let all = reg
            .discover_eas(&t, &"ees1".into(), &DiscoveryFilter::default())
            .unwrap();
        assert_eq!(all.len(), 3);

        let video = reg
            .discover_eas(
                &t,
                &"ees1".into(),
                &DiscoveryFilter {
                    capabilities: BTreeSet::from(["video".to_string()]),
                    max_latency_ms: None,
                },
            )
            .unwrap();
        assert_eq!(video.len(), 2);

        // ees1 sits on s-near; s-far is 15ms away
        let close = reg
            .discover_eas(
                &t,
                &"ees1".into(),
                &DiscoveryFilter {
                    capabilities: BTreeSet::new(),
                    max_latency_ms: Some(10.0),
                },
            )
            .unwrap();
        assert_eq!(close.len(), 1);
        assert_eq!(close[0].id.as_str(), "eas-a");
    }

    #[test]
    fn discovery_matches_brute_force_scan() {
        let t = topology();
        let s = scenario_c();
        let mut reg = ExposureRegistry::new();
        reg.register_ees(
            &t,
            &s,
            &"edge".into(),
            Some(ContinuumState::Active),
            ees_reg("ees1", "s-near"),
        )
        .unwrap();
        let caps_pool = ["video", "ml", "cache", "gpu"];
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(13);
        for i in 0..30 {
            let caps: BTreeSet<String> = caps_pool
                .iter()
                .filter(|_| rng.gen_bool(0.5))
                .map(|s| s.to_string())
                .collect();
            let seg = if rng.gen_bool(0.5) { "s-near" } else { "s-far" };
            reg.register_eas(
                &t,
                &s,
                &"edge".into(),
                EasRegistration {
                    id: format!("eas-{i:02}").into(),
                    ees: "ees1".into(),
                    segment: seg.into(),
                    capabilities: caps,
                },
            )
            .unwrap();
        }
        for _ in 0..20 {
            let filter = DiscoveryFilter {
                capabilities: caps_pool
                    .iter()
                    .filter(|_| rng.gen_bool(0.3))
                    .map(|s| s.to_string())
                    .collect(),
                max_latency_ms: if rng.gen_bool(0.5) { Some(10.0) } else { None },
            };
            let got = reg.discover_eas(&t, &"ees1".into(), &filter).unwrap();
            let expected: Vec<EasId> = reg
                .eas_records()
                .filter(|eas| filter.capabilities.is_subset(&eas.capabilities))
                .filter(|eas| {
                    filter.max_latency_ms.map_or(true, |bound| {
                        t.path_latency(&"s-near".into(), &eas.segment)
                            .unwrap()
                            .map_or(false, |l| l <= bound)
                    })
                })
                .map(|eas| eas.id.clone())
                .collect();
            assert_eq!(
                got.iter().map(|e| e.id.clone()).collect::<Vec<_>>(),
                expected
            );
        }
    }

    #[test]
    fn deregistering_an_ees_cascades_to_its_eas() {
        let t = topology();
        let s = scenario_c();
        let mut reg = ExposureRegistry::new();
        reg.register_ees(
            &t,
            &s,
            &"edge".into(),
            Some(ContinuumState::Active),
            ees_reg("ees1", "s-near"),
        )
        .unwrap();
        reg.register_eas(
            &t,
            &s,
            &"edge".into(),
            EasRegistration {
                id: "eas1".into(),
                ees: "ees1".into(),
                segment: "s-near".into(),
                capabilities: BTreeSet::new(),
            },
        )
        .unwrap();
        let orphaned = reg.deregister_ees(&"ees1".into()).unwrap();
        assert_eq!(orphaned, vec![EasId::new("eas1")]);
        assert!(reg.eas_records().all(|eas| reg.ees(&eas.ees).is_some()));
    }

    #[test]
    fn authorize_is_total_and_denies_unknown_actors() {
        let t = topology();
        let s = scenario_c();
        for actor in ["mno", "edge", "app", "ghost"] {
            for op in [OperationKind::Offer, OperationKind::Manage] {
                for class in [
                    EntityClass::VirtualInfrastructure,
                    EntityClass::Continuum,
                    EntityClass::ApplicationServer,
                ] {
                    let _ = authorize(&t, &s, &actor.into(), op, class);
                }
            }
        }
        let unknown = authorize(
            &t,
            &s,
            &"ghost".into(),
            OperationKind::Offer,
            EntityClass::Continuum,
        );
        assert_eq!(unknown.deny_reason(), Some("unknown stakeholder"));
    }

    #[test]
    fn scenario_c_denies_mno_continuum_management() {
        let t = topology();
        let s = scenario_c();
        let decision = authorize(
            &t,
            &s,
            &"mno".into(),
            OperationKind::Manage,
            EntityClass::Continuum,
        );
        assert!(!decision.is_allow());
        assert!(decision
            .deny_reason()
            .unwrap()
            .contains("edge holds that right"));
    }
}
