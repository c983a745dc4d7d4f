//! Northbound JSON-over-HTTP API mounted over a live engine.
//!
//! Every request carries an `X-Stakeholder-Id` header; operations are gated
//! by the business scenario's authorization matrix and denials answer 403
//! with the reason string.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use aiora_core::edgeapp::{DiscoveryFilter, EasRegistration, EesRegistration, ExposureError};
use aiora_core::ids::{ContinuumId, EesId, StakeholderId, ZoneId};
use aiora_core::lifecycle::{ContinuumRequest, LifecycleError};
use aiora_core::placement::{ApplicationDescriptor, ObjectiveWeights, PlacementError};
use aiora_core::sim::SimEngine;

pub type SharedEngine = Arc<Mutex<SimEngine>>;

pub fn router(engine: SharedEngine) -> Router {
    Router::new()
        .route("/continuums", post(create_continuum))
        .route("/continuums/:id/apps", post(deploy_application))
        .route("/ees", post(register_ees))
        .route("/eas", post(register_eas))
        .route("/ecs/provision", get(provision_client))
        .route("/eas", get(discover_eas))
        .route("/twin/snapshot", get(twin_snapshot))
        .route("/broker/utilization", get(broker_utilization))
        .with_state(engine)
}

fn error_body(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn actor_from(headers: &HeaderMap) -> Result<StakeholderId, Response> {
    match headers.get("X-Stakeholder-Id").and_then(|v| v.to_str().ok()) {
        Some(actor) if !actor.is_empty() => Ok(StakeholderId::new(actor)),
        _ => Err(error_body(
            StatusCode::BAD_REQUEST,
            "missing X-Stakeholder-Id header",
        )),
    }
}

/// Read endpoints are open to any stakeholder known to the topology.
fn require_known(engine: &SimEngine, actor: &StakeholderId) -> Result<(), Response> {
    if engine.is_known_stakeholder(actor) {
        Ok(())
    } else {
        Err(error_body(StatusCode::FORBIDDEN, "unknown stakeholder"))
    }
}

fn lifecycle_error(err: LifecycleError) -> Response {
    let status = match &err {
        LifecycleError::UnauthorizedScenario(_) => StatusCode::FORBIDDEN,
        LifecycleError::DuplicateContinuum(_) | LifecycleError::DuplicateApplication(_) => {
            StatusCode::CONFLICT
        }
        LifecycleError::ContinuumNotActive(_) | LifecycleError::MigrationInProgress(_) => {
            StatusCode::CONFLICT
        }
        LifecycleError::Infeasible { .. } | LifecycleError::InsufficientQuota(_) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        LifecycleError::UnknownContinuum(_)
        | LifecycleError::UnknownApplication(_)
        | LifecycleError::UnknownComponent(_) => StatusCode::NOT_FOUND,
        LifecycleError::Placement(PlacementError::Infeasible { .. }) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        _ => StatusCode::BAD_REQUEST,
    };
    let reason = match &err {
        LifecycleError::UnauthorizedScenario(reason) => reason.clone(),
        other => other.to_string(),
    };
    error_body(status, reason)
}

fn exposure_error(err: ExposureError) -> Response {
    let status = match &err {
        ExposureError::Unauthorized(_) => StatusCode::FORBIDDEN,
        ExposureError::ContinuumNotActive(_)
        | ExposureError::DuplicateEes(_)
        | ExposureError::DuplicateEas(_) => StatusCode::CONFLICT,
        ExposureError::UnknownContinuum(_)
        | ExposureError::UnknownEes(_)
        | ExposureError::UnknownZone(_)
        | ExposureError::UnknownSegment(_) => StatusCode::NOT_FOUND,
    };
    let reason = match &err {
        ExposureError::Unauthorized(reason) => reason.clone(),
        other => other.to_string(),
    };
    error_body(status, reason)
}

async fn create_continuum(
    State(engine): State<SharedEngine>,
    headers: HeaderMap,
    Json(request): Json<ContinuumRequest>,
) -> Response {
    let actor = match actor_from(&headers) {
        Ok(actor) => actor,
        Err(response) => return response,
    };
    let mut engine = engine.lock().expect("engine lock");
    match engine.create_continuum_as(&actor, request) {
        Ok(continuum) => (StatusCode::CREATED, Json(continuum)).into_response(),
        Err(err) => lifecycle_error(err),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeployRequest {
    descriptor: ApplicationDescriptor,
    weights: ObjectiveWeights,
}

async fn deploy_application(
    State(engine): State<SharedEngine>,
    Path(continuum): Path<String>,
    headers: HeaderMap,
    Json(request): Json<DeployRequest>,
) -> Response {
    let actor = match actor_from(&headers) {
        Ok(actor) => actor,
        Err(response) => return response,
    };
    let mut engine = engine.lock().expect("engine lock");
    match engine.deploy_application_as(
        &actor,
        &ContinuumId::new(continuum),
        request.descriptor,
        request.weights,
    ) {
        Ok(record) => (StatusCode::CREATED, Json(record)).into_response(),
        Err(err) => lifecycle_error(err),
    }
}

async fn register_ees(
    State(engine): State<SharedEngine>,
    headers: HeaderMap,
    Json(registration): Json<EesRegistration>,
) -> Response {
    let actor = match actor_from(&headers) {
        Ok(actor) => actor,
        Err(response) => return response,
    };
    let mut engine = engine.lock().expect("engine lock");
    match engine.register_ees_as(&actor, registration) {
        Ok(record) => (StatusCode::CREATED, Json(record)).into_response(),
        Err(err) => exposure_error(err),
    }
}

async fn register_eas(
    State(engine): State<SharedEngine>,
    headers: HeaderMap,
    Json(registration): Json<EasRegistration>,
) -> Response {
    let actor = match actor_from(&headers) {
        Ok(actor) => actor,
        Err(response) => return response,
    };
    let mut engine = engine.lock().expect("engine lock");
    match engine.register_eas_as(&actor, registration) {
        Ok(record) => (StatusCode::CREATED, Json(record)).into_response(),
        Err(err) => exposure_error(err),
    }
}

#[derive(Debug, Deserialize)]
struct ProvisionQuery {
    zone: String,
}

async fn provision_client(
    State(engine): State<SharedEngine>,
    headers: HeaderMap,
    Query(query): Query<ProvisionQuery>,
) -> Response {
    let actor = match actor_from(&headers) {
        Ok(actor) => actor,
        Err(response) => return response,
    };
    let engine = engine.lock().expect("engine lock");
    if let Err(response) = require_known(&engine, &actor) {
        return response;
    }
    match engine.provision_client(&ZoneId::new(query.zone)) {
        Ok(config) => (StatusCode::OK, Json(config)).into_response(),
        Err(err) => exposure_error(err),
    }
}

#[derive(Debug, Deserialize)]
struct DiscoveryQuery {
    ees: String,
    capability: Option<String>,
    #[serde(rename = "maxLatencyMs")]
    max_latency_ms: Option<f64>,
}

async fn discover_eas(
    State(engine): State<SharedEngine>,
    headers: HeaderMap,
    Query(query): Query<DiscoveryQuery>,
) -> Response {
    let actor = match actor_from(&headers) {
        Ok(actor) => actor,
        Err(response) => return response,
    };
    let engine = engine.lock().expect("engine lock");
    if let Err(response) = require_known(&engine, &actor) {
        return response;
    }
    let capabilities: BTreeSet<String> = query
        .capability
        .map(|list| {
            list.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        })
        .unwrap_or_default();
    let filter = DiscoveryFilter {
        capabilities,
        max_latency_ms: query.max_latency_ms,
    };
    match engine.discover_eas(&EesId::new(query.ees), &filter) {
        Ok(records) => (StatusCode::OK, Json(records)).into_response(),
        Err(err) => exposure_error(err),
    }
}

async fn twin_snapshot(State(engine): State<SharedEngine>, headers: HeaderMap) -> Response {
    let actor = match actor_from(&headers) {
        Ok(actor) => actor,
        Err(response) => return response,
    };
    let mut engine = engine.lock().expect("engine lock");
    if let Err(response) = require_known(&engine, &actor) {
        return response;
    }
    match engine.twin_snapshot_now() {
        Ok(snapshot) => (StatusCode::OK, Json(snapshot)).into_response(),
        Err(err) => error_body(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()),
    }
}

async fn broker_utilization(State(engine): State<SharedEngine>, headers: HeaderMap) -> Response {
    let actor = match actor_from(&headers) {
        Ok(actor) => actor,
        Err(response) => return response,
    };
    let engine = engine.lock().expect("engine lock");
    if let Err(response) = require_known(&engine, &actor) {
        return response;
    }
    (StatusCode::OK, Json(engine.broker_utilization())).into_response()
}
