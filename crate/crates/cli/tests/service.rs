use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use futures::StreamExt;
use handlefield::autoencoder::{Model, ModelConfig};
use handlefield::dataset::{generate_dataset, Dataset, GenerateConfig};
use handlefield::editing::{extract_mesh, ProjectionConfig};
use handlefield::geometry::{ScalarGrid, ShapeFamily};
use handlefield_cli::service::{router, AppState, MeshPayload, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

const RES: usize = 16;

/// A tiny untrained model whose output bias is shifted so shape 0 decodes to
/// a field with a zero crossing inside the grid.
fn fixture() -> (Model, Dataset) {
    let cfg = GenerateConfig { n_uniform: 128, n_surface: 128, handle_count: 4, ..GenerateConfig::new(ShapeFamily::ProcTables, 3, 11) };
    let ds = generate_dataset(&cfg).unwrap();
    let mut model = Model::new(ModelConfig::tiny(4), 5).unwrap();
    let code = model.encode(&ds.shapes[0].sampling.uniform).unwrap();
    let mut v = model.decode_code(&code, &ScalarGrid::positions(RES)).unwrap();
    v.sort_by(f64::total_cmp);
    let median = v[v.len() / 2];
    let out_b = *model.decoder.param_ids().last().unwrap();
    model.store.block_mut(out_b).value.mapv_inplace(|b| b - median);
    (model, ds)
}

fn service() -> (Router, Model, Dataset) {
    let (model, ds) = fixture();
    let cfg = ServiceConfig {
        resolution: RES,
        projection: ProjectionConfig { reencode_sample_count: 64, ..ProjectionConfig::default() },
        max_sessions: 3,
        ..ServiceConfig::default()
    };
    (router(AppState::new(model.clone(), ds.clone(), cfg)), model, ds)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() })
}

async fn open(app: &Router, shape_id: u64) -> String {
    let (status, v) = call(app, "POST", "/session", Some(json!({ "shape_id": shape_id }))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_and_shape_listing() {
    let (app, _, ds) = service();
    let (status, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["handle_count"], 4);
    let (_, shapes) = call(&app, "GET", "/shapes", None).await;
    let ids: Vec<u64> = shapes.as_array().unwrap().iter().map(|s| s["shape_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, ds.ids());
}

#[tokio::test]
async fn session_mesh_equals_offline_extraction() {
    let (app, model, ds) = service();
    let id = open(&app, ds.shapes[0].shape_id).await;
    let (status, mesh) = call(&app, "GET", &format!("/session/{id}/mesh"), None).await;
    assert_eq!(status, StatusCode::OK);
    let payload: MeshPayload = serde_json::from_value(mesh).unwrap();
    let code = model.encode(&ds.shapes[0].sampling.uniform).unwrap();
    let offline = MeshPayload::from_mesh(&extract_mesh(&model, &code, RES, 0.0).unwrap());
    assert!(!payload.indices.is_empty());
    assert_eq!(payload, offline);
    let (_, session) = call(&app, "GET", &format!("/session/{id}"), None).await;
    assert_eq!(session["last_mesh_hash"], offline.hash);
}

#[tokio::test]
async fn errors_carry_codes_and_statuses() {
    let (app, _, ds) = service();
    let (status, v) = call(&app, "GET", "/session/s99", None).await;
    assert_eq!((status, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("session_not_found")));
    let (status, v) = call(&app, "POST", "/session", Some(json!({ "shape_id": 12345 }))).await;
    assert_eq!((status, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("shape_not_found")));

    let id = open(&app, ds.shapes[0].shape_id).await;
    let edit = format!("/session/{id}/edit");
    let (status, v) = call(&app, "POST", &edit, Some(json!({ "edits": [] }))).await;
    assert_eq!((status, v["code"].as_str()), (StatusCode::BAD_REQUEST, Some("no_edits")));
    let (status, _) = call(&app, "POST", &edit, Some(json!({ "edits": [{ "handle": 9, "target": [0, 0, 0] }] }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", &format!("/session/{id}/mesh?level=0.2"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, v) = call(&app, "POST", &edit, Some(json!({ "nonsense": true }))).await;
    assert!(status.is_client_error());
    assert_eq!(v["code"], "invalid_body");

    // The limit is three sessions.
    open(&app, ds.shapes[0].shape_id).await;
    open(&app, ds.shapes[0].shape_id).await;
    let (status, v) = call(&app, "POST", "/session", Some(json!({ "shape_id": ds.shapes[0].shape_id }))).await;
    assert_eq!((status, v["code"].as_str()), (StatusCode::SERVICE_UNAVAILABLE, Some("session_limit")));
    let (status, _) = call(&app, "DELETE", &format!("/session/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    open(&app, ds.shapes[0].shape_id).await;
}

async fn next_event<S>(ws: &mut S) -> Value
where
    S: futures::Stream<Item = Result<tokio_tungstenite::tungstenite::Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        if let tokio_tungstenite::tungstenite::Message::Text(t) = ws.next().await.unwrap().unwrap() {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn edit_rounds_stream_in_order() {
    let (app, _, ds) = service();
    let id = open(&app, ds.shapes[0].shape_id).await;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = app.clone();
    tokio::spawn(async move { axum::serve(listener, server).await.unwrap() });
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/session/{id}/stream")).await.unwrap();
    assert_eq!(next_event(&mut ws).await["type"], "state");

    let (status, resp) = call(
        &app,
        "POST",
        &format!("/session/{id}/edit?rounds=3"),
        Some(json!({ "edits": [{ "handle": 1, "target": [0.3, 0.3, 0.6] }] })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{resp}");
    let rounds = resp["rounds"].as_u64().unwrap();
    assert!((1..=3).contains(&rounds));
    for r in 0..=rounds {
        let ev = next_event(&mut ws).await;
        assert_eq!((ev["type"].as_str(), ev["round"].as_u64()), (Some("round"), Some(r)));
    }
    let fin = next_event(&mut ws).await;
    assert_eq!(fin["type"], "final");
    assert_eq!(fin["round"], rounds);
    assert_eq!(fin["mesh"]["hash"], resp["mesh_hash"]);
    assert_eq!(resp["session"]["history"].as_array().unwrap().len() as u64, rounds + 1);
}

#[tokio::test]
async fn sessions_are_isolated_and_replayable() {
    let (app, model, ds) = service();
    let shape = ds.shapes[0].shape_id;
    let (a, b, c) = (open(&app, shape).await, open(&app, shape).await, open(&app, shape).await);
    let before = call(&app, "GET", &format!("/session/{c}"), None).await.1;
    let body = json!({ "edits": [{ "handle": 0, "target": [0.2, -0.1, 0.5] }], "rounds": 2 });
    let ra = call(&app, "POST", &format!("/session/{a}/edit"), Some(body.clone())).await.1;
    let rb = call(&app, "POST", &format!("/session/{b}/edit"), Some(body)).await.1;
    assert_eq!(ra["session"]["handles"], rb["session"]["handles"]);
    assert_eq!(ra["mesh_hash"], rb["mesh_hash"]);
    assert_eq!(call(&app, "GET", &format!("/session/{c}"), None).await.1, before);

    let donor = ds.shapes[2].shape_id;
    let (status, v) = call(&app, "POST", &format!("/session/{c}/style"), Some(json!({ "donor_shape_id": donor }))).await;
    assert_eq!(status, StatusCode::OK);
    let expected = model.encode_style(&ds.shapes[2].sampling.uniform).unwrap();
    assert_eq!(v["style"], json!(expected));
    assert_eq!(v["handles"], before["handles"]);
}

#[tokio::test]
async fn segment_returns_one_label_per_sample() {
    let (app, _, ds) = service();
    let id = open(&app, ds.shapes[1].shape_id).await;
    let (status, v) =
        call(&app, "POST", &format!("/session/{id}/segment"), Some(json!({ "k": 2, "samples": 30, "repetitions": 4 }))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["labels"].as_array().unwrap().len(), 30);
    assert_eq!(v["samples"].as_array().unwrap().len(), 30);
}
