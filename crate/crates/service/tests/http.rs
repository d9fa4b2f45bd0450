use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use softspread::export::read_events;
use softspread::graph::{GraphKind, Normalization};
use softspread::session::{session_for_dataset, SessionConfig};
use softspread::sim::{make_two_moons, rng_stream, FeedbackOracle, DEFAULT_SHARPNESS};
use softspread::solver::SolverConfig;
use softspread_service::{router, ServiceConfig, SessionStore};
use tempfile::TempDir;
use tower::ServiceExt;

fn start(config: ServiceConfig) -> (Router, Arc<SessionStore>) {
    let store = Arc::new(SessionStore::open(config).unwrap());
    (router(store.clone()), store)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn moons_features(n: usize, seed: u64) -> (Vec<String>, Vec<Vec<f64>>) {
    let ds = make_two_moons(n, 0.1, DEFAULT_SHARPNESS, seed).unwrap();
    (ds.ids().to_vec(), ds.features().iter_rows().map(|r| r.to_vec()).collect())
}

fn moons_request(n: usize, k: usize) -> Value {
    let (ids, features) = moons_features(n, 7);
    json!({
        "dataset": {"inline": {"ids": ids, "features": features}},
        "graph": {"kind": "knn", "k": k},
        "alpha": 0.9,
        "classes": 2,
    })
}

async fn create(app: &Router, body: Value) -> String {
    let (status, v) = call(app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn annotate(app: &Router, id: &str, point: &str, class: usize) -> (StatusCode, Value) {
    call(
        app,
        Method::POST,
        &format!("/sessions/{id}/annotations"),
        Some(json!({"point_id": point, "class": class})),
    )
    .await
}

async fn digest(app: &Router, id: &str) -> String {
    let (_, v) = call(app, Method::GET, &format!("/sessions/{id}"), None).await;
    v["digest"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn create_validates_and_returns_distinct_ids() {
    let (app, _) = start(ServiceConfig::default());
    let a = create(&app, moons_request(200, 5)).await;
    let b = create(&app, moons_request(200, 5)).await;
    assert_ne!(a, b);

    let (status, v) = call(&app, Method::POST, "/sessions", Some(moons_request(20, 20))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("k = 20"), "{v}");

    let mut no_classes = moons_request(50, 5);
    no_classes.as_object_mut().unwrap().remove("classes");
    let (status, _) = call(&app, Method::POST, "/sessions", Some(no_classes)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let mut bad_alpha = moons_request(50, 5);
    bad_alpha["alpha"] = json!(1.0);
    let (status, _) = call(&app, Method::POST, "/sessions", Some(bad_alpha)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn capacity_limits_reject_with_507() {
    let (app, _) = start(ServiceConfig {
        max_points: 100,
        max_sessions: 1,
        ..ServiceConfig::default()
    });
    let (status, _) = call(&app, Method::POST, "/sessions", Some(moons_request(101, 5))).await;
    assert_eq!(status, StatusCode::INSUFFICIENT_STORAGE);
    create(&app, moons_request(100, 5)).await;
    let (status, _) = call(&app, Method::POST, "/sessions", Some(moons_request(50, 5))).await;
    assert_eq!(status, StatusCode::INSUFFICIENT_STORAGE);
}

#[tokio::test]
async fn path_datasets_stay_inside_the_root() {
    let dir = TempDir::new().unwrap();
    let ds = make_two_moons(100, 0.1, DEFAULT_SHARPNESS, 1).unwrap();
    softspread::dataset::save_dataset(&ds, &dir.path().join("moons.csv"), softspread::dataset::DatasetFormat::DelimitedText)
        .unwrap();
    let (closed, _) = start(ServiceConfig::default());
    let body = json!({"dataset": {"path": "moons.csv"}, "graph": {"kind": "knn", "k": 5}});
    let (status, _) = call(&closed, Method::POST, "/sessions", Some(body.clone())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (open, _) = start(ServiceConfig {
        dataset_root: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    });
    // the class count comes from the label columns
    let (status, v) = call(&open, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    assert_eq!(v["classes"], 2);
    let escape = json!({"dataset": {"path": "../moons.csv"}, "classes": 2});
    let (status, _) = call(&open, Method::POST, "/sessions", Some(escape)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn annotations_are_sequenced_and_validated() {
    let (app, _) = start(ServiceConfig::default());
    let id = create(&app, moons_request(300, 5)).await;

    let (status, first) = annotate(&app, &id, "17", 0).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    let p: Vec<f64> = serde_json::from_value(first["probabilities"].clone()).unwrap();
    assert!(p[0] > p[1]);
    assert!(first["changed_points"].as_u64().unwrap() >= 1);
    let (_, second) = annotate(&app, &id, "17", 0).await;
    assert_eq!(second["sequence"].as_u64().unwrap(), first["sequence"].as_u64().unwrap() + 1);

    let (status, _) = annotate(&app, &id, "no-such-point", 0).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = annotate(&app, "no-such-session", "17", 0).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = annotate(&app, &id, "17", 2).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (_, events) = call(&app, Method::GET, &format!("/sessions/{id}/events"), None).await;
    let seqs: Vec<u64> = events.as_array().unwrap().iter().map(|e| e["sequence"].as_u64().unwrap()).collect();
    assert_eq!(seqs, vec![0, 1]);
    assert_eq!(events[0]["source"], "human");
}

#[tokio::test]
async fn busy_writer_gives_conflict() {
    let (app, store) = start(ServiceConfig::default());
    let id = create(&app, moons_request(100, 5)).await;
    let entry = store.get(&id).unwrap();
    let guard = entry.try_writer().unwrap();
    let (status, _) = annotate(&app, &id, "3", 1).await;
    assert_eq!(status, StatusCode::CONFLICT);
    // reads are not blocked by a held writer slot
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}/estimates"), None).await;
    assert_eq!(status, StatusCode::OK);
    drop(guard);
    let (status, v) = annotate(&app, &id, "3", 1).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["sequence"], 0);
}

#[tokio::test]
async fn fresh_estimates_are_uniform_and_paged() {
    let (app, _) = start(ServiceConfig::default());
    let id = create(&app, moons_request(120, 5)).await;
    let (status, v) = call(&app, Method::GET, &format!("/sessions/{id}/estimates"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["total"], 120);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 120);
    for r in rows {
        assert_eq!(r["probabilities"], json!([0.5, 0.5]));
        assert_eq!(r["received_mass"], 0.0);
    }
    let (_, page) = call(&app, Method::GET, &format!("/sessions/{id}/estimates?offset=100&limit=50"), None).await;
    assert_eq!(page["offset"], 100);
    assert_eq!(page["rows"].as_array().unwrap().len(), 20);
    assert_eq!(page["rows"][0]["id"], "100");
    let (_, past) = call(&app, Method::GET, &format!("/sessions/{id}/estimates?offset=500"), None).await;
    assert!(past["rows"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn uncertainty_over_the_wire() {
    let (app, _) = start(ServiceConfig::default());
    let id = create(&app, moons_request(100, 5)).await;
    let (status, v) = call(&app, Method::GET, &format!("/sessions/{id}/uncertainty?method=wilson&z=1.96"), None).await;
    assert_eq!(status, StatusCode::OK);
    for row in v["rows"].as_array().unwrap() {
        for ci in row["intervals"].as_array().unwrap() {
            assert_eq!((ci["lower"].as_f64(), ci["upper"].as_f64()), (Some(0.0), Some(1.0)));
            assert_eq!(ci["vacuous"], true);
        }
    }
    // ten agreeing annotations on one point: floor(N) = 10 virtual trials
    for _ in 0..10 {
        annotate(&app, &id, "0", 0).await;
    }
    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}/uncertainty?limit=1"), None).await;
    let ci = &v["rows"][0]["intervals"][0];
    assert_eq!(v["rows"][0]["id"], "0");
    assert!(ci["lower"].as_f64().unwrap() > 0.7);
    assert_eq!(ci["upper"].as_f64().unwrap(), 1.0);
    assert_eq!(ci["method"], "wilson");

    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}/uncertainty?method=hoeffding"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}/uncertainty?method=bayes"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let mut with_l = moons_request(100, 5);
    with_l["lipschitz"] = json!(1.0);
    let hid = create(&app, with_l).await;
    annotate(&app, &hid, "0", 1).await;
    let (status, v) =
        call(&app, Method::GET, &format!("/sessions/{hid}/uncertainty?method=hoeffding&delta=0.05&limit=1"), None).await;
    assert_eq!(status, StatusCode::OK);
    // a single annotation at the point itself clips to [0, 1]
    let ci = &v["rows"][0]["intervals"][1];
    assert_eq!((ci["lower"].as_f64(), ci["upper"].as_f64()), (Some(0.0), Some(1.0)));
    assert_eq!(ci["vacuous"], false);
}

#[tokio::test]
async fn suggestions_prefer_low_mass() {
    let (app, _) = start(ServiceConfig::default());
    let id = create(&app, moons_request(200, 5)).await;
    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}/suggestions?count=3"), None).await;
    let ids: Vec<&str> = v["suggestions"].as_array().unwrap().iter().map(|s| s["id"].as_str().unwrap()).collect();
    assert_eq!(ids, vec!["0", "1", "2"]);

    for p in ["0", "1", "2", "3", "4"] {
        annotate(&app, &id, p, 0).await;
    }
    let (_, est) = call(&app, Method::GET, &format!("/sessions/{id}/estimates"), None).await;
    let mass: std::collections::HashMap<String, f64> = est["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["id"].as_str().unwrap().to_string(), r["received_mass"].as_f64().unwrap()))
        .collect();
    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}/suggestions?count=20"), None).await;
    let suggested: Vec<&Value> = v["suggestions"].as_array().unwrap().iter().collect();
    let worst_suggested = suggested.iter().map(|s| s["received_mass"].as_f64().unwrap()).fold(0.0, f64::max);
    for p in ["0", "1", "2", "3", "4"] {
        assert!(suggested.iter().all(|s| s["id"] != p));
        assert!(mass[p] > worst_suggested);
    }
    let masses: Vec<f64> = suggested.iter().map(|s| s["received_mass"].as_f64().unwrap()).collect();
    assert!(masses.windows(2).all(|w| w[0] <= w[1]));

    let (_, all) = call(&app, Method::GET, &format!("/sessions/{id}/suggestions?count=1000"), None).await;
    assert_eq!(all["suggestions"].as_array().unwrap().len(), 200);
}

#[tokio::test]
async fn points_are_two_dimensional_only() {
    let (app, _) = start(ServiceConfig::default());
    let id = create(&app, moons_request(50, 5)).await;
    let (status, v) = call(&app, Method::GET, &format!("/sessions/{id}/points?limit=2"), None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, features) = moons_features(50, 7);
    assert_eq!(v["rows"][1]["x"].as_f64().unwrap(), features[1][0]);
    assert_eq!(v["rows"][1]["y"].as_f64().unwrap(), features[1][1]);

    let cube: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i * i % 7) as f64, (i % 3) as f64]).collect();
    let body = json!({"dataset": {"inline": {"features": cube}}, "graph": {"kind": "knn", "k": 3}, "classes": 3});
    let id3 = create(&app, body).await;
    let (status, v) = call(&app, Method::GET, &format!("/sessions/{id3}/points"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("CLI"));
}

#[tokio::test]
async fn reads_never_change_state() {
    let (app, _) = start(ServiceConfig::default());
    let id = create(&app, moons_request(150, 5)).await;
    for (p, c) in [("5", 0), ("90", 1), ("5", 1)] {
        annotate(&app, &id, p, c).await;
    }
    let before = digest(&app, &id).await;
    for uri in [
        "estimates",
        "estimates?offset=10&limit=5",
        "uncertainty",
        "uncertainty?method=wilson&z=2.5",
        "suggestions?count=7",
        "points",
        "events",
        "events.csv",
    ] {
        let (status, _) = call_raw(&app, Method::GET, &format!("/sessions/{id}/{uri}"), None).await;
        assert_eq!(status, StatusCode::OK, "{uri}");
        assert_eq!(digest(&app, &id).await, before, "{uri}");
    }
    annotate(&app, &id, "6", 0).await;
    assert_ne!(digest(&app, &id).await, before);
}

fn estimates_matrix(v: &Value) -> Vec<Vec<f64>> {
    v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            let mut row: Vec<f64> = serde_json::from_value(r["probabilities"].clone()).unwrap();
            row.push(r["received_mass"].as_f64().unwrap());
            row
        })
        .collect()
}

#[tokio::test]
async fn scripted_session_matches_log_replay() {
    let (app, _) = start(ServiceConfig::default());
    let id = create(&app, moons_request(1000, 5)).await;
    let ds = make_two_moons(1000, 0.1, DEFAULT_SHARPNESS, 7).unwrap();
    let mut oracle = FeedbackOracle::for_dataset(&ds, 99).unwrap();
    let mut pick = rng_stream(99, 1);
    for _ in 0..50 {
        let q = rand::Rng::random_range(&mut pick, 0..1000usize);
        let c = oracle.sample(q).unwrap();
        let (status, _) = annotate(&app, &id, &q.to_string(), c).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (_, served) = call(&app, Method::GET, &format!("/sessions/{id}/estimates"), None).await;
    let (status, csv) = call_raw(&app, Method::GET, &format!("/sessions/{id}/events.csv"), None).await;
    assert_eq!(status, StatusCode::OK);

    // the command-line replay path, fed the exported log
    let ds = Arc::new(ds);
    let events = read_events(&csv[..], &ds).unwrap();
    assert_eq!(events.len(), 50);
    let config = SessionConfig::new(SolverConfig::new(0.9).unwrap(), 2);
    let mut replayed = session_for_dataset(ds, GraphKind::Knn { k: 5 }, Normalization::Symmetric, config).unwrap();
    for e in &events {
        replayed.apply_event(e).unwrap();
    }
    let expected = replayed.estimates();
    let served = estimates_matrix(&served);
    let mut worst: f64 = 0.0;
    for (q, row) in served.iter().enumerate() {
        for c in 0..2 {
            worst = worst.max((row[c] - expected.row(q)[c]).abs());
        }
        worst = worst.max((row[2] - expected.received[q]).abs());
    }
    assert!(worst <= 1e-9, "max deviation {worst:e}");
}

#[tokio::test]
async fn sessions_survive_restart() {
    let dir = TempDir::new().unwrap();
    let config = ServiceConfig {
        data_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    };
    let (app, _) = start(config.clone());
    let id = create(&app, moons_request(200, 5)).await;
    for (p, c) in [("1", 0), ("150", 1), ("1", 0), ("77", 1)] {
        annotate(&app, &id, p, c).await;
    }
    let (_, before) = call(&app, Method::GET, &format!("/sessions/{id}/estimates"), None).await;
    let digest_before = digest(&app, &id).await;
    drop(app);

    let (restarted, store) = start(config);
    assert_eq!(store.len(), 1);
    let (_, after) = call(&restarted, Method::GET, &format!("/sessions/{id}/estimates"), None).await;
    assert_eq!(before, after);
    assert_eq!(digest(&restarted, &id).await, digest_before);
    let (_, next) = annotate(&restarted, &id, "2", 1).await;
    assert_eq!(next["sequence"], 4);
}
