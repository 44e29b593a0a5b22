use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use forage_core::synthetic::{clustered, ClusteredConfig};
use forage_core::{Dataset, Format, InteractionEvent, Session, SessionExport};
use forage_server::{router, AppState, BatchOutcome, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn world() -> Dataset {
    clustered(&ClusteredConfig {
        n: 300,
        incidence: 0.1,
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

fn csv_bytes(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    ds.write(&mut buf, Format::Csv).unwrap();
    buf
}

fn memory_state() -> Arc<AppState> {
    AppState::new(ServiceConfig {
        persist: false,
        ..Default::default()
    })
    .unwrap()
}

fn disk_state(dir: &std::path::Path) -> Arc<AppState> {
    AppState::new(ServiceConfig {
        data_dir: dir.to_path_buf(),
        ..Default::default()
    })
    .unwrap()
}

async fn call(app: &Router, method: Method, uri: &str, body: impl Into<Body>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.into())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: Method, uri: &str, body: impl Into<Body>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn upload(app: &Router, ds: &Dataset) -> String {
    let (status, v) = call_json(app, Method::POST, "/datasets?format=csv&dim=32", csv_bytes(ds)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["dataset_id"].as_str().unwrap().to_owned()
}

async fn new_session(app: &Router, dataset_id: &str, extra: Value) -> String {
    let mut body = json!({ "dataset_id": dataset_id });
    body.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    let (status, v) = call_json(app, Method::POST, "/sessions", body.to_string()).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_owned()
}

fn lines(events: &[InteractionEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect()
}

async fn post_events(app: &Router, sid: &str, events: &[InteractionEvent]) -> (StatusCode, BatchOutcome) {
    let (status, bytes) = call(app, Method::POST, &format!("/sessions/{sid}/events"), lines(events)).await;
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&bytes))),
    )
}

fn first_positive(ds: &Dataset) -> u64 {
    ds.points().iter().find(|p| p.truth == Some(true)).unwrap().id
}

#[tokio::test]
async fn health_reports_ok() {
    let app = router(memory_state());
    let (status, v) = call_json(&app, Method::GET, "/health", Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn point_listing_withholds_text_until_requested() {
    let ds = world();
    let app = router(memory_state());
    let id = upload(&app, &ds).await;
    let (status, body) = call(&app, Method::GET, &format!("/datasets/{id}/points"), Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    let rows: Vec<Value> = String::from_utf8(body)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), ds.len());
    for (row, p) in rows.iter().zip(ds.points()) {
        let keys: Vec<&String> = row.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["id", "x", "y"]);
        assert_eq!(row["id"], p.id);
    }
    let p = ds.point(5);
    let (status, v) = call_json(
        &app,
        Method::GET,
        &format!("/datasets/{id}/points/{}", p.id),
        Body::empty(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["text"], p.text.as_str());
    assert!(v.get("truth").is_none());
    let (status, _) = call(
        &app,
        Method::GET,
        &format!("/datasets/{id}/points/999999"),
        Body::empty(),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn feedback_returns_fresh_batch_and_retries_are_idempotent() {
    let ds = world();
    let app = router(memory_state());
    let did = upload(&app, &ds).await;
    let sid = new_session(&app, &did, json!({})).await;

    let (_, v) = call_json(
        &app,
        Method::GET,
        &format!("/sessions/{sid}/suggestions"),
        Body::empty(),
    )
    .await;
    assert_eq!(v["suggestions"], json!([]));

    let seed = first_positive(&ds);
    let batch = [
        InteractionEvent::hover_start(seed, 100).with_event_id("a"),
        InteractionEvent::hover_end(seed, 900).with_event_id("b"),
        InteractionEvent::bookmark_add(seed, 1000).with_event_id("c"),
    ];
    let (status, first) = post_events(&app, &sid, &batch).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((first.accepted, first.duplicates), (3, 0));
    assert_eq!(first.suggestions.len(), 10);
    assert!(first.suggestions.iter().all(|s| s.point_id != seed));

    let (status, retry) = post_events(&app, &sid, &batch).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((retry.accepted, retry.duplicates), (3, 3));
    assert_eq!(retry.suggestions, first.suggestions);

    let (_, v) = call_json(&app, Method::GET, &format!("/sessions/{sid}/metrics"), Body::empty()).await;
    assert_eq!(v["events"], 3);
    assert_eq!(v["utility"], 1);
    assert_eq!(v["metrics"]["bookmark_purity"], 1.0);
    assert!(v["suggestion_purity"].as_f64().is_some());
}

#[tokio::test]
async fn http_state_equals_replay_of_export() {
    let ds = world();
    let app = router(memory_state());
    let did = upload(&app, &ds).await;
    let sid = new_session(&app, &did, json!({ "policy": "ens-5", "batch_size": 4 })).await;
    let (_, out) = post_events(&app, &sid, &[InteractionEvent::bookmark_add(first_positive(&ds), 0)]).await;
    let flagged = out.suggestions[0].point_id;
    let bookmarked = out.suggestions[1].point_id;
    let (status, out) = post_events(
        &app,
        &sid,
        &[
            InteractionEvent::irrelevant_flag(flagged, 500),
            InteractionEvent::bookmark_add(bookmarked, 900),
        ],
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(out.suggestions.len(), 4);

    let (_, body) = call(&app, Method::GET, &format!("/sessions/{sid}/export"), Body::empty()).await;
    let export = SessionExport::read_jsonl(body.as_slice()).unwrap();
    assert_eq!(export.records.len(), 3);
    let uploaded = Arc::new(
        Dataset::load(csv_bytes(&ds).as_slice(), Format::Csv, None)
            .unwrap()
            .embed(&forage_core::dataset::HashEmbedder::new(32))
            .unwrap(),
    );
    let replayed = Session::replay(&export.header, uploaded, None, export.events()).unwrap();
    let ids: Vec<u64> = out.suggestions.iter().map(|s| s.point_id).collect();
    let replayed_ids: Vec<u64> = replayed.current_suggestions().iter().map(|s| s.0).collect();
    assert_eq!(ids, replayed_ids);
    assert_eq!(replayed.export(), export);
}

#[tokio::test]
async fn rejected_event_keeps_earlier_events_of_the_batch() {
    let ds = world();
    let app = router(memory_state());
    let did = upload(&app, &ds).await;
    let sid = new_session(&app, &did, json!({})).await;
    let p = ds.point(0).id;
    let (status, out) = post_events(
        &app,
        &sid,
        &[
            InteractionEvent::hover_start(p, 10),
            InteractionEvent::hover_end(p, 700),
            InteractionEvent::irrelevant_flag(p, 800),
        ],
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!((out.accepted, out.index), (2, Some(2)));
    assert!(out.error.unwrap().contains("not a current suggestion"));
    let (_, v) = call_json(&app, Method::GET, &format!("/sessions/{sid}/metrics"), Body::empty()).await;
    assert_eq!(v["events"], 2);

    let (status, _) = post_events(&app, &sid, &[InteractionEvent::hover_start(p, 5)]).await;
    assert_eq!(status, StatusCode::CONFLICT, "timestamps must not go backwards");
}

#[tokio::test]
async fn budget_expiry_rejects_labels_but_not_reads() {
    let ds = world();
    let app = router(memory_state());
    let did = upload(&app, &ds).await;
    let sid = new_session(&app, &did, json!({ "budget_ms": 1000 })).await;
    let (status, out) = post_events(&app, &sid, &[InteractionEvent::bookmark_add(first_positive(&ds), 1500)]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(out.accepted, 0);
    let (status, _) = call(
        &app,
        Method::GET,
        &format!("/sessions/{sid}/suggestions"),
        Body::empty(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let app = router(memory_state());
    let did = upload(&app, &world()).await;
    let (status, _) = call(
        &app,
        Method::POST,
        "/sessions",
        json!({ "dataset_id": "nope" }).to_string(),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(
        &app,
        Method::POST,
        "/sessions",
        json!({ "dataset_id": did, "policy": "psychic" }).to_string(),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::POST, "/sessions/nope/events", "[]").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let sid = new_session(&app, &did, json!({})).await;
    let (status, _) = call(
        &app,
        Method::POST,
        &format!("/sessions/{sid}/events"),
        "{\"kind\":\"teleport\",\"at\":0}\n",
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        &app,
        Method::POST,
        "/datasets?format=csv",
        "id,x,y,text\n1,0,0,a\n1,1,1,b\n",
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_sessions_do_not_share_labels() {
    let ds = world();
    let app = router(memory_state());
    let did = upload(&app, &ds).await;
    let (a, b) = (
        new_session(&app, &did, json!({})).await,
        new_session(&app, &did, json!({})).await,
    );
    let positives: Vec<u64> = ds
        .points()
        .iter()
        .filter(|p| p.truth == Some(true))
        .map(|p| p.id)
        .collect();
    let (left, right) = positives.split_at(positives.len() / 2);
    let drive = |sid: String, ids: Vec<u64>| {
        let app = app.clone();
        async move {
            for (i, id) in ids.into_iter().enumerate() {
                let (status, _) = post_events(&app, &sid, &[InteractionEvent::bookmark_add(id, i as u64 * 100)]).await;
                assert_eq!(status, StatusCode::OK);
            }
        }
    };
    tokio::join!(
        tokio::spawn(drive(a.clone(), left.to_vec())),
        tokio::spawn(drive(b.clone(), right.to_vec()))
    )
    .0
    .unwrap();
    for (sid, mine) in [(&a, left), (&b, right)] {
        let (_, body) = call(&app, Method::GET, &format!("/sessions/{sid}/export"), Body::empty()).await;
        let export = SessionExport::read_jsonl(body.as_slice()).unwrap();
        let ids: Vec<u64> = export.events().filter_map(|e| e.point_id).collect();
        assert_eq!(ids, mine);
    }
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let ds = world();
    let (sid, before, export) = {
        let app = router(disk_state(dir.path()));
        let did = upload(&app, &ds).await;
        let sid = new_session(&app, &did, json!({ "policy": "one-step" })).await;
        let (_, out) = post_events(
            &app,
            &sid,
            &[InteractionEvent::bookmark_add(first_positive(&ds), 0).with_event_id("x")],
        )
        .await;
        let next = out.suggestions[0].point_id;
        let (_, out) = post_events(&app, &sid, &[InteractionEvent::bookmark_add(next, 800)]).await;
        let (_, body) = call(&app, Method::GET, &format!("/sessions/{sid}/export"), Body::empty()).await;
        (sid, out.suggestions, body)
    };

    let app = router(disk_state(dir.path()));
    let (_, v) = call_json(
        &app,
        Method::GET,
        &format!("/sessions/{sid}/suggestions"),
        Body::empty(),
    )
    .await;
    assert_eq!(v["suggestions"], serde_json::to_value(&before).unwrap());
    let (_, body) = call(&app, Method::GET, &format!("/sessions/{sid}/export"), Body::empty()).await;
    assert_eq!(body, export);

    // event ids are remembered across the restart
    let (_, out) = post_events(
        &app,
        &sid,
        &[InteractionEvent::bookmark_add(first_positive(&ds), 0).with_event_id("x")],
    )
    .await;
    assert_eq!(out.duplicates, 1);
}

#[tokio::test]
async fn port_in_use_is_a_startup_error() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let cfg = ServiceConfig {
        bind: taken.local_addr().unwrap(),
        persist: false,
        ..Default::default()
    };
    let err = forage_server::serve(cfg, std::future::pending()).await.unwrap_err();
    assert!(err.to_string().contains("cannot listen"), "{err:#}");
}

#[tokio::test]
async fn served_over_tcp() {
    let cfg = ServiceConfig {
        bind: "127.0.0.1:0".parse().unwrap(),
        persist: false,
        ..Default::default()
    };
    let listener = forage_server::service::bind(&cfg).await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(forage_server::service::serve_with(
        listener,
        AppState::new(cfg).unwrap(),
        async {
            let _ = rx.await;
        },
    ));
    let resp = tokio::task::spawn_blocking(move || {
        use std::io::{Read, Write};
        let mut stream = std::net::TcpStream::connect(addr).unwrap();
        stream
            .write_all(b"GET /health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
            .unwrap();
        let mut resp = String::new();
        stream.read_to_string(&mut resp).unwrap();
        resp
    })
    .await
    .unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"status\":\"ok\""));
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}
