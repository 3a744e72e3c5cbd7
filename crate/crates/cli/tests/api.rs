mod common;

use std::time::Duration;

use reqwest::StatusCode;
use serde_json::{json, Value};

use recast::annotation::{replay_report, AnnotationReport, AnnotationStore, ComputedMetrics, TaskView};
use recast::pipeline::{annotation_pool, artifacts, RunOptions};

struct Server {
    base: String,
    client: reqwest::Client,
}

impl Server {
    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap())
    }

    async fn submit(&self, id: &str, text: &str, annotator: &str) -> (StatusCode, Value) {
        let body = json!({ "edited_text": text, "annotator_id": annotator, "elapsed_ms": 4200 });
        let r = self
            .client
            .post(format!("{}/api/tasks/{id}/submission", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = r.status();
        (status, r.json().await.unwrap())
    }
}

async fn spawn(store: AnnotationStore) -> Server {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = recast_cli::server::router(store, None);
    tokio::spawn(async move { recast_cli::server::serve(listener, app).await.unwrap() });
    Server {
        base: format!("http://{addr}"),
        client: reqwest::Client::new(),
    }
}

fn open_store(ws: &recast::pipeline::Workspace) -> AnnotationStore {
    let pool = annotation_pool(ws, &RunOptions::default()).unwrap();
    AnnotationStore::open(pool, &ws.path(artifacts::JOURNAL), Duration::from_secs(1800)).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn annotation_round_trip_matches_journal_replay() {
    let dir = common::copy_fixture();
    let ws = tokio::task::spawn_blocking({
        let p = dir.path().to_path_buf();
        move || common::prepared_workspace(&p)
    })
    .await
    .unwrap();
    let store = open_store(&ws);
    let server = spawn(store).await;

    // first task is in the retrieval condition and shows three excerpts
    let (status, task) = server.get("/api/tasks/next").await;
    assert_eq!(status, StatusCode::OK);
    let task: TaskView = serde_json::from_value(task).unwrap();
    assert_eq!(task.condition, recast::annotation::Condition::Retrieval);
    assert_eq!(task.retrieved.len(), 3);
    assert!(task.context.is_some());

    let (status, control) = server.get("/api/tasks/next?condition=control").await;
    assert_eq!(status, StatusCode::OK);
    let control: TaskView = serde_json::from_value(control).unwrap();
    assert!(control.retrieved.is_empty());

    let (status, _) = server.get("/api/tasks/next?condition=sideways").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // unchanged text is refused, a real edit is accepted
    let (status, body) = server.submit(&task.task_id, &task.editable, "a1").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("identical"));

    let edited = format!("{} not", task.editable.trim_end_matches('.'));
    let (status, body) = server.submit(&task.task_id, &edited, "a1").await;
    assert_eq!(status, StatusCode::OK);
    let computed: ComputedMetrics = serde_json::from_value(body["computed"].clone()).unwrap();
    assert_eq!(computed, ComputedMetrics::between(&task.editable, &edited));

    let (status, _) = server.submit(&task.task_id, "Something else entirely.", "a1").await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = server.submit("no-such-task", "x", "a1").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, done) = server.get(&format!("/api/tasks/{}", task.task_id)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(done["status"], "done");

    // nine more from two annotators, alternating conditions
    let mut submitted = 1;
    for i in 0..9 {
        let (status, t) = server.get(&format!("/api/tasks/next?annotator=a{}", i % 2 + 1)).await;
        assert_eq!(status, StatusCode::OK);
        let t: TaskView = serde_json::from_value(t).unwrap();
        let edited = format!("Perhaps {}", t.editable);
        let (status, _) = server.submit(&t.task_id, &edited, &format!("a{}", i % 2 + 1)).await;
        assert_eq!(status, StatusCode::OK);
        submitted += 1;
    }

    let (status, report) = server.get("/api/report").await;
    assert_eq!(status, StatusCode::OK);
    let live: AnnotationReport = serde_json::from_value(report).unwrap();
    assert_eq!(live.submissions, submitted);
    assert_eq!(live.conditions.values().map(|g| g.count).sum::<usize>(), 10);
    assert_eq!(live.annotators.len(), 2);
    let replayed = replay_report(&ws.path(artifacts::JOURNAL)).unwrap();
    assert_eq!(live, replayed);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_keeps_completed_tasks_done() {
    let dir = common::copy_fixture();
    let ws = tokio::task::spawn_blocking({
        let p = dir.path().to_path_buf();
        move || common::prepared_workspace(&p)
    })
    .await
    .unwrap();

    let first_id = {
        let server = spawn(open_store(&ws)).await;
        let (_, t) = server.get("/api/tasks/next").await;
        let t: TaskView = serde_json::from_value(t).unwrap();
        let (status, _) = server.submit(&t.task_id, &format!("Not {}", t.editable), "a1").await;
        assert_eq!(status, StatusCode::OK);
        t.task_id
    };

    // the pool file is reused and the journal replayed
    let server = spawn(open_store(&ws)).await;
    let (_, t) = server.get("/api/tasks/next").await;
    assert_ne!(t["task_id"].as_str().unwrap(), first_id);
    let (_, report) = server.get("/api/report").await;
    assert_eq!(report["submissions"], 1);
}
