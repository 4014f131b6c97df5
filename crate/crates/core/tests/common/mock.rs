//! Instrumented chat-completions mock served by axum on a private runtime.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::Router;

#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl Reply {
    pub fn answer(text: &str) -> Self {
        let body = serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}).to_string();
        Reply { status: 200, body, delay: Duration::ZERO }
    }

    pub fn status(status: u16) -> Self {
        Reply { status, body: format!("{{\"error\": \"status {status}\"}}"), delay: Duration::ZERO }
    }

    pub fn after(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Hit {
    pub at: Instant,
    pub body: Vec<u8>,
    pub authorization: Option<String>,
}

type Responder = dyn Fn(usize, &[u8]) -> Reply + Send + Sync;

pub struct MockState {
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    pub hits: Mutex<Vec<Hit>>,
    responder: Box<Responder>,
}

impl MockState {
    pub fn calls(&self) -> usize {
        self.hits.lock().unwrap().len()
    }
}

pub struct MockServer {
    pub base_url: String,
    pub state: Arc<MockState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

async fn handle(State(st): State<Arc<MockState>>, headers: HeaderMap, body: Bytes) -> (StatusCode, String) {
    let now = st.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    st.max_in_flight.fetch_max(now, Ordering::SeqCst);
    let index = {
        let mut hits = st.hits.lock().unwrap();
        hits.push(Hit {
            at: Instant::now(),
            body: body.to_vec(),
            authorization: headers.get("authorization").and_then(|v| v.to_str().ok()).map(str::to_string),
        });
        hits.len() - 1
    };
    let reply = (st.responder)(index, &body);
    if !reply.delay.is_zero() {
        tokio::time::sleep(reply.delay).await;
    }
    st.in_flight.fetch_sub(1, Ordering::SeqCst);
    (StatusCode::from_u16(reply.status).unwrap(), reply.body)
}

impl MockServer {
    /// `responder(call_index, request_body)` decides each reply.
    pub fn start(responder: impl Fn(usize, &[u8]) -> Reply + Send + Sync + 'static) -> Self {
        let state = Arc::new(MockState {
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            hits: Mutex::new(Vec::new()),
            responder: Box::new(responder),
        });
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let app_state = state.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                let app = Router::new().route("/v1/chat/completions", post(handle)).with_state(app_state);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stop_rx.await;
                    })
                    .await
                    .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        MockServer { base_url: format!("http://{addr}/v1"), state, shutdown: Some(stop_tx), thread: Some(thread) }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
