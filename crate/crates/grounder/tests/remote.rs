//! HTTP predictor behavior against a loopback mock server.

use grounder::geometry::{ImageDims, PixelCoord};
use grounder::predictor::{
    GroundingQuery, ImageRef, Predictor, PredictorError, RemotePredictor, RemotePredictorConfig,
};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

/// Read one HTTP request (headers + content-length body) off the stream.
fn read_request(stream: &mut TcpStream) -> String {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    loop {
        let n = stream.read(&mut chunk).unwrap();
        buf.extend_from_slice(&chunk[..n]);
        let text = String::from_utf8_lossy(&buf);
        if let Some(head_end) = text.find("\r\n\r\n") {
            let content_length = text
                .lines()
                .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(str::to_owned))
                .and_then(|v| v.trim().parse::<usize>().ok())
                .unwrap_or(0);
            if buf.len() >= head_end + 4 + content_length {
                return String::from_utf8_lossy(&buf).into_owned();
            }
        }
        if n == 0 {
            return String::from_utf8_lossy(&buf).into_owned();
        }
    }
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) {
    let reply = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(reply.as_bytes()).unwrap();
}

/// Spawn a server that answers `n_requests` requests via `handler(request_no,
/// request_text, stream)`, then stops. Returns its URL and a join handle.
fn spawn_server<F>(n_requests: usize, handler: F) -> (String, std::thread::JoinHandle<Vec<String>>)
where
    F: Fn(usize, &str, &mut TcpStream) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for i in 0..n_requests {
            let (mut stream, _) = listener.accept().unwrap();
            let req = read_request(&mut stream);
            handler(i, &req, &mut stream);
            seen.push(req);
        }
        seen
    });
    (url, handle)
}

fn query_with_image(path: &std::path::Path) -> GroundingQuery {
    GroundingQuery {
        id: "rq".into(),
        instruction: "press play".into(),
        image: ImageRef::Path(path.to_path_buf()),
        dims: ImageDims::new(1280, 800),
        region: None,
    }
}

fn image_file(dir: &tempfile::TempDir) -> std::path::PathBuf {
    let path = dir.path().join("screen.png");
    std::fs::write(&path, b"not-really-a-png").unwrap();
    path
}

fn config(url: &str) -> RemotePredictorConfig {
    RemotePredictorConfig {
        endpoint_url: url.to_string(),
        request_timeout: Duration::from_secs(5),
        max_retries: 2,
        ..Default::default()
    }
}

#[test]
fn parses_completion_from_response() {
    let (url, server) = spawn_server(1, |_, _, stream| {
        respond(
            stream,
            "200 OK",
            r#"{"choices":[{"message":{"content":"<think>bottom left</think> (17, 523)"}}]}"#,
        );
    });
    let dir = tempfile::tempdir().unwrap();
    let predictor = RemotePredictor::new(config(&url)).unwrap();
    let slots = predictor
        .sample_predictions(&query_with_image(&image_file(&dir)), 1, 0.7)
        .unwrap();
    server.join().unwrap();
    let sample = slots[0].parsed().expect("should parse");
    assert_eq!(sample.coord, PixelCoord::new(17.0, 523.0));
    assert_eq!(sample.reasoning, "bottom left");
}

#[test]
fn unparseable_completion_becomes_failed_slot() {
    let (url, server) = spawn_server(1, |_, _, stream| {
        respond(stream, "200 OK", r#"{"choices":[{"message":{"content":"no idea"}}]}"#);
    });
    let dir = tempfile::tempdir().unwrap();
    let predictor = RemotePredictor::new(config(&url)).unwrap();
    let slots = predictor
        .sample_predictions(&query_with_image(&image_file(&dir)), 1, 1.0)
        .unwrap();
    server.join().unwrap();
    assert!(slots[0].parsed().is_none());
}

#[test]
fn request_body_carries_prompt_model_and_image() {
    let captured: Arc<Mutex<Option<serde_json::Value>>> = Arc::new(Mutex::new(None));
    let captured2 = captured.clone();
    let (url, server) = spawn_server(1, move |_, req, stream| {
        let body_start = req.find("\r\n\r\n").unwrap() + 4;
        *captured2.lock().unwrap() = Some(serde_json::from_str(&req[body_start..]).unwrap());
        respond(stream, "200 OK", r#"{"choices":[{"message":{"content":"(1, 2)"}}]}"#);
    });
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&url);
    cfg.prompt_template = "Locate: {instruction}. Reply with (x, y).".into();
    cfg.model_name = "ui-grounder-7b".into();
    let predictor = RemotePredictor::new(cfg).unwrap();
    predictor
        .sample_predictions(&query_with_image(&image_file(&dir)), 1, 0.25)
        .unwrap();
    server.join().unwrap();

    let body = captured.lock().unwrap().take().unwrap();
    assert_eq!(body["model"], "ui-grounder-7b");
    assert_eq!(body["temperature"], 0.25);
    assert_eq!(
        body["messages"][0]["content"][0]["text"],
        "Locate: press play. Reply with (x, y)."
    );
    // image travels base64-encoded
    use base64::Engine;
    let data = body["messages"][0]["content"][1]["data"].as_str().unwrap();
    assert_eq!(
        base64::engine::general_purpose::STANDARD.decode(data).unwrap(),
        b"not-really-a-png"
    );
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, server) = spawn_server(3, |i, _, stream| {
        if i < 2 {
            respond(stream, "500 Internal Server Error", "{}");
        } else {
            respond(stream, "200 OK", r#"{"choices":[{"message":{"content":"(9, 9)"}}]}"#);
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let predictor = RemotePredictor::new(config(&url)).unwrap();
    let slots = predictor
        .sample_predictions(&query_with_image(&image_file(&dir)), 1, 1.0)
        .unwrap();
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(slots[0].parsed().unwrap().coord, PixelCoord::new(9.0, 9.0));
}

#[test]
fn retry_budget_exhausts_to_unavailable() {
    let hits = Arc::new(AtomicUsize::new(0));
    let hits2 = hits.clone();
    // max_retries = 2 means 3 attempts total
    let (url, server) = spawn_server(3, move |_, _, stream| {
        hits2.fetch_add(1, Ordering::SeqCst);
        respond(stream, "503 Service Unavailable", "{}");
    });
    let dir = tempfile::tempdir().unwrap();
    let predictor = RemotePredictor::new(config(&url)).unwrap();
    let err = predictor
        .sample_predictions(&query_with_image(&image_file(&dir)), 1, 1.0)
        .unwrap_err();
    server.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert!(matches!(err, PredictorError::Unavailable(_)), "got {err:?}");
}

#[test]
fn n_samples_issue_n_requests() {
    let (url, server) = spawn_server(4, |_, _, stream| {
        respond(stream, "200 OK", r#"{"choices":[{"message":{"content":"(5, 6)"}}]}"#);
    });
    let dir = tempfile::tempdir().unwrap();
    let predictor = RemotePredictor::new(config(&url)).unwrap();
    let slots = predictor
        .sample_predictions(&query_with_image(&image_file(&dir)), 4, 1.0)
        .unwrap();
    let seen = server.join().unwrap();
    assert_eq!(slots.len(), 4);
    assert_eq!(seen.len(), 4);
}

#[test]
fn custom_response_pointer() {
    let (url, server) = spawn_server(1, |_, _, stream| {
        respond(stream, "200 OK", r#"{"output":{"text":"(44, 55)"}}"#);
    });
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&url);
    cfg.response_pointer = "/output/text".into();
    let predictor = RemotePredictor::new(cfg).unwrap();
    let slots = predictor
        .sample_predictions(&query_with_image(&image_file(&dir)), 1, 1.0)
        .unwrap();
    server.join().unwrap();
    assert_eq!(slots[0].parsed().unwrap().coord, PixelCoord::new(44.0, 55.0));
}

#[test]
fn template_without_placeholder_is_rejected_up_front() {
    let mut cfg = RemotePredictorConfig::default();
    cfg.prompt_template = "find the button".into();
    assert!(RemotePredictor::new(cfg).is_err());
}

#[test]
fn synthetic_image_refs_are_rejected() {
    let (url, _server) = spawn_server(0, |_, _, _| {});
    let predictor = RemotePredictor::new(config(&url)).unwrap();
    let q = GroundingQuery {
        id: "s".into(),
        instruction: "x".into(),
        image: ImageRef::Synthetic {
            gt: grounder::geometry::BBox::new(0.0, 0.0, 10.0, 10.0),
        },
        dims: ImageDims::new(100, 100),
        region: None,
    };
    let err = predictor.sample_predictions(&q, 1, 1.0).unwrap_err();
    assert!(matches!(err, PredictorError::UnsupportedImage(_)));
}
