use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::Value;

use mmtrust::error::SynthError;
use mmtrust::synth::{generate_remote, ChatBackend, EndpointConfig, HttpChatClient, PromptSpec};
use mmtrust::{BehaviorLexicon, Level, Trait};

type Responder = Box<dyn Fn(&Request) -> (u16, String) + Send>;

struct Request {
    headers: Vec<(String, String)>,
    body: Value,
}

fn read_request(stream: &mut impl Read) -> Request {
    let mut reader = BufReader::new(stream);
    let mut headers = Vec::new();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    loop {
        line.clear();
        reader.read_line(&mut line).unwrap();
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let (k, v) = l.split_once(':').unwrap();
        headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    let len: usize = headers
        .iter()
        .find(|(k, _)| k == "content-length")
        .map(|(_, v)| v.parse().unwrap())
        .unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    Request {
        headers,
        body: serde_json::from_slice(&body).unwrap(),
    }
}

/// Serves `responses` in order, one connection each. Returns the base URL,
/// a request counter and the join handle yielding the captured requests.
fn serve(
    responses: Vec<Responder>,
) -> (String, Arc<AtomicUsize>, thread::JoinHandle<Vec<Request>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let handle = thread::spawn(move || {
        let mut seen = Vec::new();
        for respond in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let req = read_request(&mut stream);
            counter.fetch_add(1, Ordering::SeqCst);
            let (status, body) = respond(&req);
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
            seen.push(req);
        }
        seen
    });
    (url, hits, handle)
}

fn config(url: &str) -> EndpointConfig {
    EndpointConfig {
        api_key_env: None,
        backoff_base_ms: 1,
        timeout_secs: 10,
        ..EndpointConfig::new(url, "mock-model")
    }
}

fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn spec() -> PromptSpec {
    PromptSpec::new(Trait::Ability, Some(Level::High), None, "take the indicated route")
}

#[test]
fn echoes_the_user_message() {
    let (url, hits, handle) = serve(vec![Box::new(|req: &Request| {
        let user = req.body["messages"][1]["content"].as_str().unwrap().to_string();
        (200, completion(&format!("{{f: happy}} {user}")))
    })]);
    let client = HttpChatClient::new(config(&url)).unwrap();
    let lex = BehaviorLexicon::builtin();
    let out = generate_remote(&spec(), lex, &client).unwrap();
    let requests = handle.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    let req = &requests[0];
    assert_eq!(req.body["model"], "mock-model");
    assert_eq!(req.body["messages"][0]["role"], "system");
    assert_eq!(req.body["messages"][1]["role"], "user");
    assert_eq!(req.body["temperature"], 0.7);
    assert!(req.body["max_tokens"].as_u64().unwrap() > 0);
    assert!(req.headers.iter().all(|(k, _)| k != "authorization"));
    let user = req.body["messages"][1]["content"].as_str().unwrap();
    assert_eq!(out, format!("{{f: happy}} {user}"));
    assert_eq!(client.model_name(), "mock-model");
}

#[test]
fn server_errors_retry_then_fail() {
    let fail = || -> Responder {
        Box::new(|_: &Request| (500, "{\"error\":\"boom\"}".to_string()))
    };
    let (url, hits, handle) = serve(vec![fail(), fail(), fail()]);
    let client = HttpChatClient::new(config(&url)).unwrap();
    let err = client.complete("sys", "user", 0.7, 16).unwrap_err();
    handle.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    match err {
        SynthError::Transport { attempts, message } => {
            assert_eq!(attempts, 3);
            assert!(message.contains("500"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn recovers_after_a_transient_failure() {
    let (url, hits, handle) = serve(vec![
        Box::new(|_: &Request| (503, String::new())),
        Box::new(|_: &Request| (200, completion("[pause] Go."))),
    ]);
    let client = HttpChatClient::new(config(&url)).unwrap();
    assert_eq!(client.complete("s", "u", 0.7, 16).unwrap(), "[pause] Go.");
    handle.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits, handle) = serve(vec![Box::new(|_: &Request| (400, "{\"error\":\"bad\"}".into()))]);
    let client = HttpChatClient::new(config(&url)).unwrap();
    let err = client.complete("s", "u", 0.7, 16).unwrap_err();
    handle.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert!(matches!(err, SynthError::Status { status: 400, .. }), "{err:?}");
}

#[test]
fn bearer_token_from_environment() {
    let var = "MMTRUST_TEST_REMOTE_KEY";
    std::env::set_var(var, "sekrit");
    let (url, _, handle) = serve(vec![Box::new(|_: &Request| (200, completion("ok")))]);
    let client = HttpChatClient::new(EndpointConfig {
        api_key_env: Some(var.into()),
        ..config(&url)
    })
    .unwrap();
    client.complete("s", "u", 0.7, 16).unwrap();
    let requests = handle.join().unwrap();
    let auth = requests[0].headers.iter().find(|(k, _)| k == "authorization").unwrap();
    assert_eq!(auth.1, "Bearer sekrit");

    let missing = EndpointConfig {
        api_key_env: Some("MMTRUST_TEST_UNSET_KEY".into()),
        ..config(&url)
    };
    assert!(matches!(HttpChatClient::new(missing), Err(SynthError::MissingApiKey(_))));
}
