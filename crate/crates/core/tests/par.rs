use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::mpsc;

use chrono::{DateTime, Utc};
use proptest::prelude::*;
use sdglab_core::par::{
    build_instruction, parse_fixture, parse_response, render_response, validate_record,
    ChatMessage, ChatRequest, CorpusStore, CounterfactualRecord, HttpTransport, LlmEndpointConfig,
    MockTransport, ParError, ParTemplate, ParsedResponse, PhysicsAnalysis, Pipeline, Transport,
    ValidationOptions, ANALYSIS_MARKER, COUNTERFACTUAL_MARKER,
};

const CONDENSATION_PROMPT: &str = "A timelapse captures the transformation as water vapor in a humid environment comes into contact with a cool glass surface.";
const CONDENSATION_CF: &str = "The glass surface is instantly covered in water droplets from the beginning, without any observable condensation or gradual droplet formation.";

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/par")
}

fn fixture(name: &str) -> (Option<String>, String) {
    parse_fixture(&std::fs::read_to_string(fixtures().join(name)).unwrap())
}

fn endpoint(retries: u32) -> LlmEndpointConfig {
    LlmEndpointConfig {
        model: "mock-model".into(),
        max_retries: retries,
        backoff_ms: 0,
        ..LlmEndpointConfig::default()
    }
}

fn epoch() -> DateTime<Utc> {
    DateTime::from_timestamp(1_700_000_000, 0).unwrap()
}

fn pipeline(transport: impl Transport + 'static, retries: u32) -> Pipeline {
    Pipeline::new(
        endpoint(retries),
        ParTemplate::default(),
        Box::new(transport),
    )
    .with_clock(Box::new(epoch))
}

#[test]
fn instruction_contains_condensation_prompt_and_markers() {
    let msgs = build_instruction(&ParTemplate::default(), CONDENSATION_PROMPT).unwrap();
    let all: Vec<&str> = msgs.iter().map(|m| m.content.as_str()).collect();
    let joined = all.join("\n");
    assert!(joined.contains(
        "water vapor in a humid environment comes into contact with a cool glass surface"
    ));
    assert!(joined.contains(ANALYSIS_MARKER) && joined.contains(COUNTERFACTUAL_MARKER));
    assert_eq!(msgs[0].role, "system");
    assert_eq!(msgs.last().unwrap().role, "user");
}

#[test]
fn fixtures_generate_validated_records_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let store = CorpusStore::new(dir.path().join("corpus.jsonl"));
    let p = pipeline(MockTransport::from_dir(fixtures()).unwrap(), 0).with_store(store);
    let mut ids = Vec::new();
    for name in ["condensation.txt", "butter.txt", "magnifier.txt"] {
        let (prompt, body) = fixture(name);
        let prompt = prompt.unwrap();
        let rec = p.generate(&prompt).unwrap();
        let want = body.split(COUNTERFACTUAL_MARKER).nth(1).unwrap().trim();
        assert_eq!(rec.counterfactual, want, "{name}");
        assert_eq!(rec.user_prompt, prompt);
        assert_eq!(rec.model_id, "mock-model");
        assert_eq!(rec.created_at, epoch());
        ids.push(rec.id);
    }
    let (_, cond) = fixture("condensation.txt");
    assert!(cond.contains(CONDENSATION_CF));
    let (_, butter) = fixture("butter.txt");
    assert!(
        butter.contains("is fully liquefied from the start, with no observable melting process")
    );

    let stored = CorpusStore::load(dir.path().join("corpus.jsonl")).unwrap();
    assert_eq!(stored.iter().map(|r| r.id.clone()).collect::<Vec<_>>(), ids);
    assert!(!dir.path().join("corpus.quarantine.jsonl").exists());
}

#[test]
fn condensation_record_passes_entity_overlap() {
    let (prompt, body) = fixture("condensation.txt");
    let parsed = parse_response(&body, &ParTemplate::default()).unwrap();
    let rec = CounterfactualRecord::new(&prompt.unwrap(), parsed, "m", "v", epoch());
    let report = validate_record(&rec, &ValidationOptions::default());
    assert!(report.passed, "{:?}", report.failure_reasons());
    let overlap = &report.check("entity_overlap").unwrap().reason;
    assert!(
        overlap.contains("glass") && overlap.contains("water"),
        "{overlap}"
    );
}

#[test]
fn malformed_fixtures_are_format_violations() {
    let cases = [
        ("malformed/missing_analysis.txt", ANALYSIS_MARKER),
        ("malformed/missing_subfield.txt", "Interactions"),
        (
            "malformed/missing_counterfactual.txt",
            COUNTERFACTUAL_MARKER,
        ),
    ];
    for (name, missing_what) in cases {
        let (_, body) = fixture(name);
        let mock = MockTransport::fixed(body);
        let p = pipeline(mock, 3);
        match p.generate(CONDENSATION_PROMPT) {
            Err(ParError::Format { missing }) => assert_eq!(missing, missing_what, "{name}"),
            other => panic!("{name}: {other:?}"),
        }
    }
}

#[test]
fn format_errors_not_retried_unless_enabled() {
    let (_, body) = fixture("malformed/missing_subfield.txt");
    let (_, good) = fixture("condensation.txt");

    let p = pipeline(
        MockTransport::scripted([Ok(body.clone()), Ok(good.clone())]),
        3,
    );
    assert!(matches!(
        p.generate(CONDENSATION_PROMPT),
        Err(ParError::Format { .. })
    ));

    let mut cfg = endpoint(3);
    cfg.retry_on_format = true;
    let p = Pipeline::new(
        cfg,
        ParTemplate::default(),
        Box::new(MockTransport::scripted([Ok(body), Ok(good)])),
    );
    assert_eq!(
        p.generate(CONDENSATION_PROMPT).unwrap().counterfactual,
        CONDENSATION_CF
    );
}

#[test]
fn transport_failures_are_retried_then_reported() {
    let (_, good) = fixture("condensation.txt");
    let p = pipeline(
        MockTransport::scripted([Err("reset".into()), Err("reset".into()), Ok(good)]),
        2,
    );
    assert!(p.generate(CONDENSATION_PROMPT).is_ok());

    let p = pipeline(MockTransport::failing("connection refused"), 2);
    match p.generate(CONDENSATION_PROMPT) {
        Err(ParError::Transport { attempts, message }) => {
            assert_eq!(attempts, 3);
            assert!(message.contains("refused"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn validation_failures_are_quarantined() {
    let dir = tempfile::tempdir().unwrap();
    let text = render_response(
        &PhysicsAnalysis {
            entities: "vapor, glass".into(),
            environment: "humid room".into(),
            interactions: "condensation".into(),
            temporal_evolution: "droplets form".into(),
        },
        "A dragon breathes fire over snowy mountains.",
    );
    let p = pipeline(MockTransport::fixed(text), 0)
        .with_store(CorpusStore::new(dir.path().join("c.jsonl")));
    match p.generate(CONDENSATION_PROMPT) {
        Err(ParError::Validation { report }) => {
            assert!(!report.check("entity_overlap").unwrap().passed)
        }
        other => panic!("{other:?}"),
    }
    assert!(!dir.path().join("c.jsonl").exists());
    let q = std::fs::read_to_string(dir.path().join("c.quarantine.jsonl")).unwrap();
    assert_eq!(q.lines().count(), 1);
    assert!(q.contains("entity_overlap"));
}

#[test]
fn mock_generation_is_deterministic() {
    let run = || {
        pipeline(MockTransport::from_dir(fixtures()).unwrap(), 0)
            .generate(CONDENSATION_PROMPT)
            .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn http_transport_speaks_chat_completions() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    let server = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut head = Vec::new();
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            head.push(line);
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        tx.send((head, String::from_utf8(body).unwrap())).unwrap();
        let reply = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#;
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .unwrap();
    });

    let var = "SDGLAB_TEST_HTTP_KEY";
    std::env::set_var(var, "secret-token");
    let cfg = LlmEndpointConfig {
        base_url: format!("http://{addr}/"),
        model: "m1".into(),
        api_key_env: var.into(),
        timeout_secs: 5.0,
        ..LlmEndpointConfig::default()
    };
    let t = HttpTransport::new(&cfg).unwrap();
    let req = ChatRequest {
        model: "m1".into(),
        messages: vec![ChatMessage {
            role: "user".into(),
            content: "hi".into(),
        }],
        temperature: 0.25,
    };
    assert_eq!(t.complete(&req).unwrap(), "hello");
    let (head, body) = rx.recv().unwrap();
    server.join().unwrap();
    assert!(
        head[0].starts_with("POST /v1/chat/completions "),
        "{}",
        head[0]
    );
    assert!(head.iter().any(|h| h
        .to_ascii_lowercase()
        .starts_with("authorization: bearer secret-token")));
    let json: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(json["model"], "m1");
    assert_eq!(json["temperature"], 0.25);
    assert_eq!(json["messages"][0]["content"], "hi");
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    // Bind then drop to get a port nobody listens on.
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let cfg = LlmEndpointConfig {
        base_url: format!("http://127.0.0.1:{port}"),
        timeout_secs: 2.0,
        max_retries: 1,
        backoff_ms: 1,
        ..LlmEndpointConfig::default()
    };
    let p = Pipeline::new(
        cfg.clone(),
        ParTemplate::default(),
        Box::new(HttpTransport::new(&cfg).unwrap()),
    );
    assert!(matches!(
        p.generate(CONDENSATION_PROMPT),
        Err(ParError::Transport { attempts: 2, .. })
    ));
}

/// Single-line field text that cannot be mistaken for a label or marker.
fn field() -> impl proptest::strategy::Strategy<Value = String> {
    "[a-z][a-z0-9 ,.()'-]{0,60}[a-z0-9.]".prop_filter("not a label", |s| {
        let l = s.to_lowercase();
        ![
            "entities",
            "environment",
            "interactions",
            "temporal evolution",
        ]
        .iter()
        .any(|p| l.starts_with(p))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn render_then_parse_is_identity(
        entities in field(), environment in field(), interactions in field(),
        temporal in field(), counterfactual in field(),
    ) {
        let analysis = PhysicsAnalysis {
            entities,
            environment,
            interactions,
            temporal_evolution: temporal,
        };
        let parsed = parse_response(&render_response(&analysis, &counterfactual), &ParTemplate::default()).unwrap();
        prop_assert_eq!(parsed, ParsedResponse { analysis, counterfactual });
    }
}
