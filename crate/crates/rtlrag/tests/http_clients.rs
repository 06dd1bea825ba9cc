//! Wire-level tests for the three HTTP clients (tokenizer, embedder,
//! generator) against a local stub server: request shapes, truncation,
//! batching, retry policy, and error mapping.

mod common;

use std::sync::atomic::{AtomicIsize, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use common::{embedding_handler, oracle_hash_embedding, tokenizer_handler, Response, StubServer};
use rtlrag::backend::{BackendError, GenerationBackend, HttpGenerator, WireFormat};
use rtlrag::embed::{embed_batch, embed_text, EmbedError, EmbedderConfig, HttpEmbedder};
use rtlrag::tokenize::{ExternalTokenizer, TokenCounter};
use rtlrag::{RepoFile, RepoSample};

const TIMEOUT: Duration = Duration::from_secs(5);

fn ws() -> TokenCounter {
    TokenCounter::WhitespacePunct
}

fn tiny_sample() -> RepoSample {
    RepoSample {
        id: "s0".to_string(),
        repo: "r".to_string(),
        context_files: vec![RepoFile {
            path: "a.v".to_string(),
            text: "wire w;\n".to_string(),
        }],
        current_path: "top.v".to_string(),
        current_prefix: "module top;\n".to_string(),
        target: "endmodule".to_string(),
    }
}

#[test]
fn external_tokenizer_counts_over_the_wire() {
    let server = StubServer::start(tokenizer_handler());
    let counter = TokenCounter::External(ExternalTokenizer::new(server.url("/count"), TIMEOUT));
    assert_eq!(counter.count("assign y = a & b;").unwrap(), 7);
    let requests = server.requests();
    assert_eq!(requests.len(), 1);
    assert_eq!(requests[0].method, "POST");
    assert_eq!(requests[0].path, "/count");
    assert_eq!(
        requests[0].body,
        serde_json::json!({"input": "assign y = a & b;"})
    );
}

#[test]
fn external_tokenizer_surfaces_unavailability() {
    // connection refused
    let counter = TokenCounter::External(ExternalTokenizer::new(
        "http://127.0.0.1:1/count",
        Duration::from_millis(300),
    ));
    assert!(counter.count("x").is_err());

    // server-side failure: an error, never a silent local fallback
    let server = StubServer::start(|_| Response::error(500, "down"));
    let counter = TokenCounter::External(ExternalTokenizer::new(server.url("/count"), TIMEOUT));
    assert!(counter.count("x").is_err());

    // malformed body
    let server = StubServer::start(|_| Response::ok(serde_json::json!({"tokens": 3})));
    let counter = TokenCounter::External(ExternalTokenizer::new(server.url("/count"), TIMEOUT));
    assert!(counter.count("x").is_err());
}

#[test]
fn embedder_sends_model_and_inputs_and_renormalizes() {
    let server = StubServer::start(embedding_handler(16));
    let config = EmbedderConfig::http(HttpEmbedder::new(
        server.url("/v1/embeddings"),
        "emb-model",
        64,
        TIMEOUT,
        2,
    ));
    let texts = ["assign a = b;", "wire c;"];
    let got = embed_batch(&config, &ws(), &texts).unwrap();

    let requests = server.requests();
    assert_eq!(requests.len(), 1);
    assert_eq!(requests[0].body["model"], "emb-model");
    assert_eq!(
        requests[0].body["input"],
        serde_json::json!(["assign a = b;", "wire c;"])
    );

    for (text, embedding) in texts.iter().zip(&got) {
        assert!((embedding.l2_norm() - 1.0).abs() < 1e-12);
        let want = oracle_hash_embedding(text, 16);
        for (a, b) in embedding.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn embedder_truncates_over_window_inputs_to_their_head() {
    let server = StubServer::start(embedding_handler(8));
    let config = EmbedderConfig::http(HttpEmbedder::new(
        server.url("/v1/embeddings"),
        "emb-model",
        5,
        TIMEOUT,
        1,
    ));
    // 7 tokens; the first 5 end just before `gamma`
    embed_text(&config, &ws(), "assign alpha = beta & gamma;").unwrap();
    let requests = server.requests();
    assert_eq!(requests[0].body["input"], serde_json::json!(["assign alpha = beta & "]));
}

#[test]
fn embedder_splits_requests_by_batch_size() {
    let server = StubServer::start(embedding_handler(8));
    let config = EmbedderConfig::http(
        HttpEmbedder::new(server.url("/v1/embeddings"), "m", 64, TIMEOUT, 1).with_batch_size(4),
    );
    let texts: Vec<String> = (0..10).map(|i| format!("wire w{i};")).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let got = embed_batch(&config, &ws(), &refs).unwrap();
    assert_eq!(got.len(), 10);

    let sizes: Vec<usize> = server
        .requests()
        .iter()
        .map(|r| r.body["input"].as_array().unwrap().len())
        .collect();
    assert_eq!(sizes, vec![4, 4, 2]);

    // batching is invisible in the results
    let single = EmbedderConfig::http(HttpEmbedder::new(
        server.url("/v1/embeddings"),
        "m",
        64,
        TIMEOUT,
        1,
    ));
    for (i, text) in refs.iter().enumerate() {
        let alone = embed_text(&single, &ws(), text).unwrap();
        assert_eq!(alone.values(), got[i].values());
    }
}

#[test]
fn embedder_retries_transient_failures() {
    for transient_status in [500u16, 429] {
        let calls = AtomicUsize::new(0);
        let inner = embedding_handler(8);
        let server = StubServer::start(move |req| {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                Response::error(transient_status, "try again")
            } else {
                inner(req)
            }
        });
        let config = EmbedderConfig::http(
            HttpEmbedder::new(server.url("/v1/embeddings"), "m", 64, TIMEOUT, 1)
                .with_retries(2, Duration::from_millis(10)),
        );
        embed_text(&config, &ws(), "wire w;").unwrap();
        assert_eq!(server.request_count(), 2);
    }
}

#[test]
fn embedder_client_errors_fail_without_retry() {
    let server = StubServer::start(|_| Response::error(400, "bad request"));
    let config = EmbedderConfig::http(
        HttpEmbedder::new(server.url("/v1/embeddings"), "m", 64, TIMEOUT, 1)
            .with_retries(3, Duration::from_millis(10)),
    );
    let err = embed_text(&config, &ws(), "wire w;").unwrap_err();
    match err {
        EmbedError::AtIndex { index: 0, source } => match *source {
            EmbedError::Service { status: 400, .. } => {}
            other => panic!("expected a 400 service error, got {other:?}"),
        },
        other => panic!("expected an indexed error, got {other:?}"),
    }
    assert_eq!(server.request_count(), 1);
}

#[test]
fn embedder_rejects_dimension_drift_across_calls() {
    let calls = AtomicUsize::new(0);
    let server = StubServer::start(move |req| {
        let dim = if calls.fetch_add(1, Ordering::SeqCst) == 0 { 8 } else { 9 };
        embedding_handler(dim)(req)
    });
    let config = EmbedderConfig::http(HttpEmbedder::new(
        server.url("/v1/embeddings"),
        "m",
        64,
        TIMEOUT,
        1,
    ));
    embed_text(&config, &ws(), "wire a;").unwrap();
    let err = embed_text(&config, &ws(), "wire b;").unwrap_err();
    match err {
        EmbedError::AtIndex { source, .. } => match *source {
            EmbedError::DimensionMismatch { expected: 8, got: 9 } => {}
            other => panic!("expected a dimension mismatch, got {other:?}"),
        },
        other => panic!("expected an indexed error, got {other:?}"),
    }
}

#[test]
fn embedder_bounds_in_flight_requests() {
    let live = AtomicIsize::new(0);
    let peak = Mutex::new(0isize);
    let inner = embedding_handler(8);
    let server = StubServer::start(move |req| {
        let now = live.fetch_add(1, Ordering::SeqCst) + 1;
        {
            let mut peak = peak.lock().unwrap();
            *peak = (*peak).max(now);
        }
        std::thread::sleep(Duration::from_millis(60));
        live.fetch_sub(1, Ordering::SeqCst);
        if req.body["probe_peak"].is_null() {
            inner(req)
        } else {
            Response::ok(serde_json::json!({"peak": *peak.lock().unwrap()}))
        }
    });
    let config = EmbedderConfig::http(HttpEmbedder::new(
        server.url("/v1/embeddings"),
        "m",
        64,
        TIMEOUT,
        2,
    ));
    std::thread::scope(|scope| {
        for i in 0..6 {
            let config = config.clone();
            scope.spawn(move || {
                let text = format!("wire w{i};");
                embed_text(&config, &ws(), &text).unwrap();
            });
        }
    });
    // read the observed peak back through the stub itself
    let client = reqwest::blocking::Client::new();
    let peak: serde_json::Value = client
        .post(server.url("/v1/embeddings"))
        .json(&serde_json::json!({"probe_peak": true}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let peak = peak["peak"].as_i64().unwrap();
    assert!(peak >= 1, "the stub served requests");
    assert!(peak <= 3, "6 embeds with 2 permits never exceed 2 in flight (+1 probe headroom), saw {peak}");
}

#[test]
fn generator_completion_wire_shape() {
    let server = StubServer::start(|_| {
        Response::ok(serde_json::json!({
            "choices": [{"text": "assign q = d;\n// ignored tail"}]
        }))
    });
    let backend = GenerationBackend::Http(HttpGenerator::new(
        server.url("/v1/completions"),
        "code-model",
        WireFormat::Completion,
        TIMEOUT,
        1,
    ));
    let raw = backend.generate("module top;\n", &tiny_sample()).unwrap();
    assert_eq!(raw, "assign q = d;\n// ignored tail");

    let body = &server.requests()[0].body;
    assert_eq!(body["model"], "code-model");
    assert_eq!(body["prompt"], "module top;\n");
    assert_eq!(body["temperature"], 0.2);
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["stop"], serde_json::json!(["\n"]));
    assert!(body.get("messages").is_none());
}

#[test]
fn generator_chat_wire_shape() {
    let server = StubServer::start(|_| {
        Response::ok(serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": "wire x;"}}]
        }))
    });
    let backend = GenerationBackend::Http(
        HttpGenerator::new(
            server.url("/v1/chat/completions"),
            "chat-model",
            WireFormat::Chat,
            TIMEOUT,
            1,
        )
        .with_sampling(0.7, 32),
    );
    let raw = backend.generate("module top;\n", &tiny_sample()).unwrap();
    assert_eq!(raw, "wire x;");

    let body = &server.requests()[0].body;
    assert_eq!(body["model"], "chat-model");
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["max_tokens"], 32);
    assert_eq!(
        body["messages"],
        serde_json::json!([{"role": "user", "content": "module top;\n"}])
    );
    assert!(body.get("prompt").is_none());
}

#[test]
fn generator_retries_5xx_then_succeeds() {
    let calls = AtomicUsize::new(0);
    let server = StubServer::start(move |_| {
        if calls.fetch_add(1, Ordering::SeqCst) == 0 {
            Response::error(500, "busy")
        } else {
            Response::ok(serde_json::json!({"choices": [{"text": "ok"}]}))
        }
    });
    let backend = GenerationBackend::Http(
        HttpGenerator::new(server.url("/v1/completions"), "m", WireFormat::Completion, TIMEOUT, 1)
            .with_retries(2, Duration::from_millis(10)),
    );
    assert_eq!(backend.generate("p", &tiny_sample()).unwrap(), "ok");
    assert_eq!(server.request_count(), 2);
}

#[test]
fn generator_client_errors_fail_fast() {
    let server = StubServer::start(|_| Response::error(400, "bad prompt"));
    let backend = GenerationBackend::Http(
        HttpGenerator::new(server.url("/v1/completions"), "m", WireFormat::Completion, TIMEOUT, 1)
            .with_retries(3, Duration::from_millis(10)),
    );
    match backend.generate("p", &tiny_sample()).unwrap_err() {
        BackendError::Http { status: 400, .. } => {}
        other => panic!("expected a 400 error, got {other:?}"),
    }
    assert_eq!(server.request_count(), 1);
}

#[test]
fn generator_empty_choices_is_malformed() {
    let server = StubServer::start(|_| Response::ok(serde_json::json!({"choices": []})));
    let backend = GenerationBackend::Http(HttpGenerator::new(
        server.url("/v1/completions"),
        "m",
        WireFormat::Completion,
        TIMEOUT,
        1,
    ));
    assert!(matches!(
        backend.generate("p", &tiny_sample()).unwrap_err(),
        BackendError::Malformed(_)
    ));
}

#[test]
fn generator_times_out() {
    let server = StubServer::start(|_| {
        std::thread::sleep(Duration::from_millis(900));
        Response::ok(serde_json::json!({"choices": [{"text": "late"}]}))
    });
    let backend = GenerationBackend::Http(
        HttpGenerator::new(
            server.url("/v1/completions"),
            "m",
            WireFormat::Completion,
            Duration::from_millis(200),
            1,
        )
        .with_retries(0, Duration::from_millis(1)),
    );
    match backend.generate("p", &tiny_sample()).unwrap_err() {
        BackendError::Timeout(_) => {}
        other => panic!("expected a timeout, got {other:?}"),
    }
}
