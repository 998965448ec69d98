mod common;

use std::time::Duration;

use base64::Engine;
use common::{is_sc_prompt, Reply, StubServer};
use shapeedit_core::microworld::Raster;
use shapeedit_core::record::EditRecord;
use shapeedit_core::scoring::{score_dataset, ExternalScorerConfig, ScoreOptions, ScorerEndpoint};
use shapeedit_core::specialists::{generate_dataset, CorruptionConfig, GenConfig};

fn records(n: usize) -> Vec<EditRecord> {
    generate_dataset(&GenConfig { n_records: n, seed: 8, corruption: CorruptionConfig::clean() }, 1).unwrap()
}

fn endpoint(url: &str, token_env: &str) -> ScorerEndpoint {
    ScorerEndpoint::External(ExternalScorerConfig {
        base_url: url.to_string(),
        token_env: token_env.to_string(),
        model: "stub-model".into(),
        max_in_flight: 2,
        max_retries: 1,
        backoff_base_ms: 1,
        timeout_ms: 5_000,
    })
}

fn replying(sc: [u8; 2], pq: u8) -> impl Fn(usize, &str) -> Reply + Send + Sync + 'static {
    move |_, p| {
        if is_sc_prompt(p) {
            Reply::Text(format!("{{\"score\": [{}, {}], \"reasoning\": \"r\"}}", sc[0], sc[1]))
        } else {
            Reply::Text(format!("{{\"score\": {pq}, \"reasoning\": \"r\"}}"))
        }
    }
}

fn decode(v: &serde_json::Value) -> Raster {
    let bytes = base64::engine::general_purpose::STANDARD.decode(v.as_str().unwrap()).unwrap();
    Raster::from_ppm(&bytes).unwrap()
}

#[test]
fn requests_carry_token_model_prompts_and_images() {
    std::env::set_var("SHAPEEDIT_TEST_TOKEN_A", "tok-123");
    let stub = StubServer::start(Duration::ZERO, replying([8, 8], 9));
    let mut recs = records(1);
    score_dataset(&mut recs, &endpoint(&stub.url, "SHAPEEDIT_TEST_TOKEN_A"), &ScoreOptions::default()).unwrap();
    let hits = stub.hits.lock().unwrap();
    assert_eq!(hits.len(), 2);
    let r = &recs[0];
    for h in hits.iter() {
        assert_eq!(h.auth.as_deref(), Some("Bearer tok-123"));
        assert_eq!(h.body["model"], "stub-model");
        let images = h.body["images"].as_array().unwrap();
        if is_sc_prompt(&h.prompt) {
            assert!(h.prompt.contains(&r.instruction.surface_text));
            assert_eq!(images.len(), 2);
            assert_eq!((decode(&images[0]), decode(&images[1])), (r.src.clone(), r.edited.clone()));
        } else {
            assert!(h.prompt.contains("indicates an artifact-free image"));
            assert_eq!(images.len(), 1);
            assert_eq!(decode(&images[0]), r.edited);
        }
    }
    let card = r.scores.as_ref().unwrap();
    assert_eq!((card.sc, card.pq), (8, 9));
    let ex = r.exchange.as_ref().unwrap();
    assert!(ex.sc_response.contains("[8, 8]") && ex.pq_response.contains("9"));
}

#[test]
fn missing_token_sends_no_auth_header() {
    let stub = StubServer::start(Duration::ZERO, replying([8, 8], 9));
    let mut recs = records(1);
    score_dataset(&mut recs, &endpoint(&stub.url, "SHAPEEDIT_TEST_TOKEN_UNSET"), &ScoreOptions::default()).unwrap();
    assert!(stub.hits.lock().unwrap().iter().all(|h| h.auth.is_none()));
}

#[test]
fn scored_records_are_not_resent_unless_asked() {
    let stub = StubServer::start(Duration::ZERO, replying([6, 7], 7));
    let ep = endpoint(&stub.url, "SHAPEEDIT_TEST_TOKEN_UNSET");
    let mut recs = records(5);
    let first = score_dataset(&mut recs, &ep, &ScoreOptions::default()).unwrap();
    assert_eq!((first.external_calls, first.newly_scored), (10, 5));
    let second = score_dataset(&mut recs, &ep, &ScoreOptions::default()).unwrap();
    assert_eq!((second.external_calls, second.newly_scored), (0, 0));
    assert_eq!(stub.count(), 10);
    let again = score_dataset(&mut recs, &ep, &ScoreOptions { rescore: true, ..Default::default() }).unwrap();
    assert_eq!(again.external_calls, 10);
    assert_eq!(stub.count(), 20);
}

#[test]
fn zero_threshold_keeps_everything_scored() {
    let stub = StubServer::start(Duration::ZERO, replying([0, 1], 0));
    let mut recs = records(7);
    let opts = ScoreOptions { threshold: 0.0, ..Default::default() };
    let rep = score_dataset(&mut recs, &endpoint(&stub.url, "SHAPEEDIT_TEST_TOKEN_UNSET"), &opts).unwrap();
    assert_eq!(rep.retention(), 1.0);
    assert!(recs.iter().all(|r| r.weight == Some(1)));
    let strict = ScoreOptions { threshold: 9.0, ..Default::default() };
    let rep = score_dataset(&mut recs, &endpoint(&stub.url, "SHAPEEDIT_TEST_TOKEN_UNSET"), &strict).unwrap();
    assert_eq!((rep.retention(), rep.external_calls), (0.0, 0));
}

#[test]
fn unreachable_endpoint_leaves_records_unscored() {
    let ep = endpoint("http://127.0.0.1:9/score", "SHAPEEDIT_TEST_TOKEN_UNSET");
    let mut recs = records(2);
    let rep = score_dataset(&mut recs, &ep, &ScoreOptions::default()).unwrap();
    assert_eq!((rep.unscored, rep.total_post), (2, 0));
    assert!(recs.iter().all(|r| r.score_error.is_some() && r.weight.is_none()));
}
