mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use searchloop_core::protocol::{
    extract_answer, format_information, parse_transcript, render_segments, structural_kinds, InformationBlock,
    ProtocolError, QueryMode, SegmentKind,
};

use SegmentKind::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn generated_transcripts_round_trip(seed in any::<u64>()) {
        let (text, expected) = random_transcript(&mut ChaCha8Rng::seed_from_u64(seed));
        let parsed = parse_transcript(&text).unwrap();
        prop_assert_eq!(&parsed, &expected);
        prop_assert_eq!(render_segments(&parsed), text.clone());
        for s in &parsed {
            prop_assert_eq!(&text[s.range()], s.rendered());
        }
    }

    #[test]
    fn arbitrary_text_never_panics(text in ".{0,60}") {
        if let Ok(segments) = parse_transcript(&text) {
            prop_assert_eq!(render_segments(&segments), text);
        }
    }

    #[test]
    fn information_payload_survives_any_document(doc in ".{0,80}") {
        let block = InformationBlock { queries: vec!["q".into()], documents: vec![doc.clone()] };
        let rendered = format_information(&block, QueryMode::multi(), usize::MAX);
        let segments = parse_transcript(&rendered).unwrap();
        prop_assert_eq!(segments.len(), 1);
        prop_assert!(segments[0].is_closed(Information));
        let json: serde_json::Value = serde_json::from_str(&segments[0].text).unwrap();
        prop_assert_eq!(json["documents"][0].as_str().unwrap(), doc.as_str());
    }
}

#[test]
fn worked_transcripts_parse_to_recorded_structure() {
    let expected = [
        ("magazines_single", vec![Think, Search, Information, Think, Search, Information, Think, Answer]),
        ("magazines_multi", vec![Think, Search, Information, Think, Answer]),
        ("genera_single", vec![Think, Search, Information, Think, Search, Information, Think, Search, Information, Think, Answer]),
        ("genera_multi", vec![Think, Search, Information, Think, Search, Information, Think, Answer]),
    ];
    for (name, kinds) in expected {
        let text = fixture(name);
        let segments = parse_transcript(&text).unwrap();
        assert_eq!(structural_kinds(&segments), kinds, "{name}");
        assert_eq!(render_segments(&segments), text);
    }
    let answer = |name| extract_answer(&parse_transcript(&fixture(name)).unwrap());
    assert_eq!(answer("magazines_single").as_deref(), Some("Arthur's Magazine"));
    assert_eq!(answer("genera_single").as_deref(), Some("No"));
    assert_eq!(answer("genera_multi").as_deref(), Some("Yes"));
}

#[test]
fn misnesting_reports_the_offending_offset() {
    let cases = [
        ("<think>a<search>b</search></think>", 8),
        ("<think>a</answer>", 8),
        ("x</think>", 1),
        ("<answer>a</answer></answer>", 18),
    ];
    for (text, offset) in cases {
        match parse_transcript(text) {
            Err(ProtocolError::Parse { offset: got, .. }) => assert_eq!(got, offset, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
}

#[test]
fn truncated_block_is_incomplete() {
    let segments = parse_transcript("<think>a</think><search> partial qu").unwrap();
    assert_eq!(segments.len(), 2);
    assert!(!segments[1].complete);
    assert_eq!(segments[1].text, " partial qu");
    assert_eq!(render_segments(&segments), "<think>a</think><search> partial qu");
}
