//! Flat tag grammar of a transcript.
//!
//! ```text
//! transcript := (plain | block)* open-block?
//! block      := "<think>" text "</think>" | "<search>" text "</search>"
//!             | "<information>" any "</information>" | "<answer>" text "</answer>"
//! ```
//!
//! Tags do not nest. Inside think/search/answer any of the eight tag strings
//! other than the matching close tag is an error. Information content is
//! opaque up to the first `</information>`, since retrieved documents may
//! contain arbitrary markup. A block left open at end of input is kept as an
//! incomplete segment so that truncated generations still parse.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Think,
    Search,
    Information,
    Answer,
    Plain,
}

impl SegmentKind {
    pub const TAGGED: [SegmentKind; 4] = [Self::Think, Self::Search, Self::Information, Self::Answer];

    pub fn name(self) -> &'static str {
        match self {
            Self::Think => "think",
            Self::Search => "search",
            Self::Information => "information",
            Self::Answer => "answer",
            Self::Plain => "plain",
        }
    }

    pub fn open_tag(self) -> &'static str {
        match self {
            Self::Think => "<think>",
            Self::Search => "<search>",
            Self::Information => "<information>",
            Self::Answer => "<answer>",
            Self::Plain => "",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            Self::Think => "</think>",
            Self::Search => "</search>",
            Self::Information => "</information>",
            Self::Answer => "</answer>",
            Self::Plain => "",
        }
    }
}

/// A typed span of a transcript. `text` excludes the tags; `span` covers
/// them, as byte offsets into the transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    pub span: (usize, usize),
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub complete: bool,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.span.0..self.span.1
    }

    pub fn len(&self) -> usize {
        self.span.1 - self.span.0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_closed(&self, kind: SegmentKind) -> bool {
        self.kind == kind && self.complete
    }

    /// The segment as it appears in the transcript.
    pub fn rendered(&self) -> String {
        let mut out = String::with_capacity(self.len());
        self.render_into(&mut out);
        out
    }

    fn render_into(&self, out: &mut String) {
        out.push_str(self.kind.open_tag());
        out.push_str(&self.text);
        if self.complete {
            out.push_str(self.kind.close_tag());
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TagHit {
    at: usize,
    kind: SegmentKind,
    closing: bool,
}

impl TagHit {
    fn tag(&self) -> &'static str {
        if self.closing {
            self.kind.close_tag()
        } else {
            self.kind.open_tag()
        }
    }
}

fn next_tag(text: &str, from: usize) -> Option<TagHit> {
    let mut cursor = from;
    while let Some(rel) = text[cursor..].find('<') {
        let at = cursor + rel;
        let rest = &text[at..];
        for kind in SegmentKind::TAGGED {
            if rest.starts_with(kind.open_tag()) {
                return Some(TagHit { at, kind, closing: false });
            }
            if rest.starts_with(kind.close_tag()) {
                return Some(TagHit { at, kind, closing: true });
            }
        }
        cursor = at + 1;
    }
    None
}

pub fn parse_transcript(text: &str) -> Result<Vec<Segment>, ProtocolError> {
    let mut segments = Vec::new();
    let mut pos = 0;

    while pos < text.len() {
        let Some(open) = next_tag(text, pos) else {
            segments.push(plain(text, pos, text.len()));
            break;
        };
        if open.closing {
            return Err(ProtocolError::Parse {
                offset: open.at,
                message: format!("`{}` without a matching open tag", open.tag()),
            });
        }
        if open.at > pos {
            segments.push(plain(text, pos, open.at));
        }
        let kind = open.kind;
        let body_start = open.at + kind.open_tag().len();

        let close_at = if kind == SegmentKind::Information {
            text[body_start..].find(kind.close_tag()).map(|rel| body_start + rel)
        } else {
            match next_tag(text, body_start) {
                Some(hit) if hit.closing && hit.kind == kind => Some(hit.at),
                Some(hit) => {
                    return Err(ProtocolError::Parse {
                        offset: hit.at,
                        message: format!("expected `{}`, found `{}`", kind.close_tag(), hit.tag()),
                    })
                }
                None => None,
            }
        };

        match close_at {
            Some(close_at) => {
                let end = close_at + kind.close_tag().len();
                segments.push(Segment {
                    kind,
                    text: text[body_start..close_at].to_string(),
                    span: (open.at, end),
                    complete: true,
                });
                pos = end;
            }
            None => {
                segments.push(Segment {
                    kind,
                    text: text[body_start..].to_string(),
                    span: (open.at, text.len()),
                    complete: false,
                });
                pos = text.len();
            }
        }
    }
    Ok(segments)
}

fn plain(text: &str, start: usize, end: usize) -> Segment {
    Segment {
        kind: SegmentKind::Plain,
        text: text[start..end].to_string(),
        span: (start, end),
        complete: true,
    }
}

/// Inverse of [`parse_transcript`] on its own output.
pub fn render_segments(segments: &[Segment]) -> String {
    let mut out = String::new();
    for segment in segments {
        segment.render_into(&mut out);
    }
    out
}

/// Segment kinds with whitespace-only plain text between tags dropped.
pub fn structural_kinds(segments: &[Segment]) -> Vec<SegmentKind> {
    segments
        .iter()
        .filter(|s| !(s.kind == SegmentKind::Plain && s.text.trim().is_empty()))
        .map(|s| s.kind)
        .collect()
}

/// Inner text of the last complete answer, trimmed.
pub fn extract_answer(segments: &[Segment]) -> Option<String> {
    segments
        .iter()
        .rev()
        .find(|s| s.is_closed(SegmentKind::Answer))
        .map(|s| s.text.trim().to_string())
}
