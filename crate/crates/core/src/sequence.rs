//! Stream samples and the interleaved causal token stream.
//!
//! A frame contributes `V` tokens: `V − 1` patch tokens followed by one
//! frame-last token. Text spans follow the frame they are anchored to.
//!
//! Labels per position `j`:
//! - `lm[j]` is set iff token `j` is a response token;
//! - `stream[j]` is set iff token `j` is frame-last and `lm[j + 1]` is
//!   clear, with `lm[N]` taken as clear so a trailing frame is supervised.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::END_OF_RESPONSE_ID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    VisionPatch,
    FrameLast,
    TextPrompt,
    TextResponse,
}

impl TokenRole {
    pub fn is_vision(self) -> bool {
        matches!(self, TokenRole::VisionPatch | TokenRole::FrameLast)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Prompt,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    Frame {
        frame_id: usize,
        tokens: Vec<usize>,
    },
    Text {
        anchor: usize,
        kind: SpanKind,
        tokens: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSample {
    /// Number of frames.
    pub duration: usize,
    pub events: Vec<StreamEvent>,
}

impl StreamSample {
    pub fn frame_ids(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter_map(|e| match e {
                StreamEvent::Frame { frame_id, .. } => Some(*frame_id),
                _ => None,
            })
            .collect()
    }

    pub fn response_token_count(&self) -> usize {
        self.events
            .iter()
            .map(|e| match e {
                StreamEvent::Text {
                    kind: SpanKind::Response,
                    tokens,
                    ..
                } => tokens.len(),
                _ => 0,
            })
            .sum()
    }

    pub fn text_span_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, StreamEvent::Text { .. }))
            .count()
    }

    /// The same stream with every text event removed.
    pub fn without_text(&self) -> StreamSample {
        StreamSample {
            duration: self.duration,
            events: self
                .events
                .iter()
                .filter(|e| matches!(e, StreamEvent::Frame { .. }))
                .cloned()
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.events.is_empty() {
            return Err(Error::Sample("empty sample".into()));
        }
        let ids = self.frame_ids();
        if ids.is_empty() {
            return Err(Error::Sample("sample has no frames".into()));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Sample("frame ids must be strictly increasing".into()));
        }
        if ids.len() != self.duration {
            return Err(Error::Sample(format!(
                "duration {} disagrees with {} frames",
                self.duration,
                ids.len()
            )));
        }
        for e in &self.events {
            if let StreamEvent::Text { anchor, kind, tokens } = e {
                if ids.binary_search(anchor).is_err() {
                    return Err(Error::Sample(format!("anchor {anchor} is not a frame id")));
                }
                if tokens.is_empty() {
                    return Err(Error::Sample(format!("empty text span anchored at {anchor}")));
                }
                if *kind == SpanKind::Response && tokens.last() != Some(&END_OF_RESPONSE_ID) {
                    return Err(Error::Sample(format!(
                        "response span at {anchor} does not end with end-of-response"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSpan {
    pub frame_id: usize,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSpanInfo {
    /// Index among the sample's text events, in event order.
    pub ordinal: usize,
    pub kind: SpanKind,
    pub anchor: usize,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedSequence {
    pub frame_tokens: usize,
    pub token_ids: Vec<usize>,
    pub roles: Vec<TokenRole>,
    /// Frame id for vision tokens, `None` for text.
    pub frame_of: Vec<Option<usize>>,
    pub positions: Vec<usize>,
    pub lm: Vec<bool>,
    pub stream: Vec<bool>,
    /// Next token id, `None` at the last position.
    pub targets: Vec<Option<usize>>,
    pub frames: Vec<FrameSpan>,
    pub spans: Vec<TextSpanInfo>,
}

impl InterleavedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn lm_count(&self) -> usize {
        self.lm.iter().filter(|&&b| b).count()
    }

    pub fn stream_count(&self) -> usize {
        self.stream.iter().filter(|&&b| b).count()
    }

    pub fn is_vision(&self) -> Vec<bool> {
        self.roles.iter().map(|r| r.is_vision()).collect()
    }

    /// Recomputes `stream` from roles and `lm`.
    pub fn recompute_stream_labels(&mut self) {
        let n = self.len();
        for j in 0..n {
            let next_lm = j + 1 < n && self.lm[j + 1];
            self.stream[j] = self.roles[j] == TokenRole::FrameLast && !next_lm;
        }
    }

    /// Consumption units for incremental decoding: a whole frame, or a
    /// single text token.
    pub fn stream_chunks(&self) -> Vec<Range<usize>> {
        let mut chunks = Vec::new();
        let mut j = 0;
        while j < self.len() {
            if self.roles[j].is_vision() {
                chunks.push(j..j + self.frame_tokens);
                j += self.frame_tokens;
            } else {
                chunks.push(j..j + 1);
                j += 1;
            }
        }
        chunks
    }

    /// The first `len` tokens, with labels recomputed as if the stream ended
    /// there.
    pub fn prefix(&self, len: usize) -> InterleavedSequence {
        let len = len.min(self.len());
        let mut out = InterleavedSequence {
            frame_tokens: self.frame_tokens,
            token_ids: self.token_ids[..len].to_vec(),
            roles: self.roles[..len].to_vec(),
            frame_of: self.frame_of[..len].to_vec(),
            positions: self.positions[..len].to_vec(),
            lm: self.lm[..len].to_vec(),
            stream: vec![false; len],
            targets: self.targets[..len].to_vec(),
            frames: self.frames.iter().filter(|f| f.range.end <= len).cloned().collect(),
            spans: self
                .spans
                .iter()
                .filter(|s| s.range.start < len)
                .map(|s| TextSpanInfo {
                    range: s.range.start..s.range.end.min(len),
                    ..s.clone()
                })
                .collect(),
        };
        if len > 0 {
            out.targets[len - 1] = None;
        }
        out.recompute_stream_labels();
        out
    }
}

/// Lays out a sample as a causal token stream and computes its labels.
pub fn interleave(sample: &StreamSample, frame_tokens: usize) -> Result<InterleavedSequence> {
    if frame_tokens == 0 {
        return Err(Error::Sample("frame token count must be positive".into()));
    }
    sample.validate()?;

    // (ordinal, event) per anchor, in event order
    let mut text_events: Vec<(usize, usize, SpanKind, &[usize])> = Vec::new();
    let mut ordinal = 0;
    for e in &sample.events {
        if let StreamEvent::Text { anchor, kind, tokens } = e {
            text_events.push((ordinal, *anchor, *kind, tokens));
            ordinal += 1;
        }
    }

    let mut seq = InterleavedSequence {
        frame_tokens,
        token_ids: Vec::new(),
        roles: Vec::new(),
        frame_of: Vec::new(),
        positions: Vec::new(),
        lm: Vec::new(),
        stream: Vec::new(),
        targets: Vec::new(),
        frames: Vec::new(),
        spans: Vec::new(),
    };
    for e in &sample.events {
        let StreamEvent::Frame { frame_id, tokens } = e else {
            continue;
        };
        if tokens.len() != frame_tokens {
            return Err(Error::Sample(format!(
                "frame {frame_id} has {} tokens, expected {frame_tokens}",
                tokens.len()
            )));
        }
        let start = seq.token_ids.len();
        for (i, &t) in tokens.iter().enumerate() {
            seq.token_ids.push(t);
            seq.roles.push(if i + 1 == frame_tokens {
                TokenRole::FrameLast
            } else {
                TokenRole::VisionPatch
            });
            seq.frame_of.push(Some(*frame_id));
        }
        seq.frames.push(FrameSpan {
            frame_id: *frame_id,
            range: start..start + frame_tokens,
        });
        for &(ordinal, anchor, kind, tokens) in text_events.iter().filter(|t| t.1 == *frame_id) {
            let start = seq.token_ids.len();
            let role = match kind {
                SpanKind::Prompt => TokenRole::TextPrompt,
                SpanKind::Response => TokenRole::TextResponse,
            };
            for &t in tokens {
                seq.token_ids.push(t);
                seq.roles.push(role);
                seq.frame_of.push(None);
            }
            seq.spans.push(TextSpanInfo {
                ordinal,
                kind,
                anchor,
                range: start..seq.token_ids.len(),
            });
        }
    }

    let n = seq.token_ids.len();
    seq.positions = (0..n).collect();
    seq.lm = seq.roles.iter().map(|&r| r == TokenRole::TextResponse).collect();
    seq.stream = vec![false; n];
    seq.recompute_stream_labels();
    seq.targets = (0..n).map(|j| seq.token_ids.get(j + 1).copied()).collect();
    Ok(seq)
}

/// Contiguous token ranges holding each frame's vision tokens, in order.
pub fn flatten_frames(seq: &InterleavedSequence) -> Vec<(usize, Range<usize>)> {
    seq.frames.iter().map(|f| (f.frame_id, f.range.clone())).collect()
}

/// Writes one JSON record per line.
pub fn write_samples(path: &Path, samples: &[StreamSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<StreamSample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: StreamSample =
            serde_json::from_str(&line).map_err(|e| Error::Sample(format!("{}:{}: {e}", path.display(), i + 1)))?;
        s.validate()?;
        samples.push(s);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TokenRole::*;

    const EOR: usize = END_OF_RESPONSE_ID;

    fn frame(id: usize, tokens: &[usize]) -> StreamEvent {
        StreamEvent::Frame {
            frame_id: id,
            tokens: tokens.to_vec(),
        }
    }

    fn response(anchor: usize, tokens: &[usize]) -> StreamEvent {
        StreamEvent::Text {
            anchor,
            kind: SpanKind::Response,
            tokens: tokens.to_vec(),
        }
    }

    fn bits(v: &[bool]) -> Vec<u8> {
        v.iter().map(|&b| b as u8).collect()
    }

    #[test]
    fn single_frame_then_response() {
        let s = StreamSample {
            duration: 1,
            events: vec![frame(0, &[10, 11]), response(0, &[20, 21, EOR])],
        };
        let seq = interleave(&s, 2).unwrap();
        assert_eq!(
            seq.roles,
            vec![VisionPatch, FrameLast, TextResponse, TextResponse, TextResponse]
        );
        assert_eq!(bits(&seq.lm), vec![0, 0, 1, 1, 1]);
        assert_eq!(bits(&seq.stream), vec![0, 0, 0, 0, 0]);
        assert_eq!(seq.targets, vec![Some(11), Some(20), Some(21), Some(EOR), None]);
    }

    #[test]
    fn frames_without_text_supervise_every_frame_last() {
        let s = StreamSample {
            duration: 2,
            events: vec![frame(0, &[3, 4]), frame(1, &[5, 6])],
        };
        let seq = interleave(&s, 2).unwrap();
        assert_eq!(bits(&seq.lm), vec![0, 0, 0, 0]);
        assert_eq!(bits(&seq.stream), vec![0, 1, 0, 1]);
    }

    #[test]
    fn empty_response_span_is_rejected() {
        let s = StreamSample {
            duration: 1,
            events: vec![frame(0, &[3, 4]), response(0, &[])],
        };
        assert!(matches!(interleave(&s, 2), Err(Error::Sample(_))));
    }

    #[test]
    fn malformed_samples_are_rejected() {
        let bad_anchor = StreamSample {
            duration: 1,
            events: vec![frame(0, &[3, 4]), response(5, &[7, EOR])],
        };
        assert!(interleave(&bad_anchor, 2).is_err());
        let unordered = StreamSample {
            duration: 2,
            events: vec![frame(1, &[3, 4]), frame(0, &[3, 4])],
        };
        assert!(interleave(&unordered, 2).is_err());
        let no_eor = StreamSample {
            duration: 1,
            events: vec![frame(0, &[3, 4]), response(0, &[7])],
        };
        assert!(interleave(&no_eor, 2).is_err());
        let empty = StreamSample {
            duration: 0,
            events: vec![],
        };
        assert!(interleave(&empty, 2).is_err());
        let wrong_width = StreamSample {
            duration: 1,
            events: vec![frame(0, &[3, 4, 5])],
        };
        assert!(interleave(&wrong_width, 2).is_err());
    }

    #[test]
    fn prompts_are_not_lm_supervised() {
        let s = StreamSample {
            duration: 2,
            events: vec![
                frame(0, &[3, 4]),
                StreamEvent::Text {
                    anchor: 0,
                    kind: SpanKind::Prompt,
                    tokens: vec![30, 31],
                },
                frame(1, &[5, 6]),
            ],
        };
        let seq = interleave(&s, 2).unwrap();
        assert_eq!(bits(&seq.lm), vec![0; 6]);
        // FrameLast of frame 0 is followed by an unsupervised prompt token.
        assert_eq!(bits(&seq.stream), vec![0, 1, 0, 0, 0, 1]);
    }

    #[test]
    fn simultaneous_spans_keep_event_order() {
        let s = StreamSample {
            duration: 1,
            events: vec![response(0, &[40, EOR]), frame(0, &[3, 4]), response(0, &[41, EOR])],
        };
        let seq = interleave(&s, 2).unwrap();
        assert_eq!(seq.token_ids, vec![3, 4, 40, EOR, 41, EOR]);
        assert_eq!(seq.spans.iter().map(|s| s.ordinal).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn flatten_frames_covers_vision_tokens() {
        let mut events = Vec::new();
        for f in 0..3 {
            events.push(frame(f, &[2; 10]));
            events.push(response(f, &[7, EOR]));
        }
        let s = StreamSample { duration: 3, events };
        let seq = interleave(&s, 10).unwrap();
        let ranges = flatten_frames(&seq);
        assert_eq!(ranges.len(), 3);
        assert!(ranges.iter().all(|(_, r)| r.len() == 10));
        assert_eq!(ranges[1].1, 12..22);
    }

    #[test]
    fn stream_chunks_split_frames_and_text_tokens() {
        let s = StreamSample {
            duration: 2,
            events: vec![frame(0, &[3, 4]), response(0, &[8, EOR]), frame(1, &[5, 6])],
        };
        let seq = interleave(&s, 2).unwrap();
        assert_eq!(seq.stream_chunks(), vec![0..2, 2..3, 3..4, 4..6]);
    }

    #[test]
    fn jsonl_roundtrip() {
        let s = StreamSample {
            duration: 1,
            events: vec![frame(0, &[3, 4]), response(0, &[8, EOR])],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_samples(&path, &[s.clone(), s.clone()]).unwrap();
        assert_eq!(read_samples(&path).unwrap(), vec![s.clone(), s]);
        let line = fs::read_to_string(&path).unwrap();
        assert!(line.starts_with(r#"{"duration":1,"events":[{"type":"frame","frame_id":0,"tokens":[3,4]}"#));
    }

    fn arb_sample() -> impl Strategy<Value = StreamSample> {
        // per frame: optional span kind (0 none, 1 prompt, 2 response) and length
        proptest::collection::vec((0u8..3, 1usize..4), 1..8).prop_map(|frames| {
            let mut events = Vec::new();
            for (i, (kind, len)) in frames.iter().enumerate() {
                events.push(frame(i, &[2, 3, 4]));
                match kind {
                    1 => events.push(StreamEvent::Text {
                        anchor: i,
                        kind: SpanKind::Prompt,
                        tokens: vec![9; *len],
                    }),
                    2 => {
                        let mut t = vec![9; *len - 1];
                        t.push(EOR);
                        events.push(response(i, &t));
                    }
                    _ => {}
                }
            }
            StreamSample {
                duration: frames.len(),
                events,
            }
        })
    }

    proptest! {
        #[test]
        fn label_counts_match_sample(s in arb_sample()) {
            let seq = interleave(&s, 3).unwrap();
            prop_assert_eq!(seq.lm_count(), s.response_token_count());
            let expected_stream = seq
                .frames
                .iter()
                .filter(|f| {
                    let next = f.range.end;
                    next >= seq.len() || seq.roles[next] != TokenRole::TextResponse
                })
                .count();
            prop_assert_eq!(seq.stream_count(), expected_stream);
            for j in 0..seq.len() {
                if j + 1 < seq.len() && seq.lm[j + 1] {
                    prop_assert!(!seq.stream[j]);
                }
            }
            // ranges are sorted, disjoint and exactly the vision tokens
            let ranges = flatten_frames(&seq);
            let mut covered = vec![false; seq.len()];
            let mut last_end = 0;
            for (_, r) in &ranges {
                prop_assert!(r.start >= last_end);
                last_end = r.end;
                for j in r.clone() { covered[j] = true; }
            }
            prop_assert_eq!(covered, seq.is_vision());
        }

        #[test]
        fn removing_text_preserves_frame_order(s in arb_sample()) {
            let full = interleave(&s, 3).unwrap();
            let bare = interleave(&s.without_text(), 3).unwrap();
            let frames_full: Vec<usize> = full.frames.iter().map(|f| f.frame_id).collect();
            let frames_bare: Vec<usize> = bare.frames.iter().map(|f| f.frame_id).collect();
            prop_assert_eq!(frames_full, frames_bare);
            prop_assert_eq!(bare.lm_count(), 0);
            prop_assert_eq!(bare.stream_count(), bare.frames.len());
        }
    }
}
