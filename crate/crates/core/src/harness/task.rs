//! Synthetic streaming task with a planted spatial signal.
//!
//! Patch symbols split into `num_events` event symbols and noise symbols.
//! While event `e` is active, `signal_positions` randomly chosen slots of each
//! frame show event symbol `e`; every other slot shows noise. A new event
//! starts at a frame with probability `event_prob`, and its narration is
//! anchored at that onset frame. Event ids do not repeat within a stream;
//! once all are used, the last one stays active.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{SpanKind, StreamEvent, StreamSample};
use crate::{END_OF_RESPONSE_ID, NUM_SPECIAL_TOKENS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    pub patch_vocab: usize,
    pub text_vocab: usize,
    pub frame_tokens: usize,
    pub signal_positions: usize,
    pub num_events: usize,
    pub event_prob: f64,
    pub response_len: usize,
    pub duration: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            patch_vocab: 64,
            text_vocab: 64,
            frame_tokens: 10,
            signal_positions: 1,
            num_events: 16,
            event_prob: 0.3,
            response_len: 3,
            duration: 8,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.frame_tokens == 0 || self.duration == 0 {
            return err("frame_tokens and duration must be positive".into());
        }
        if self.signal_positions >= self.frame_tokens {
            return err(format!(
                "signal_positions {} must be below tokens per frame {}",
                self.signal_positions, self.frame_tokens
            ));
        }
        if self.num_events < 2 || self.num_events >= self.patch_vocab {
            return err("need at least two events and at least one noise symbol".into());
        }
        if self.response_len == 0 || self.text_vocab == 0 {
            return err("response_len and text_vocab must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.event_prob) {
            return err(format!("event_prob {} outside [0, 1]", self.event_prob));
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        NUM_SPECIAL_TOKENS + self.patch_vocab + self.text_vocab
    }

    pub fn event_symbol(&self, event: usize) -> usize {
        NUM_SPECIAL_TOKENS + event
    }

    fn noise_range(&self) -> std::ops::Range<usize> {
        NUM_SPECIAL_TOKENS + self.num_events..NUM_SPECIAL_TOKENS + self.patch_vocab
    }

    pub fn text_base(&self) -> usize {
        NUM_SPECIAL_TOKENS + self.patch_vocab
    }

    /// Narration of `event`: `response_len` text tokens then end-of-response.
    pub fn narration(&self, event: usize) -> Vec<usize> {
        let mut t: Vec<usize> = (0..self.response_len)
            .map(|i| self.text_base() + (event * self.response_len + i) % self.text_vocab)
            .collect();
        t.push(END_OF_RESPONSE_ID);
        t
    }

    /// Expected fraction of kept tokens carrying signal under random keep.
    pub fn chance_precision(&self) -> f64 {
        self.signal_positions as f64 / self.frame_tokens as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub frame_id: usize,
    pub event: usize,
    pub narration: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GroundTruth {
    pub events: Vec<EventRecord>,
    /// Signal-bearing slots of each frame, ascending; empty before the first
    /// event.
    pub signal_slots: Vec<Vec<usize>>,
}

/// One stream; deterministic in `cfg.seed` and `index`.
pub fn generate_stream(cfg: &SyntheticTaskConfig, index: u64) -> Result<(StreamSample, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let noise = cfg.noise_range();
    let mut events = Vec::new();
    let mut truth = GroundTruth::default();
    let mut current: Option<usize> = None;
    let mut unused: Vec<usize> = (0..cfg.num_events).collect();
    for f in 0..cfg.duration {
        let mut onset = None;
        if cfg.event_prob > 0.0 && rng.random_bool(cfg.event_prob) && !unused.is_empty() {
            let e = unused.swap_remove(rng.random_range(0..unused.len()));
            current = Some(e);
            onset = Some(e);
        }
        let mut tokens: Vec<usize> = (0..cfg.frame_tokens).map(|_| rng.random_range(noise.clone())).collect();
        let mut slots = Vec::new();
        if let Some(e) = current {
            slots = sample_indices(&mut rng, cfg.frame_tokens, cfg.signal_positions).into_vec();
            slots.sort_unstable();
            for &s in &slots {
                tokens[s] = cfg.event_symbol(e);
            }
        }
        truth.signal_slots.push(slots);
        events.push(StreamEvent::Frame { frame_id: f, tokens });
        if let Some(e) = onset {
            let narration = cfg.narration(e);
            events.push(StreamEvent::Text {
                anchor: f,
                kind: SpanKind::Response,
                tokens: narration.clone(),
            });
            truth.events.push(EventRecord {
                frame_id: f,
                event: e,
                narration,
            });
        }
    }
    Ok((
        StreamSample {
            duration: cfg.duration,
            events,
        },
        truth,
    ))
}

/// `count` streams with indices `first..first + count`.
pub fn generate_dataset(
    cfg: &SyntheticTaskConfig,
    first: u64,
    count: usize,
) -> Result<Vec<(StreamSample, GroundTruth)>> {
    (0..count as u64).map(|i| generate_stream(cfg, first + i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_events_means_silent_noise() {
        let cfg = SyntheticTaskConfig {
            event_prob: 0.0,
            ..Default::default()
        };
        let (s, t) = generate_stream(&cfg, 0).unwrap();
        assert_eq!(s.text_span_count(), 0);
        assert!(t.events.is_empty());
        assert!(t.signal_slots.iter().all(Vec::is_empty));
        for e in &s.events {
            if let StreamEvent::Frame { tokens, .. } = e {
                assert!(tokens.iter().all(|&x| cfg.noise_range().contains(&x)));
            }
        }
    }

    #[test]
    fn replay_is_identical() {
        let cfg = SyntheticTaskConfig::default();
        assert_eq!(generate_stream(&cfg, 3).unwrap(), generate_stream(&cfg, 3).unwrap());
        assert_ne!(generate_stream(&cfg, 3).unwrap().0, generate_stream(&cfg, 4).unwrap().0);
    }

    #[test]
    fn narration_follows_its_onset_frame() {
        let cfg = SyntheticTaskConfig {
            event_prob: 0.2,
            duration: 64,
            ..Default::default()
        };
        let (s, t) = generate_stream(&cfg, 1).unwrap();
        s.validate().unwrap();
        assert!(!t.events.is_empty());
        for rec in &t.events {
            let pos = s
                .events
                .iter()
                .position(|e| matches!(e, StreamEvent::Frame { frame_id, .. } if *frame_id == rec.frame_id))
                .unwrap();
            assert_eq!(
                s.events[pos + 1],
                StreamEvent::Text {
                    anchor: rec.frame_id,
                    kind: SpanKind::Response,
                    tokens: cfg.narration(rec.event),
                }
            );
        }
        let mut ids: Vec<usize> = t.events.iter().map(|e| e.event).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), t.events.len());
    }

    #[test]
    fn signal_slots_carry_the_active_event() {
        let cfg = SyntheticTaskConfig {
            event_prob: 0.3,
            signal_positions: 2,
            duration: 32,
            ..Default::default()
        };
        let (s, t) = generate_stream(&cfg, 2).unwrap();
        let mut active = None;
        let mut next_event = t.events.iter().peekable();
        for e in &s.events {
            let StreamEvent::Frame { frame_id, tokens } = e else {
                continue;
            };
            if next_event.peek().is_some_and(|r| r.frame_id == *frame_id) {
                active = Some(next_event.next().unwrap().event);
            }
            let slots = &t.signal_slots[*frame_id];
            match active {
                None => assert!(slots.is_empty()),
                Some(ev) => {
                    assert_eq!(slots.len(), 2);
                    for (i, &tok) in tokens.iter().enumerate() {
                        assert_eq!(tok == cfg.event_symbol(ev), slots.contains(&i));
                    }
                }
            }
        }
    }

    #[test]
    fn narration_encoding() {
        let cfg = SyntheticTaskConfig::default();
        let base = cfg.text_base();
        assert_eq!(cfg.narration(2), vec![base + 6, base + 7, base + 8, END_OF_RESPONSE_ID]);
        assert_eq!(cfg.narration(21)[0], base + 63);
        assert_eq!(cfg.vocab(), 130);
        assert!((cfg.chance_precision() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs() {
        let bad = SyntheticTaskConfig {
            signal_positions: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SyntheticTaskConfig {
            event_prob: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
