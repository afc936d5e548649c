use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Timing grid in seconds; starts and durations are whole multiples of it.
pub const GRID: f64 = 0.1;
/// Clip length in grid units.
pub const CLIP_UNITS: u32 = 20;
pub const MIN_DUR: u32 = 3;
pub const MAX_DUR: u32 = 8;
pub const MIN_GAP: u32 = 1;
pub const MAX_EVENTS: usize = 3;

pub const CONNECTORS: [&str; 3] = ["followed by", "then", "and then"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pitch {
    Low,
    Mid,
    High,
}

impl Pitch {
    pub const ALL: [Pitch; 3] = [Pitch::Low, Pitch::Mid, Pitch::High];

    pub fn name(self) -> &'static str {
        match self {
            Pitch::Low => "low",
            Pitch::Mid => "mid",
            Pitch::High => "high",
        }
    }

    /// Tone frequency in Hz.
    pub fn hz(self) -> f64 {
        match self {
            Pitch::Low => 220.0,
            Pitch::Mid => 880.0,
            Pitch::High => 3520.0,
        }
    }

    /// Sweep range for a rising chirp: one octave below to one octave above the tone.
    pub fn band(self) -> (f64, f64) {
        (self.hz() / 2.0, self.hz() * 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Tone(Pitch),
    Chirp(Pitch),
    NoiseBurst,
    ClickTrain,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::Tone(Pitch::Low),
        EventKind::Tone(Pitch::Mid),
        EventKind::Tone(Pitch::High),
        EventKind::Chirp(Pitch::Low),
        EventKind::Chirp(Pitch::Mid),
        EventKind::Chirp(Pitch::High),
        EventKind::NoiseBurst,
        EventKind::ClickTrain,
    ];

    pub fn pitch(self) -> Option<Pitch> {
        match self {
            EventKind::Tone(p) | EventKind::Chirp(p) => Some(p),
            _ => None,
        }
    }

    pub fn clause(self) -> String {
        match self {
            EventKind::Tone(p) => format!("a {} pitched tone", p.name()),
            EventKind::Chirp(_) => "a rising tone".to_string(),
            EventKind::NoiseBurst => "a burst of static".to_string(),
            EventKind::ClickTrain => "a series of clicks".to_string(),
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::Tone(p) => write!(f, "tone-{}", p.name()),
            EventKind::Chirp(p) => write!(f, "chirp-{}", p.name()),
            EventKind::NoiseBurst => f.write_str("noise"),
            EventKind::ClickTrain => f.write_str("clicks"),
        }
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| invalid(format!("unknown event kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    /// Start in grid units.
    pub start_units: u32,
    pub dur_units: u32,
    pub amplitude: f64,
}

impl Event {
    pub fn start(&self) -> f64 {
        self.start_units as f64 * GRID
    }

    pub fn duration(&self) -> f64 {
        self.dur_units as f64 * GRID
    }

    pub fn end_units(&self) -> u32 {
        self.start_units + self.dur_units
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub events: Vec<Event>,
    /// Drives connector choice and noise rendering.
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.events.is_empty() || self.events.len() > MAX_EVENTS {
            return Err(invalid(format!("scene needs 1..={MAX_EVENTS} events, got {}", self.events.len())));
        }
        for e in &self.events {
            if e.dur_units == 0 || e.end_units() > CLIP_UNITS {
                return Err(invalid(format!("event {} at {:.1}s does not fit the clip", e.kind, e.start())));
            }
            if !(e.amplitude > 0.0 && e.amplitude <= 1.0) {
                return Err(invalid(format!("amplitude {} outside (0, 1]", e.amplitude)));
            }
        }
        for w in self.events.windows(2) {
            if w[1].start_units < w[0].end_units() {
                return Err(invalid(format!("events overlap at {:.1}s", w[1].start())));
            }
        }
        Ok(())
    }

    /// Draws a scene: 1 to 3 events on the grid separated by at least one unit.
    pub fn random(seed: u64) -> Self {
        let mut r = rng::stream(rng::mix(seed, 0x5CE4E));
        let count = r.random_range(1..=MAX_EVENTS);
        let durs: Vec<u32> = loop {
            let d: Vec<u32> = (0..count).map(|_| r.random_range(MIN_DUR..=MAX_DUR)).collect();
            if d.iter().sum::<u32>() + MIN_GAP * (count as u32 - 1) <= CLIP_UNITS {
                break d;
            }
        };
        let mut slack = CLIP_UNITS - durs.iter().sum::<u32>() - MIN_GAP * (count as u32 - 1);
        let mut cursor = 0;
        let mut events = Vec::with_capacity(count);
        for (i, &dur) in durs.iter().enumerate() {
            let extra = r.random_range(0..=slack);
            slack -= extra;
            let start = cursor + extra + if i > 0 { MIN_GAP } else { 0 };
            let kind = EventKind::ALL[r.random_range(0..EventKind::ALL.len())];
            events.push(Event { kind, start_units: start, dur_units: dur, amplitude: r.random_range(0.5..=1.0) });
            cursor = start + dur;
        }
        Self { events, seed }
    }

    /// Content key: kinds and grid timing. Amplitudes and seed are not part of it.
    pub fn signature(&self) -> String {
        self.events.iter().map(|e| format!("{}@{}+{}", e.kind, e.start_units, e.dur_units)).collect::<Vec<_>>().join(",")
    }

    pub fn kinds(&self) -> Vec<EventKind> {
        self.events.iter().map(|e| e.kind).collect()
    }

    /// Connector indices for this scene's caption, drawn from its seed.
    fn connectors(&self) -> Vec<usize> {
        let mut r = rng::stream(rng::mix(self.seed, 0xC0FFEE));
        (1..self.events.len()).map(|_| r.random_range(0..CONNECTORS.len())).collect()
    }

    pub fn caption(&self) -> String {
        join_clauses(&self.kinds(), &self.connectors())
    }

    /// Every caption the grammar allows for this scene.
    pub fn all_captions(&self) -> Vec<String> {
        captions_for_kinds(&self.kinds())
    }

    /// True when the grammar allows more than one caption.
    pub fn is_ambiguous(&self) -> bool {
        self.events.len() > 1
    }
}

fn join_clauses(kinds: &[EventKind], connectors: &[usize]) -> String {
    let mut out = kinds[0].clause();
    for (k, &c) in kinds[1..].iter().zip(connectors) {
        out.push(' ');
        out.push_str(CONNECTORS[c]);
        out.push(' ');
        out.push_str(&k.clause());
    }
    out
}

pub fn caption_of(scene: &Scene) -> String {
    scene.caption()
}

pub fn captions_for_kinds(kinds: &[EventKind]) -> Vec<String> {
    let slots = kinds.len().saturating_sub(1);
    let total = CONNECTORS.len().pow(slots as u32);
    (0..total)
        .map(|mut code| {
            let conn: Vec<usize> = (0..slots)
                .map(|_| {
                    let c = code % CONNECTORS.len();
                    code /= CONNECTORS.len();
                    c
                })
                .collect();
            join_clauses(kinds, &conn)
        })
        .collect()
}

/// Event kinds named in a signature.
pub fn parse_signature(sig: &str) -> Result<Vec<EventKind>> {
    sig.split(',')
        .map(|part| {
            let kind = part.split('@').next().unwrap_or_default();
            kind.parse()
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|k| if k.is_empty() { Err(invalid("empty signature")) } else { Ok(k) })
}

/// Number of distinct signatures the generator can produce.
pub fn scene_space_size() -> u128 {
    fn count(events: usize, from: u32) -> u128 {
        if events == 0 {
            return 1;
        }
        let mut total = 0;
        for start in from..CLIP_UNITS {
            for dur in MIN_DUR..=MAX_DUR {
                let end = start + dur;
                if end > CLIP_UNITS {
                    continue;
                }
                total += EventKind::ALL.len() as u128 * count(events - 1, end + MIN_GAP);
            }
        }
        total
    }
    (1..=MAX_EVENTS).map(|k| count(k, 0)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::normalize;

    #[test]
    fn single_clause_templates() {
        let s = Scene { events: vec![Event { kind: EventKind::Tone(Pitch::High), start_units: 2, dur_units: 5, amplitude: 1.0 }], seed: 0 };
        assert_eq!(caption_of(&s), "a high pitched tone");
        assert_eq!(s.all_captions(), vec!["a high pitched tone"]);
        assert!(!s.is_ambiguous());
    }

    #[test]
    fn two_events_have_one_connector() {
        for seed in 0..50 {
            let s = Scene::random(seed);
            if s.events.len() != 2 {
                continue;
            }
            let c = s.caption();
            let hits = CONNECTORS.iter().filter(|k| c.contains(&format!(" {k} a "))).count();
            // "and then" also contains "then"
            assert!(hits == 1 || (hits == 2 && c.contains("and then")), "{c}");
        }
    }

    #[test]
    fn random_scenes_are_valid() {
        for seed in 0..500 {
            let s = Scene::random(seed);
            s.validate().unwrap();
            assert!(s.all_captions().contains(&s.caption()));
            assert_eq!(parse_signature(&s.signature()).unwrap(), s.kinds());
            assert!(normalize(&s.caption()).len() <= 20);
        }
    }

    #[test]
    fn vocabulary_is_small() {
        let mut words = std::collections::BTreeSet::new();
        for k in EventKind::ALL {
            words.extend(normalize(&k.clause()));
        }
        for c in CONNECTORS {
            words.extend(normalize(c));
        }
        assert!(words.len() <= 60);
    }

    #[test]
    fn overlap_rejected() {
        let e = |s, d| Event { kind: EventKind::NoiseBurst, start_units: s, dur_units: d, amplitude: 0.7 };
        assert!(Scene { events: vec![e(0, 5), e(4, 5)], seed: 0 }.validate().is_err());
        assert!(Scene { events: vec![e(16, 5)], seed: 0 }.validate().is_err());
        assert!(Scene { events: vec![e(0, 5), e(5, 5)], seed: 0 }.validate().is_ok());
    }

    #[test]
    fn space_size_matches_brute_force_for_one_event() {
        let placements: u128 = (MIN_DUR..=MAX_DUR).map(|d| (CLIP_UNITS - d + 1) as u128).sum();
        let single = EventKind::ALL.len() as u128 * placements;
        assert!(scene_space_size() > single);
        assert_eq!(single, 744);
    }
}
