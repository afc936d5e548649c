//! Seeded generator of (waveform, caption) pairs from a small event grammar.

mod dataset;
mod render;
mod scene;

pub use dataset::{build_dataset, read_manifest, write_dataset, ManifestEntry, Split, SynthDataset, SynthItem};
pub use render::render_waveform;
pub use scene::{
    caption_of, captions_for_kinds, parse_signature, scene_space_size, Event, EventKind, Pitch, Scene, CONNECTORS, GRID,
};
