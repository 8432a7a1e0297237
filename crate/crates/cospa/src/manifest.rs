//! Scene manifests: one JSON-serialized `SceneSpec` per line.
//!
//! Fields: `id`, `seed`, `room {dims, rt60}`, `array {mics}`, `speech_pos`,
//! `noise_pos`, `music_pos` (metres), `snr_db`, `smr_db`, `duration` (s)
//! and `sample_rate` (Hz). The rendered audio of a scene is a pure function
//! of its line, so the manifest alone reproduces the corpus.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use cospa_core::scene::{render_scene, synth_dry_signals, RenderedScene, SceneSpec};

use crate::{Error, Result};

pub fn write_manifest(path: &Path, scenes: &[SceneSpec]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in scenes {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SceneSpec>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let spec = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(spec);
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("{}: no scenes", path.display())));
    }
    Ok(out)
}

/// Renders a manifest entry with its synthetic dry sources.
pub fn render(spec: &SceneSpec) -> Result<RenderedScene> {
    Ok(render_scene(spec, &synth_dry_signals(spec))?)
}
