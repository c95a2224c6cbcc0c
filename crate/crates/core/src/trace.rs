//! JSON-lines episode traces.

use std::io::Write;

use serde_json::{json, Value};

use crate::train::RolloutObserver;

/// Writes one line per environment step: the environment's own record plus
/// the episode seed and lockstep slot it came from.
pub struct TraceWriter<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out, error: None }
    }

    /// Flushes and returns the writer, or the first write error.
    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> RolloutObserver for TraceWriter<W> {
    fn wants_traces(&self) -> bool {
        true
    }

    fn on_step(&mut self, env: usize, episode_seed: u64, record: &Value) {
        if self.error.is_some() {
            return;
        }
        let mut line = json!({ "episode_seed": episode_seed, "env": env });
        if let (Some(dst), Some(src)) = (line.as_object_mut(), record.as_object()) {
            dst.extend(src.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
    }
}
