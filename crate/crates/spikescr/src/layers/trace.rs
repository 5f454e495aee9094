//! Forward-pass monitors: spike tensors by name with activity statistics.

use crate::compute::{Tape, TensorId};

/// One monitored tensor: its tape node plus nonzero statistics.
#[derive(Clone, Debug)]
pub struct MonitorEntry {
    pub name: String,
    pub id: TensorId,
    /// Count of nonzero elements (spike count for binary tensors).
    pub active: u64,
    pub total: u64,
    /// Declared spike boundary (false for auxiliary float monitors).
    pub binary: bool,
}

impl MonitorEntry {
    /// Mean activity: spike probability for binary tensors, nonzero fraction
    /// at the raw-input boundary.
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.active as f64 / self.total as f64
        }
    }
}

/// Ordered record of every monitored site of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub entries: Vec<MonitorEntry>,
}

impl ForwardTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, tape: &Tape, name: String, id: TensorId) {
        self.push(tape, name, id, true);
    }

    /// Monitor a float-valued site (raw input, pre-scale products).
    pub fn record_aux(&mut self, tape: &Tape, name: String, id: TensorId) {
        self.push(tape, name, id, false);
    }

    fn push(&mut self, tape: &Tape, name: String, id: TensorId, binary: bool) {
        let v = tape.value(id);
        let active = v.data().iter().filter(|&&x| x != 0.0).count() as u64;
        self.entries.push(MonitorEntry {
            name,
            id,
            active,
            total: v.len() as u64,
            binary,
        });
    }

    pub fn get(&self, name: &str) -> Option<&MonitorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn rate(&self, name: &str) -> Option<f64> {
        self.get(name).map(|e| e.rate())
    }
}
