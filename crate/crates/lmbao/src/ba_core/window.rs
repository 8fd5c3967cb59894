//! Sliding window of recent scan states and the marginalization step that
//! folds an exiting scan into per-landmark moment accumulators.

use std::collections::BTreeMap;

use crate::landmark_map::LandmarkMap;
use crate::motion_model::{compensate_point, MotionState};

/// One in-window scan: its index and current state estimate.
#[derive(Debug, Clone, Copy)]
pub struct WindowEntry {
    pub scan_index: usize,
    pub state: MotionState,
}

/// The most recent scan states under joint optimization, plus the immutable
/// pose table of scans already marginalized.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub capacity: usize,
    pub entries: Vec<WindowEntry>,
    pub fixed_poses: BTreeMap<usize, MotionState>,
}

impl SlidingWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: Vec::new(),
            fixed_poses: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, scan_index: usize, state: MotionState) {
        assert!(
            self.entries.len() < self.capacity,
            "window full; marginalize before pushing"
        );
        self.entries.push(WindowEntry { scan_index, state });
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn state_of(&self, scan_index: usize) -> Option<&MotionState> {
        self.entries
            .iter()
            .find(|e| e.scan_index == scan_index)
            .map(|e| &e.state)
    }

    /// Removes the oldest in-window scan, freezes its state, and adds the
    /// world-frame moments of every landmark point it observed to that
    /// landmark's marginal accumulator. Returns the frozen entry.
    pub fn marginalize_oldest(&mut self, map: &mut LandmarkMap) -> Option<WindowEntry> {
        if self.entries.is_empty() {
            return None;
        }
        let exiting = self.entries.remove(0);
        for lm in map.landmarks.values_mut() {
            let Some(obs) = lm.points_by_scan.get(&exiting.scan_index) else {
                continue;
            };
            for o in obs {
                let comp = compensate_point(&o.raw_position, o.timestamp, &exiting.state)
                    .expect("observation timestamps precede their scan start");
                let world = exiting.state.transform.apply(&comp);
                lm.marginal.add_point(&world);
            }
        }
        self.fixed_poses.insert(exiting.scan_index, exiting.state);
        Some(exiting)
    }
}
