//! Anchor bookkeeping for the teach and repeat passes.
//!
//! The teach pass appends a new map entry every time an anchor that is not currently active
//! is ranged, so an anchor met twice appears twice. The repeat pass walks the same entries
//! in encounter order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrackerError {
    #[error("detected anchor {detected} but the next map entry (ell = {ell}) is anchor {expected}")]
    IdMismatch { detected: u32, expected: u32, ell: usize },
    #[error("anchor map is exhausted")]
    MapExhausted,
    #[error("anchor map is empty")]
    EmptyMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub position: Vector3<f64>,
    pub id: u32,
    pub ell: usize,
}

/// Ordered anchor map; `ell` runs 1..=len.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorMap {
    entries: Vec<MapEntry>,
}

impl AnchorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MapEntry] {
        &self.entries
    }

    /// Entry with encounter index `ell` (1-based).
    pub fn get(&self, ell: usize) -> Option<&MapEntry> {
        ell.checked_sub(1).and_then(|i| self.entries.get(i))
    }

    pub fn push(&mut self, id: u32, position: Vector3<f64>) -> usize {
        let ell = self.entries.len() + 1;
        self.entries.push(MapEntry { position, id, ell });
        ell
    }

    /// Highest-`ell` entry stored for `id`.
    pub fn most_recent(&self, id: u32) -> Option<&MapEntry> {
        self.entries.iter().rev().find(|e| e.id == id)
    }

    /// Checks that `ell` values are consecutive from 1.
    pub fn is_well_formed(&self) -> bool {
        self.entries.iter().enumerate().all(|(i, e)| e.ell == i + 1)
    }

    pub fn save_json(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }

    pub fn load_json(path: &Path) -> std::io::Result<Self> {
        let map: AnchorMap = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(std::io::Error::other)?;
        if !map.is_well_formed() {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "anchor map ell values are not consecutive"));
        }
        Ok(map)
    }
}

/// Anchors that are in range and initialized.
pub type ActiveSet = BTreeSet<u32>;

/// One call of the teach-pass tracker for a ranged anchor.
///
/// Returns the anchor position to correct with and whether a new entry was created. On
/// initializer failure neither `active` nor `map` is modified.
pub fn teach_sequence_tracker<E>(
    anchor_id: u32,
    in_range: &[u32],
    active: &mut ActiveSet,
    map: &mut AnchorMap,
    initializer: impl FnOnce(u32) -> Result<Vector3<f64>, E>,
) -> Result<(Vector3<f64>, bool), E> {
    let (position, created) = if active.contains(&anchor_id) {
        let entry = map.most_recent(anchor_id).expect("active anchor has a map entry");
        (entry.position, false)
    } else {
        let position = initializer(anchor_id)?;
        map.push(anchor_id, position);
        active.insert(anchor_id);
        (position, true)
    };
    active.retain(|id| in_range.contains(id));
    Ok((position, created))
}

/// Strict repeat-pass lookup.
///
/// `active` maps anchor ids to the `ell` they are bound to; `cursor` is the last consumed
/// `ell` (0 before any).
pub fn repeat_sequence_lookup(
    anchor_id: u32,
    in_range: &[u32],
    active: &mut BTreeMap<u32, usize>,
    map: &AnchorMap,
    cursor: usize,
) -> Result<(Vector3<f64>, usize), TrackerError> {
    if map.is_empty() {
        return Err(TrackerError::EmptyMap);
    }
    let result = if let Some(&ell) = active.get(&anchor_id) {
        (map.get(ell).expect("bound entry exists").position, cursor)
    } else {
        let next = map.get(cursor + 1).ok_or(TrackerError::MapExhausted)?;
        if next.id != anchor_id {
            return Err(TrackerError::IdMismatch { detected: anchor_id, expected: next.id, ell: next.ell });
        }
        active.insert(anchor_id, next.ell);
        (next.position, next.ell)
    };
    active.retain(|id, _| in_range.contains(id));
    Ok(result)
}

/// Outcome of a tolerant repeat-pass lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lookup {
    Matched { position: Vector3<f64>, ell: usize },
    Ignored,
}

/// Repeat-pass tracker with bounded recovery from encounter-order divergence.
///
/// On a mismatch it searches up to `max_skip` entries past the next one, and also accepts a
/// re-encounter of the entry consumed last. Detections that match neither are ignored.
#[derive(Clone, Debug)]
pub struct RepeatTracker {
    pub active: BTreeMap<u32, usize>,
    pub cursor: usize,
    pub max_skip: usize,
    pub mismatches: usize,
}

impl RepeatTracker {
    pub fn new(max_skip: usize) -> Self {
        Self { active: BTreeMap::new(), cursor: 0, max_skip, mismatches: 0 }
    }

    pub fn prune(&mut self, in_range: &[u32]) {
        self.active.retain(|id, _| in_range.contains(id));
    }

    pub fn lookup(&mut self, anchor_id: u32, in_range: &[u32], map: &AnchorMap) -> Lookup {
        match repeat_sequence_lookup(anchor_id, in_range, &mut self.active, map, self.cursor) {
            Ok((position, cursor)) => {
                self.cursor = cursor;
                Lookup::Matched { position, ell: self.active.get(&anchor_id).copied().unwrap_or(cursor) }
            }
            Err(TrackerError::IdMismatch { .. }) | Err(TrackerError::MapExhausted) => {
                self.mismatches += 1;
                let last = map.get(self.cursor).filter(|e| e.id == anchor_id);
                let ahead = (self.cursor + 2..=self.cursor + 1 + self.max_skip)
                    .filter_map(|ell| map.get(ell))
                    .find(|e| e.id == anchor_id);
                let hit = ahead.or(last).copied();
                self.prune(in_range);
                match hit {
                    Some(entry) => {
                        self.cursor = self.cursor.max(entry.ell);
                        if in_range.contains(&anchor_id) {
                            self.active.insert(anchor_id, entry.ell);
                        }
                        Lookup::Matched { position: entry.position, ell: entry.ell }
                    }
                    None => Lookup::Ignored,
                }
            }
            Err(TrackerError::EmptyMap) => Lookup::Ignored,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok_init(pos: Vector3<f64>) -> impl FnOnce(u32) -> Result<Vector3<f64>, ()> {
        move |_| Ok(pos)
    }

    #[test]
    fn active_anchor_returns_most_recent_entry() {
        let mut map = AnchorMap::new();
        for (i, id) in [1u32, 5, 2, 3, 4, 6, 5].iter().enumerate() {
            map.push(*id, Vector3::new(i as f64, 0.0, 0.0));
        }
        let mut active: ActiveSet = [5].into_iter().collect();
        let (pos, created) =
            teach_sequence_tracker(5, &[5], &mut active, &mut map, |_| -> Result<_, ()> { panic!("must not init") }).unwrap();
        assert_eq!(pos, Vector3::new(6.0, 0.0, 0.0));
        assert_eq!(map.most_recent(5).unwrap().ell, 7);
        assert!(!created);
        assert_eq!(map.len(), 7);
    }

    #[test]
    fn new_anchor_gets_next_ell() {
        let mut map = AnchorMap::new();
        for id in 1..=4 {
            map.push(id, Vector3::zeros());
        }
        let mut active = ActiveSet::new();
        let (_, created) = teach_sequence_tracker(9, &[9], &mut active, &mut map, ok_init(Vector3::x())).unwrap();
        assert!(created);
        assert_eq!(map.get(5).unwrap().id, 9);
        assert_eq!(map.get(5).unwrap().ell, 5);
        assert!(active.contains(&9));
    }

    #[test]
    fn leaving_range_forces_reinitialization() {
        let mut map = AnchorMap::new();
        let mut active = ActiveSet::new();
        teach_sequence_tracker(1, &[1, 2], &mut active, &mut map, ok_init(Vector3::x())).unwrap();
        teach_sequence_tracker(2, &[1, 2], &mut active, &mut map, ok_init(Vector3::y())).unwrap();
        // anchor 1 has left range when anchor 2 is ranged again
        teach_sequence_tracker(2, &[2], &mut active, &mut map, ok_init(Vector3::y())).unwrap();
        assert!(!active.contains(&1));
        let (_, created) = teach_sequence_tracker(1, &[1, 2], &mut active, &mut map, ok_init(Vector3::z())).unwrap();
        assert!(created);
        assert_eq!(map.len(), 3);
        assert_eq!(map.most_recent(1).unwrap().ell, 3);
        assert!(map.is_well_formed());
    }

    #[test]
    fn failed_initialization_leaves_state_untouched() {
        let mut map = AnchorMap::new();
        map.push(1, Vector3::zeros());
        let mut active: ActiveSet = [1].into_iter().collect();
        let before = (map.clone(), active.clone());
        let r = teach_sequence_tracker(2, &[1], &mut active, &mut map, |_| Err("no convergence"));
        assert_eq!(r, Err("no convergence"));
        assert_eq!((map, active), before);
    }

    #[test]
    fn continuous_contact_initializes_once() {
        let mut map = AnchorMap::new();
        let mut active = ActiveSet::new();
        let mut inits = 0;
        for _ in 0..100 {
            teach_sequence_tracker(3, &[3], &mut active, &mut map, |_| -> Result<_, ()> {
                inits += 1;
                Ok(Vector3::zeros())
            })
            .unwrap();
        }
        assert_eq!(inits, 1);
        assert_eq!(map.len(), 1);
    }

    fn sample_map() -> AnchorMap {
        let mut map = AnchorMap::new();
        for (i, id) in [1u32, 2, 3, 7, 4].iter().enumerate() {
            map.push(*id, Vector3::new(i as f64 + 1.0, 0.0, 0.0));
        }
        map
    }

    #[test]
    fn repeat_lookup_advances_on_match() {
        let map = sample_map();
        let mut active = BTreeMap::new();
        let (pos, cursor) = repeat_sequence_lookup(7, &[7], &mut active, &map, 3).unwrap();
        assert_eq!(cursor, 4);
        assert_eq!(pos, map.get(4).unwrap().position);
        // re-ranging the same active anchor
        let (pos2, cursor2) = repeat_sequence_lookup(7, &[7], &mut active, &map, cursor).unwrap();
        assert_eq!((pos2, cursor2), (pos, 4));
    }

    #[test]
    fn repeat_lookup_reports_mismatch() {
        let map = sample_map();
        let mut active = BTreeMap::new();
        let err = repeat_sequence_lookup(4, &[4], &mut active, &map, 3).unwrap_err();
        assert_eq!(err, TrackerError::IdMismatch { detected: 4, expected: 7, ell: 4 });
        assert!(active.is_empty());
    }

    #[test]
    fn tolerant_lookup_skips_forward() {
        let map = sample_map();
        let mut tracker = RepeatTracker::new(2);
        tracker.cursor = 3;
        assert_eq!(tracker.lookup(4, &[4], &map), Lookup::Matched { position: map.get(5).unwrap().position, ell: 5 });
        assert_eq!(tracker.cursor, 5);
        assert_eq!(tracker.lookup(1, &[1], &map), Lookup::Ignored);
    }

    #[test]
    fn tolerant_lookup_rebinds_last_entry_on_reentry() {
        let map = sample_map();
        let mut tracker = RepeatTracker::new(2);
        tracker.lookup(1, &[1], &map);
        tracker.prune(&[]);
        assert_eq!(tracker.lookup(1, &[1], &map), Lookup::Matched { position: map.get(1).unwrap().position, ell: 1 });
        assert_eq!(tracker.cursor, 1);
    }

    #[test]
    fn same_order_consumes_entries_in_ell_order() {
        let map = sample_map();
        let mut tracker = RepeatTracker::new(2);
        let mut consumed = Vec::new();
        for e in map.entries() {
            for _ in 0..3 {
                if let Lookup::Matched { ell, .. } = tracker.lookup(e.id, &[e.id], &map) {
                    if consumed.last() != Some(&ell) {
                        consumed.push(ell);
                    }
                }
            }
            tracker.prune(&[]);
        }
        assert_eq!(consumed, vec![1, 2, 3, 4, 5]);
        assert_eq!(tracker.mismatches, 0);
    }

    #[test]
    fn map_json_layout() {
        let mut map = AnchorMap::new();
        map.push(3, Vector3::new(1.0, 2.0, 3.0));
        let json = serde_json::to_value(&map).unwrap();
        assert_eq!(json, serde_json::json!([{ "position": [1.0, 2.0, 3.0], "id": 3, "ell": 1 }]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        map.save_json(&path).unwrap();
        assert_eq!(AnchorMap::load_json(&path).unwrap(), map);
    }
}
