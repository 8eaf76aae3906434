//! Event records, the particle-indexed priority queue, and the external
//! (non-particle) event source.

use crate::model::ParticleId;
use crate::{Error, Result};

/// Event partner `p`. Integer sentinels from the taxonomy map onto variants;
/// `Invalid` (p = -infinity) marks a particle that is not in the queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partner {
    /// p = 0: update the prediction; the configuration needs no update.
    Update,
    /// p = i: single-particle event requiring a configuration update.
    SelfEvent,
    /// p = j: unprocessed binary reaction with particle j.
    Pair(ParticleId),
    /// p = +inf: boundary event (protection/neighborhood/geometry).
    Boundary,
    /// p = -inf: invalid; the particle is handled outside the queue.
    Invalid,
}

// Qualifier values for Partner::Update.
pub const Q_REPREDICT: i32 = 0; // geometry unchanged since last prediction
pub const Q_VELOCITY_CHANGED: i32 = 1; // state changed but geometry intact
pub const Q_NEW_GEOMETRY: i32 = -1; // fresh insertion: rebuild + overlap check

// Qualifier values for Partner::SelfEvent.
pub const Q_TIME_ADVANCE: i32 = 0;
pub const Q_DECAY: i32 = 1;

// Qualifier values for Partner::Pair.
pub const Q_CORE_COLLISION: i32 = 1;
pub const Q_TETHER_STRETCH: i32 = 2;
pub const Q_PAIR_PROPAGATOR: i32 = 10; // FPKMC pair event, outcome cached

// Qualifier values for Partner::Boundary. `nu = 0` rebuilds the protective
// region, `nu = -1` the neighborhood; more negative values carry geometry
// boundary events (cell transfers, hard walls) with the face encoded.
pub const Q_PROTECTION: i32 = 0;
pub const Q_NEIGHBORHOOD: i32 = -1;
const Q_TRANSFER_BASE: i32 = -2; // -2 - face
const Q_WALL_BASE: i32 = -10; // -10 - face

pub fn qualifier_transfer(face: usize) -> i32 {
    Q_TRANSFER_BASE - face as i32
}

pub fn qualifier_wall(face: usize) -> i32 {
    Q_WALL_BASE - face as i32
}

/// Decoded geometry boundary qualifier.
pub enum GeometryEvent {
    CellTransfer { face: usize },
    WallCollision { face: usize },
}

pub fn decode_geometry(qualifier: i32) -> Option<GeometryEvent> {
    if (Q_WALL_BASE - 5..=Q_WALL_BASE).contains(&qualifier) {
        Some(GeometryEvent::WallCollision {
            face: (Q_WALL_BASE - qualifier) as usize,
        })
    } else if (Q_TRANSFER_BASE - 5..=Q_TRANSFER_BASE).contains(&qualifier) {
        Some(GeometryEvent::CellTransfer {
            face: (Q_TRANSFER_BASE - qualifier) as usize,
        })
    } else {
        None
    }
}

/// A particle's impending event prediction (t_e, p, nu).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub partner: Partner,
    pub qualifier: i32,
}

impl EventRecord {
    pub fn new(time: f64, partner: Partner, qualifier: i32) -> Self {
        EventRecord {
            time,
            partner,
            qualifier,
        }
    }

    pub fn invalid() -> Self {
        EventRecord {
            time: f64::INFINITY,
            partner: Partner::Invalid,
            qualifier: 0,
        }
    }

    /// Immediate prediction update at time `t` (the step-9c invalidation
    /// record and the post-reaction partner requeue both use it).
    pub fn update_at(t: f64, qualifier: i32) -> Self {
        EventRecord {
            time: t,
            partner: Partner::Update,
            qualifier,
        }
    }
}

/// Indexed binary min-heap keyed by (t_e, id), one slot per event-driven
/// particle, with arbitrary removal and key update by particle id.
///
/// Ties in t_e break toward the smaller id so the event log is
/// deterministic. The id -> heap-slot map makes third-party invalidation
/// (removal of non-root entries) O(log N).
#[derive(Clone, Debug, Default)]
pub struct EventQueue {
    heap: Vec<(f64, ParticleId)>,
    /// slot[id] = heap index + 1; 0 = not queued. Index 0 is unused.
    slot: Vec<u32>,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn contains(&self, id: ParticleId) -> bool {
        (id as usize) < self.slot.len() && self.slot[id as usize] != 0
    }

    /// Smallest (t_e, id) without removing it.
    pub fn peek(&self) -> Option<(f64, ParticleId)> {
        self.heap.first().copied()
    }

    /// Queue a particle with key `t_e`. Double-insertion of an id is a
    /// programming error: debug builds abort, release builds reject.
    pub fn schedule(&mut self, id: ParticleId, t_e: f64) -> Result<()> {
        if self.contains(id) {
            return Err(Error::fault(format!("particle {id} already queued")));
        }
        if self.slot.len() <= id as usize {
            self.slot.resize(id as usize + 1, 0);
        }
        self.heap.push((t_e, id));
        let idx = self.heap.len() - 1;
        self.slot[id as usize] = idx as u32 + 1;
        self.sift_up(idx);
        Ok(())
    }

    /// Remove a particle from the queue, returning its key.
    pub fn cancel(&mut self, id: ParticleId) -> Result<f64> {
        if !self.contains(id) {
            return Err(Error::fault(format!("cancel of unqueued particle {id}")));
        }
        let idx = (self.slot[id as usize] - 1) as usize;
        let key = self.heap[idx].0;
        self.remove_at(idx);
        Ok(key)
    }

    /// Pop the minimum entry.
    pub fn pop(&mut self) -> Option<(f64, ParticleId)> {
        let top = self.peek()?;
        self.remove_at(0);
        Some(top)
    }

    /// Change a queued particle's key in place (eager invalidation moves the
    /// entry immediately rather than leaving a stale node).
    pub fn update_key(&mut self, id: ParticleId, t_e: f64) -> Result<()> {
        if !self.contains(id) {
            return Err(Error::fault(format!("update of unqueued particle {id}")));
        }
        let idx = (self.slot[id as usize] - 1) as usize;
        let old = self.heap[idx].0;
        self.heap[idx].0 = t_e;
        if (t_e, id) < (old, id) {
            self.sift_up(idx);
        } else {
            self.sift_down(idx);
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.heap.clear();
        self.slot.iter_mut().for_each(|s| *s = 0);
    }

    /// Queued ids in arbitrary order (invariant sweeps).
    pub fn ids(&self) -> impl Iterator<Item = ParticleId> + '_ {
        self.heap.iter().map(|&(_, id)| id)
    }

    fn remove_at(&mut self, idx: usize) {
        let last = self.heap.len() - 1;
        let (_, removed) = self.heap[idx];
        self.heap.swap(idx, last);
        self.heap.pop();
        self.slot[removed as usize] = 0;
        if idx < self.heap.len() {
            let moved = self.heap[idx].1;
            self.slot[moved as usize] = idx as u32 + 1;
            self.sift_up(idx);
            let idx = (self.slot[moved as usize] - 1) as usize;
            self.sift_down(idx);
        }
    }

    #[inline]
    fn less(&self, a: usize, b: usize) -> bool {
        let (ta, ia) = self.heap[a];
        let (tb, ib) = self.heap[b];
        (ta, ia) < (tb, ib)
    }

    fn sift_up(&mut self, mut idx: usize) {
        while idx > 0 {
            let parent = (idx - 1) / 2;
            if self.less(idx, parent) {
                self.swap_nodes(idx, parent);
                idx = parent;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut idx: usize) {
        loop {
            let l = 2 * idx + 1;
            let r = l + 1;
            let mut smallest = idx;
            if l < self.heap.len() && self.less(l, smallest) {
                smallest = l;
            }
            if r < self.heap.len() && self.less(r, smallest) {
                smallest = r;
            }
            if smallest == idx {
                break;
            }
            self.swap_nodes(idx, smallest);
            idx = smallest;
        }
    }

    #[inline]
    fn swap_nodes(&mut self, a: usize, b: usize) {
        self.heap.swap(a, b);
        self.slot[self.heap[a].1 as usize] = a as u32 + 1;
        self.slot[self.heap[b].1 as usize] = b as u32 + 1;
    }

    /// Handle-consistency check: every slot entry addresses the node that
    /// holds its particle. Debug sweeps only.
    pub fn check_handles(&self) -> bool {
        self.heap
            .iter()
            .enumerate()
            .all(|(i, &(_, id))| self.slot[id as usize] == i as u32 + 1)
            && self
                .slot
                .iter()
                .enumerate()
                .filter(|&(_, &s)| s != 0)
                .all(|(id, &s)| self.heap[(s - 1) as usize].1 as usize == id)
    }
}

/// Kinds of non-particle events, merged with the particle queue at the top
/// of the loop. Fixed ordering breaks exact-time ties deterministically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExternalKind {
    /// Synchronous advance of all time-driven particles by one step.
    TimeStep,
    /// Global time-of-next-DSMC-collision t_sc.
    StochasticCollision,
    /// Particle birth (Poisson process over species birth rates).
    Birth,
    /// Synchronization point: mask refresh, repartition, statistics flush.
    Sync,
}

const EXTERNAL_KINDS: usize = 4;

/// Ordered set of pending external events, one (optional) next-time per
/// kind; peek returns the minimum. Consumed times must be non-decreasing.
#[derive(Clone, Debug, Default)]
pub struct ExternalEventSource {
    next: [Option<f64>; EXTERNAL_KINDS],
    last_consumed: f64,
}

impl ExternalEventSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, kind: ExternalKind, time: Option<f64>) {
        self.next[kind as usize] = time;
    }

    pub fn get(&self, kind: ExternalKind) -> Option<f64> {
        self.next[kind as usize]
    }

    /// Minimum pending external event time t_ex, if any.
    pub fn peek(&self) -> Option<(f64, ExternalKind)> {
        let mut best: Option<(f64, ExternalKind)> = None;
        for (i, t) in self.next.iter().enumerate() {
            if let Some(t) = *t {
                let kind = match i {
                    0 => ExternalKind::TimeStep,
                    1 => ExternalKind::StochasticCollision,
                    2 => ExternalKind::Birth,
                    _ => ExternalKind::Sync,
                };
                if best.map_or(true, |(bt, bk)| (t, kind) < (bt, bk)) {
                    best = Some((t, kind));
                }
            }
        }
        best
    }

    /// Consume the minimum event; the caller processes it and re-arms the
    /// kind if it recurs.
    pub fn consume(&mut self) -> Option<(f64, ExternalKind)> {
        let (t, kind) = self.peek()?;
        debug_assert!(
            t >= self.last_consumed - 1e-12,
            "external event times regressed: {t} after {}",
            self.last_consumed
        );
        self.last_consumed = self.last_consumed.max(t);
        self.next[kind as usize] = None;
        Some((t, kind))
    }
}
