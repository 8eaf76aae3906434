//! File-facing output: line-delimited event logs (round-trip exact floats),
//! versioned binary snapshots for restart, and per-cell flow statistics.

use crate::driver::{Backend, EventLogEntry, Sim};
use crate::events::{ExternalKind, Partner};
use crate::model::{Mode, ParticleId, ParticleStore, SpeciesTable};
use crate::spatial::CellGrid;
use crate::{Error, Result};
use std::io::{Read, Write};

/// One event per line: `seq time kind particle partner qualifier payload...`
/// Floats print in shortest round-trip form, so logs diff and parse back
/// exactly.
pub fn format_entry(e: &EventLogEntry) -> String {
    let partner = match e.partner {
        Partner::Update => "0".to_string(),
        Partner::SelfEvent => e.particle.to_string(),
        Partner::Pair(j) => j.to_string(),
        Partner::Boundary => "inf".to_string(),
        Partner::Invalid => "-inf".to_string(),
    };
    let mut line = format!(
        "{} {:?} {} {} {} {}",
        e.seq, e.time, e.kind, e.particle, partner, e.qualifier
    );
    for v in &e.payload {
        line.push(' ');
        line.push_str(&format!("{v:?}"));
    }
    line
}

const KINDS: &[&str] = &[
    "col", "tether", "xfer", "wall", "nnl", "prot", "upd", "decay", "pairfp", "contact", "react",
    "sc", "step", "birth", "sync",
];

/// Parse a log line back into an entry (the inverse of `format_entry`).
pub fn parse_entry(line: &str) -> Result<EventLogEntry> {
    let mut it = line.split_ascii_whitespace();
    let mut field = |name: &str| {
        it.next()
            .ok_or_else(|| Error::Snapshot(format!("log line missing field {name}")))
    };
    let seq: u64 = field("seq")?
        .parse()
        .map_err(|e| Error::Snapshot(format!("bad seq: {e}")))?;
    let time: f64 = field("time")?
        .parse()
        .map_err(|e| Error::Snapshot(format!("bad time: {e}")))?;
    let kind_raw = field("kind")?;
    let kind = KINDS
        .iter()
        .find(|k| **k == kind_raw)
        .ok_or_else(|| Error::Snapshot(format!("unknown event kind {kind_raw}")))?;
    let particle: ParticleId = field("particle")?
        .parse()
        .map_err(|e| Error::Snapshot(format!("bad particle: {e}")))?;
    let partner_raw = field("partner")?;
    let qualifier: i32 = field("qualifier")?
        .parse()
        .map_err(|e| Error::Snapshot(format!("bad qualifier: {e}")))?;
    let partner = match partner_raw {
        "inf" => Partner::Boundary,
        "-inf" => Partner::Invalid,
        "0" => Partner::Update,
        other => {
            let id: ParticleId = other
                .parse()
                .map_err(|e| Error::Snapshot(format!("bad partner: {e}")))?;
            if id == particle {
                Partner::SelfEvent
            } else {
                Partner::Pair(id)
            }
        }
    };
    let payload: std::result::Result<Vec<f64>, _> = it.map(str::parse).collect();
    let payload = payload.map_err(|e| Error::Snapshot(format!("bad payload: {e}")))?;
    Ok(EventLogEntry {
        seq,
        time,
        kind,
        particle,
        partner,
        qualifier,
        payload,
    })
}

/// Per-cell flow accumulation over a sampling window: particle count, mean
/// velocity, kinetic temperature (mass-weighted velocity variance), and
/// density. Sampled at time-step / synchronization events only.
#[derive(Clone, Debug)]
pub struct FlowAccumulator {
    pub samples: u64,
    count: Vec<u64>,
    mass: Vec<f64>,
    mom: Vec<[f64; 3]>,
    mv2: Vec<f64>,
    dim: usize,
    cell_volume: f64,
}

/// Window averages for one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellAverages {
    pub cell: usize,
    pub coords: [usize; 3],
    pub mean_count: f64,
    pub density: f64,
    pub mean_velocity: [f64; 3],
    pub temperature: f64,
}

impl FlowAccumulator {
    pub fn new(grid: &CellGrid, dim: usize) -> Self {
        FlowAccumulator {
            samples: 0,
            count: vec![0; grid.cell_count()],
            mass: vec![0.0; grid.cell_count()],
            mom: vec![[0.0; 3]; grid.cell_count()],
            mv2: vec![0.0; grid.cell_count()],
            dim,
            cell_volume: grid.cell_volume(),
        }
    }

    pub fn sample(&mut self, store: &ParticleStore, _grid: &CellGrid, species: &SpeciesTable) {
        self.samples += 1;
        for (_, p) in store.iter() {
            let m = species.spec(p.species).mass;
            let c = p.cell;
            self.count[c] += 1;
            self.mass[c] += m;
            for k in 0..self.dim {
                self.mom[c][k] += m * p.vel[k];
            }
            self.mv2[c] += m * crate::vecmath::norm_sq(&p.vel, self.dim);
        }
    }

    pub fn reset(&mut self) {
        self.samples = 0;
        self.count.iter_mut().for_each(|c| *c = 0);
        self.mass.iter_mut().for_each(|c| *c = 0.0);
        self.mom.iter_mut().for_each(|c| *c = [0.0; 3]);
        self.mv2.iter_mut().for_each(|c| *c = 0.0);
    }

    /// Averages for every non-external cell.
    pub fn averages(&self, grid: &CellGrid) -> Vec<CellAverages> {
        let mut out = Vec::new();
        if self.samples == 0 {
            return out;
        }
        for cell in 0..grid.cell_count() {
            if grid.is_external(cell) {
                continue;
            }
            let n = self.count[cell];
            let mean_count = n as f64 / self.samples as f64;
            let mut mean_velocity = [0.0; 3];
            let mut temperature = 0.0;
            if n > 0 && self.mass[cell] > 0.0 {
                let m = self.mass[cell];
                for k in 0..self.dim {
                    mean_velocity[k] = self.mom[cell][k] / m;
                }
                // Kinetic temperature: peculiar-velocity variance.
                let drift2: f64 = (0..self.dim)
                    .map(|k| mean_velocity[k] * mean_velocity[k])
                    .sum();
                temperature = (self.mv2[cell] - m * drift2) / (self.dim as f64 * n as f64);
            }
            out.push(CellAverages {
                cell,
                coords: grid.coords(cell),
                mean_count,
                density: mean_count / self.cell_volume,
                mean_velocity,
                temperature,
            });
        }
        out
    }

    /// One record per line: `cell ix iy iz mean_count density vx vy vz T`.
    pub fn emit(&self, grid: &CellGrid, w: &mut impl Write) -> Result<()> {
        for row in self.averages(grid) {
            writeln!(
                w,
                "{} {} {} {} {:?} {:?} {:?} {:?} {:?} {:?}",
                row.cell,
                row.coords[0],
                row.coords[1],
                row.coords[2],
                row.mean_count,
                row.density,
                row.mean_velocity[0],
                row.mean_velocity[1],
                row.mean_velocity[2],
                row.temperature,
            )?;
        }
        Ok(())
    }
}

// ---- snapshots ----

const MAGIC: &[u8; 8] = b"AEDSNAP1";
const VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Snapshot("truncated snapshot".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

/// Serialized canonical state (taken at a synchronization point: nothing
/// queued beyond immediate updates, no live protections or neighborhoods).
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotData {
    pub dim: u8,
    pub n_species: u16,
    pub time: f64,
    pub event_count: u64,
    pub seq: u64,
    pub rng: [u64; 4],
    pub steps_since_refresh: u32,
    /// Pending external event times by kind (NaN encodes none on disk).
    pub externals: [Option<f64>; 4],
    pub dsmc: Option<DsmcSnapshot>,
    pub slots: Vec<Option<ParticleSnapshot>>,
    pub free: Vec<ParticleId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsmcSnapshot {
    pub v_rel_max: f64,
    pub speed_violations: u64,
    pub occupancy_violations: u64,
    pub collisions: u64,
    pub selections: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParticleSnapshot {
    pub species: u16,
    pub mode: u8,
    pub pos: [f64; 3],
    pub vel: [f64; 3],
    pub time: f64,
}

pub fn snapshot_from_sim(sim: &Sim) -> SnapshotData {
    let w = &sim.world;
    let externals = [
        w.external.get(ExternalKind::TimeStep),
        w.external.get(ExternalKind::StochasticCollision),
        w.external.get(ExternalKind::Birth),
        w.external.get(ExternalKind::Sync),
    ];
    let dsmc = match &sim.backend {
        Backend::Ballistic { dsmc: Some(d) } => Some(DsmcSnapshot {
            v_rel_max: d.params.v_rel_max,
            speed_violations: d.speed_violations,
            occupancy_violations: d.occupancy_violations,
            collisions: d.collisions,
            selections: d.selections,
        }),
        _ => None,
    };
    let mut slots = Vec::with_capacity(w.store.capacity());
    for id in 1..=w.store.capacity() as ParticleId {
        let p = w.store.get(id);
        slots.push(p.alive().then(|| ParticleSnapshot {
            species: p.species,
            mode: match p.mode {
                Mode::EventDriven => 0,
                Mode::TimeDriven => 1,
            },
            pos: p.pos,
            vel: p.vel,
            time: p.time,
        }));
    }
    let free = w.store.free_list().to_vec();
    SnapshotData {
        dim: w.domain.dim as u8,
        n_species: w.species.count() as u16,
        time: w.clock.time,
        event_count: w.clock.event_count,
        seq: w.seq,
        rng: w.clock.rng.state(),
        steps_since_refresh: w.steps_since_refresh,
        externals,
        dsmc,
        slots,
        free,
    }
}

pub fn write_snapshot(data: &SnapshotData, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[data.dim])?;
    w.write_all(&data.n_species.to_le_bytes())?;
    w.write_all(&data.time.to_bits().to_le_bytes())?;
    w.write_all(&data.event_count.to_le_bytes())?;
    w.write_all(&data.seq.to_le_bytes())?;
    for word in data.rng {
        w.write_all(&word.to_le_bytes())?;
    }
    w.write_all(&data.steps_since_refresh.to_le_bytes())?;
    for t in data.externals {
        w.write_all(&t.unwrap_or(f64::NAN).to_bits().to_le_bytes())?;
    }
    match data.dsmc {
        None => w.write_all(&[0u8])?,
        Some(d) => {
            w.write_all(&[1u8])?;
            w.write_all(&d.v_rel_max.to_bits().to_le_bytes())?;
            w.write_all(&d.speed_violations.to_le_bytes())?;
            w.write_all(&d.occupancy_violations.to_le_bytes())?;
            w.write_all(&d.collisions.to_le_bytes())?;
            w.write_all(&d.selections.to_le_bytes())?;
        }
    }
    w.write_all(&(data.slots.len() as u32).to_le_bytes())?;
    for slot in &data.slots {
        match slot {
            None => w.write_all(&[0u8])?,
            Some(p) => {
                w.write_all(&[1u8])?;
                w.write_all(&p.species.to_le_bytes())?;
                w.write_all(&[p.mode])?;
                for v in p.pos.iter().chain(p.vel.iter()) {
                    w.write_all(&v.to_bits().to_le_bytes())?;
                }
                w.write_all(&p.time.to_bits().to_le_bytes())?;
            }
        }
    }
    w.write_all(&(data.free.len() as u32).to_le_bytes())?;
    for id in &data.free {
        w.write_all(&id.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot(r: &mut impl Read) -> Result<SnapshotData> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, at: 0 };
    let magic = c.take(8)?;
    if magic != MAGIC {
        return Err(Error::Snapshot("bad magic header".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let dim = c.u8()?;
    let n_species = c.u16()?;
    let time = c.f64()?;
    let event_count = c.u64()?;
    let seq = c.u64()?;
    let rng = [c.u64()?, c.u64()?, c.u64()?, c.u64()?];
    let steps_since_refresh = c.u32()?;
    let mut externals = [None; 4];
    for e in externals.iter_mut() {
        let t = c.f64()?;
        *e = (!t.is_nan()).then_some(t);
    }
    let dsmc = match c.u8()? {
        0 => None,
        _ => Some(DsmcSnapshot {
            v_rel_max: c.f64()?,
            speed_violations: c.u64()?,
            occupancy_violations: c.u64()?,
            collisions: c.u64()?,
            selections: c.u64()?,
        }),
    };
    let n_slots = c.u32()? as usize;
    let mut slots = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        match c.u8()? {
            0 => slots.push(None),
            _ => {
                let species = c.u16()?;
                let mode = c.u8()?;
                let pos = [c.f64()?, c.f64()?, c.f64()?];
                let vel = [c.f64()?, c.f64()?, c.f64()?];
                let time = c.f64()?;
                slots.push(Some(ParticleSnapshot {
                    species,
                    mode,
                    pos,
                    vel,
                    time,
                }));
            }
        }
    }
    let n_free = c.u32()? as usize;
    let mut free = Vec::with_capacity(n_free);
    for _ in 0..n_free {
        free.push(c.u32()?);
    }
    Ok(SnapshotData {
        dim,
        n_species,
        time,
        event_count,
        seq,
        rng,
        steps_since_refresh,
        externals,
        dsmc,
        slots,
        free,
    })
}
