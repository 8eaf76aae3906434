//! Linked-list cell grid, cell bitmasks, and the interior / boundary /
//! external domain partitioning.
//!
//! Cell lists are doubly-linked intrusive lists threaded through the
//! per-particle `cell_prev`/`cell_next` ids: removal during a transfer is
//! O(1) and the hot loop never allocates. Each cell carries one bitmask
//! word: species-presence bits (conservative between refreshes), plus the
//! event-driven, boundary, and external flags.

use crate::model::{Domain, ParticleId, ParticleStore, SpeciesId, NO_PARTICLE};
use crate::vecmath::Vector;
use crate::{Error, Result};

pub const MASK_ED: u64 = 1 << 61;
pub const MASK_BOUNDARY: u64 = 1 << 62;
pub const MASK_EXTERNAL: u64 = 1 << 63;
pub const MASK_SPECIES: u64 = MASK_ED - 1;

/// Where a face crossing leads.
pub enum FaceCrossing {
    /// Neighboring cell (periodic crossings carry the position shift).
    Cell { cell: usize, shift: Vector },
    /// No cell on the other side (wall or grid edge on an open face).
    Edge,
}

#[derive(Clone, Debug)]
pub struct CellGrid {
    pub dim: usize,
    pub dims: [usize; 3],
    pub cell_size: [f64; 3],
    head: Vec<ParticleId>,
    count: Vec<u32>,
    mask: Vec<u64>,
    /// Simulated region (cell coordinates, exclusive hi) and layer widths,
    /// kept so the partition can be re-applied after grid rebuilds.
    partition: Option<PartitionSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionSpec {
    pub sim_lo: [usize; 3],
    pub sim_hi: [usize; 3],
    pub w_boundary: usize,
    pub w_external: usize,
}

impl CellGrid {
    pub fn new(domain: &Domain, dims: [usize; 3]) -> Result<Self> {
        let mut dims = dims;
        for k in domain.dim..3 {
            dims[k] = 1;
        }
        for k in 0..domain.dim {
            if dims[k] == 0 {
                return Err(Error::Config(format!("zero cells along axis {k}")));
            }
        }
        let mut cell_size = [1.0; 3];
        for k in 0..3 {
            cell_size[k] = domain.lengths[k] / dims[k] as f64;
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(CellGrid {
            dim: domain.dim,
            dims,
            cell_size,
            head: vec![NO_PARTICLE; n],
            count: vec![0; n],
            mask: vec![0; n],
            partition: None,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.head.len()
    }

    #[inline]
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|k| self.cell_size[k]).product()
    }

    #[inline]
    pub fn coords(&self, cell: usize) -> [usize; 3] {
        let x = cell % self.dims[0];
        let y = (cell / self.dims[0]) % self.dims[1];
        let z = cell / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Cell containing a position: floor(pos / cell_size), clamped into
    /// range (positions exactly on the upper box face land in the last
    /// cell). NaN positions are a fault.
    #[inline]
    pub fn locate_cell(&self, pos: &Vector) -> usize {
        let mut c = [0usize; 3];
        for k in 0..self.dim {
            assert!(!pos[k].is_nan(), "NaN position in locate_cell");
            let idx = (pos[k] / self.cell_size[k]).floor();
            c[k] = (idx.max(0.0) as usize).min(self.dims[k] - 1);
        }
        self.index(c)
    }

    #[inline]
    pub fn occupancy(&self, cell: usize) -> u32 {
        self.count[cell]
    }

    #[inline]
    pub fn mask(&self, cell: usize) -> u64 {
        self.mask[cell]
    }

    #[inline]
    pub fn is_external(&self, cell: usize) -> bool {
        self.mask[cell] & MASK_EXTERNAL != 0
    }

    #[inline]
    pub fn is_boundary(&self, cell: usize) -> bool {
        self.mask[cell] & MASK_BOUNDARY != 0
    }

    /// Purely external: ignored by the simulation, no particle may be here.
    #[inline]
    pub fn is_purely_external(&self, cell: usize) -> bool {
        self.mask[cell] & (MASK_EXTERNAL | MASK_BOUNDARY) == MASK_EXTERNAL
    }

    #[inline]
    pub fn is_event_driven(&self, cell: usize) -> bool {
        self.mask[cell] & MASK_ED != 0
    }

    pub fn set_event_driven(&mut self, cell: usize, ed: bool) {
        if ed {
            self.mask[cell] |= MASK_ED;
        } else {
            self.mask[cell] &= !MASK_ED;
        }
    }

    /// True when a neighbor search for species row `row` can skip this cell:
    /// no set species bit corresponds to a species interacting with s.
    /// Conservative: stale set bits refuse the skip, never the reverse.
    #[inline]
    pub fn mask_skip(&self, cell: usize, row: u64) -> bool {
        self.mask[cell] & row & MASK_SPECIES == 0
    }

    /// First particle of the cell's intrusive list.
    #[inline]
    pub fn first(&self, cell: usize) -> ParticleId {
        self.head[cell]
    }

    /// Visit every particle currently listed in `cell`.
    #[inline]
    pub fn for_each_in_cell(&self, store: &ParticleStore, cell: usize, mut f: impl FnMut(ParticleId)) {
        let mut id = self.head[cell];
        while id != NO_PARTICLE {
            let next = store.get(id).cell_next;
            f(id);
            id = next;
        }
    }

    /// Link a particle into the cell holding its position.
    pub fn insert_particle(&mut self, store: &mut ParticleStore, id: ParticleId) {
        let cell = self.locate_cell(&store.get(id).pos);
        self.link(store, id, cell);
    }

    fn link(&mut self, store: &mut ParticleStore, id: ParticleId, cell: usize) {
        let old_head = self.head[cell];
        {
            let p = store.get_mut(id);
            p.cell = cell;
            p.cell_prev = NO_PARTICLE;
            p.cell_next = old_head;
        }
        if old_head != NO_PARTICLE {
            store.get_mut(old_head).cell_prev = id;
        }
        self.head[cell] = id;
        self.count[cell] += 1;
        self.mask[cell] |= 1 << store.get(id).species;
    }

    pub fn unlink(&mut self, store: &mut ParticleStore, id: ParticleId) {
        let (cell, prev, next) = {
            let p = store.get(id);
            (p.cell, p.cell_prev, p.cell_next)
        };
        if prev != NO_PARTICLE {
            store.get_mut(prev).cell_next = next;
        } else {
            debug_assert_eq!(self.head[cell], id);
            self.head[cell] = next;
        }
        if next != NO_PARTICLE {
            store.get_mut(next).cell_prev = prev;
        }
        self.count[cell] -= 1;
        let p = store.get_mut(id);
        p.cell_prev = NO_PARTICLE;
        p.cell_next = NO_PARTICLE;
        p.cell = usize::MAX;
    }

    /// Re-bin a particle by its current position. No-op when the cell is
    /// unchanged; returns the (old, new) cells otherwise.
    pub fn relocate(&mut self, store: &mut ParticleStore, id: ParticleId) -> Option<(usize, usize)> {
        let old = store.get(id).cell;
        let new = self.locate_cell(&store.get(id).pos);
        if old == new {
            return None;
        }
        self.unlink(store, id);
        self.link(store, id, new);
        Some((old, new))
    }

    /// What lies across `face` (2*axis + hi) of `cell`.
    pub fn across_face(&self, domain: &Domain, cell: usize, face: usize) -> FaceCrossing {
        let axis = face / 2;
        let hi = face % 2 == 1;
        let mut c = self.coords(cell);
        let mut shift = [0.0; 3];
        if hi {
            if c[axis] + 1 < self.dims[axis] {
                c[axis] += 1;
            } else if domain.periodic(axis) {
                c[axis] = 0;
                shift[axis] = -domain.lengths[axis];
            } else {
                return FaceCrossing::Edge;
            }
        } else if c[axis] > 0 {
            c[axis] -= 1;
        } else if domain.periodic(axis) {
            c[axis] = self.dims[axis] - 1;
            shift[axis] = domain.lengths[axis];
        } else {
            return FaceCrossing::Edge;
        }
        FaceCrossing::Cell {
            cell: self.index(c),
            shift,
        }
    }

    /// Move a particle across a cell face: lists updated, species bit set in
    /// the destination mask, position translated by the lattice vector when
    /// the face is periodic. Entering a purely external cell is a fault.
    pub fn transfer_particle(
        &mut self,
        store: &mut ParticleStore,
        domain: &Domain,
        id: ParticleId,
        face: usize,
    ) -> Result<usize> {
        let cell = store.get(id).cell;
        match self.across_face(domain, cell, face) {
            FaceCrossing::Cell { cell: new_cell, shift } => {
                if self.is_purely_external(new_cell) {
                    return Err(Error::fault(format!(
                        "particle {id} transferred into purely external cell {new_cell}"
                    )));
                }
                self.unlink(store, id);
                {
                    let p = store.get_mut(id);
                    for k in 0..3 {
                        p.pos[k] += shift[k];
                    }
                }
                self.link(store, id, new_cell);
                Ok(new_cell)
            }
            FaceCrossing::Edge => Err(Error::fault(format!(
                "particle {id} transferred across face {face} with no cell behind it"
            ))),
        }
    }

    /// Visit the <= 3^d cells adjacent to `c` (including `c`), wrapping on
    /// periodic faces and omitting out-of-range cells on wall/open faces.
    #[inline]
    pub fn for_each_neighbor(&self, domain: &Domain, cell: usize, mut f: impl FnMut(usize)) {
        self.for_each_within(domain, cell, 1, &mut f)
    }

    /// Same as `for_each_neighbor` with Chebyshev radius `k` (protection
    /// searches whose reach exceeds one cell).
    pub fn for_each_within(
        &self,
        domain: &Domain,
        cell: usize,
        k: usize,
        f: &mut impl FnMut(usize),
    ) {
        debug_assert!(
            !self.is_purely_external(cell),
            "neighbor scan from purely external cell"
        );
        let c = self.coords(cell);
        let k = k as isize;
        let mut lo = [0isize; 3];
        let mut hi = [0isize; 3];
        for axis in 0..self.dim {
            let span = self.dims[axis] as isize;
            if 2 * k + 1 >= span && domain.periodic(axis) {
                // Shell wraps onto itself; visit each column exactly once.
                lo[axis] = 0;
                hi[axis] = span - 1;
            } else {
                lo[axis] = c[axis] as isize - k;
                hi[axis] = c[axis] as isize + k;
            }
        }
        let mut coord = [0usize; 3];
        let mut visit = |grid: &Self, coord: [usize; 3]| f(grid.index(coord));
        let zs = if self.dim == 3 { lo[2]..=hi[2] } else { 0..=0 };
        for z in zs {
            let Some(cz) = self.wrap_coord(domain, 2, z) else {
                continue;
            };
            coord[2] = cz;
            for y in lo[1]..=hi[1] {
                let Some(cy) = self.wrap_coord(domain, 1, y) else {
                    continue;
                };
                coord[1] = cy;
                for x in lo[0]..=hi[0] {
                    let Some(cx) = self.wrap_coord(domain, 0, x) else {
                        continue;
                    };
                    coord[0] = cx;
                    visit(self, coord);
                }
            }
        }
    }

    #[inline]
    fn wrap_coord(&self, domain: &Domain, axis: usize, v: isize) -> Option<usize> {
        let span = self.dims[axis] as isize;
        if axis >= self.dim {
            return Some(0);
        }
        if v >= 0 && v < span {
            Some(v as usize)
        } else if domain.periodic(axis) {
            Some(v.rem_euclid(span) as usize)
        } else {
            None
        }
    }

    /// Neighbor cells as a vector (test and setup convenience).
    pub fn neighbor_cells(&self, domain: &Domain, cell: usize) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_neighbor(domain, cell, |c| out.push(c));
        out
    }

    /// Classify cells as interior / boundary / external around a simulated
    /// region. Pure function of cell coordinates and the spec: re-running it
    /// changes nothing. Species and ED bits are left alone.
    pub fn partition_domain(&mut self, spec: PartitionSpec) -> Result<()> {
        if spec.w_boundary < 1 {
            return Err(Error::Config("boundary layer width must be >= 1".into()));
        }
        for k in 0..self.dim {
            if spec.sim_lo[k] >= spec.sim_hi[k] || spec.sim_hi[k] > self.dims[k] {
                return Err(Error::Config(format!(
                    "simulated region out of range on axis {k}"
                )));
            }
        }
        for cell in 0..self.cell_count() {
            let c = self.coords(cell);
            let mut flags = self.mask[cell] & !(MASK_BOUNDARY | MASK_EXTERNAL);
            // Chebyshev distance to the simulated region (0 = inside).
            let mut outside = 0usize;
            let mut inside_depth = usize::MAX;
            for k in 0..self.dim {
                if c[k] < spec.sim_lo[k] {
                    outside = outside.max(spec.sim_lo[k] - c[k]);
                } else if c[k] >= spec.sim_hi[k] {
                    outside = outside.max(c[k] + 1 - spec.sim_hi[k]);
                } else {
                    // Depth measured only toward faces that have an external
                    // region behind them; periodic/wall faces contribute none.
                    if spec.sim_lo[k] > 0 {
                        inside_depth = inside_depth.min(c[k] - spec.sim_lo[k]);
                    }
                    if spec.sim_hi[k] < self.dims[k] {
                        inside_depth = inside_depth.min(spec.sim_hi[k] - 1 - c[k]);
                    }
                }
            }
            if outside > 0 {
                flags |= MASK_EXTERNAL;
                if outside <= spec.w_external {
                    flags |= MASK_BOUNDARY; // ghost layer: both external and boundary
                }
            } else if inside_depth < spec.w_boundary {
                flags |= MASK_BOUNDARY;
            }
            self.mask[cell] = flags;
        }
        self.partition = Some(spec);
        Ok(())
    }

    pub fn partition_spec(&self) -> Option<PartitionSpec> {
        self.partition
    }

    /// Whole grid simulated: no boundary, no external cells anywhere.
    pub fn trivial_partition(&self) -> PartitionSpec {
        PartitionSpec {
            sim_lo: [0; 3],
            sim_hi: self.dims,
            w_boundary: 1,
            w_external: 1,
        }
    }

    /// Rebuild the species-presence bits from actual occupancy. The caller
    /// guarantees a synchronization point (all particles advanced to t);
    /// ED/boundary/external flags are left for their owners.
    pub fn refresh_species_bits(&mut self, store: &ParticleStore) {
        for m in self.mask.iter_mut() {
            *m &= !MASK_SPECIES;
        }
        for (_, p) in store.iter() {
            self.mask[p.cell] |= 1 << p.species;
        }
    }

    /// Exact per-cell species occupancy, computed by brute force (oracle and
    /// invariant checks).
    pub fn scan_species_bits(&self, store: &ParticleStore) -> Vec<u64> {
        let mut bits = vec![0u64; self.cell_count()];
        for (_, p) in store.iter() {
            bits[p.cell] |= 1 << p.species;
        }
        bits
    }

    /// Cell-count consistency: every cell count matches a recount from the
    /// lists and the list membership matches `locate_cell` of each position.
    pub fn check_counts(&self, store: &ParticleStore) -> Result<()> {
        let mut seen = 0usize;
        for cell in 0..self.cell_count() {
            let mut n = 0u32;
            let mut id = self.head[cell];
            while id != NO_PARTICLE {
                let p = store.get(id);
                if !p.alive() {
                    return Err(Error::fault(format!("dead particle {id} in cell list")));
                }
                if p.cell != cell {
                    return Err(Error::fault(format!(
                        "particle {id} stored cell {} but listed in {cell}",
                        p.cell
                    )));
                }
                if self.locate_cell(&p.pos) != cell {
                    return Err(Error::fault(format!(
                        "particle {id} listed in cell {cell} but located in {}",
                        self.locate_cell(&p.pos)
                    )));
                }
                n += 1;
                id = p.cell_next;
            }
            if n != self.count[cell] {
                return Err(Error::fault(format!(
                    "cell {cell} count {} but recount {n}",
                    self.count[cell]
                )));
            }
            seen += n as usize;
        }
        if seen != store.len() {
            return Err(Error::fault(format!(
                "cells hold {seen} particles, store holds {}",
                store.len()
            )));
        }
        Ok(())
    }

    /// Count of particles of one species in a cell (linear in occupancy).
    pub fn species_count_in_cell(&self, store: &ParticleStore, cell: usize, s: SpeciesId) -> u32 {
        let mut n = 0;
        self.for_each_in_cell(store, cell, |id| {
            if store.get(id).species == s {
                n += 1;
            }
        });
        n
    }
}
