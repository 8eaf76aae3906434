//! Domain types shared by all backends: particles, species, the interaction
//! table, the simulation domain, and the global clock.

use crate::events::EventRecord;
use crate::rng::SimRng;
use crate::vecmath::{norm, sub, Vector};
use crate::{Error, Result};

/// Particle ids are dense 1-based indices; 0 is the "none" sentinel used by
/// the intrusive cell lists. A free-list recycles ids after FPKMC deaths.
pub type ParticleId = u32;
pub const NO_PARTICLE: ParticleId = 0;

pub type SpeciesId = u16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Periodic,
    Wall,
    Open,
}

/// One face of the simulation box. `temperature` turns a wall thermal
/// (diffuse re-emission at that temperature) instead of specular.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceSpec {
    pub kind: BoundaryKind,
    pub temperature: Option<f64>,
}

impl FaceSpec {
    pub fn periodic() -> Self {
        FaceSpec {
            kind: BoundaryKind::Periodic,
            temperature: None,
        }
    }
}

/// Orthogonal simulation box `[0, L_k)` per axis with per-face boundary
/// kinds. Faces are indexed `2*axis + hi`.
#[derive(Clone, Debug)]
pub struct Domain {
    pub dim: usize,
    pub lengths: Vector,
    pub faces: [FaceSpec; 6],
}

impl Domain {
    pub fn new(dim: usize, lengths: Vector, faces: [FaceSpec; 6]) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Config(format!("dimension must be 2 or 3, got {dim}")));
        }
        for k in 0..dim {
            if !(lengths[k].is_finite() && lengths[k] > 0.0) {
                return Err(Error::Config(format!(
                    "box length along axis {k} must be finite and positive"
                )));
            }
        }
        for axis in 0..dim {
            let lo = faces[2 * axis].kind;
            let hi = faces[2 * axis + 1].kind;
            if (lo == BoundaryKind::Periodic) != (hi == BoundaryKind::Periodic) {
                return Err(Error::Config(format!(
                    "periodic boundaries must be paired on axis {axis}"
                )));
            }
        }
        let mut lengths = lengths;
        for k in dim..3 {
            lengths[k] = 1.0; // unused axes get unit extent
        }
        Ok(Domain { dim, lengths, faces })
    }

    #[inline]
    pub fn periodic(&self, axis: usize) -> bool {
        self.faces[2 * axis].kind == BoundaryKind::Periodic
    }

    pub fn fully_periodic(&self) -> bool {
        (0..self.dim).all(|k| self.periodic(k))
    }

    #[inline]
    pub fn face(&self, face: usize) -> &FaceSpec {
        &self.faces[face]
    }

    /// Minimum-image displacement `a - b`.
    #[inline]
    pub fn min_image(&self, a: &Vector, b: &Vector) -> Vector {
        let mut d = sub(a, b);
        for k in 0..self.dim {
            if self.periodic(k) {
                let l = self.lengths[k];
                if d[k] > 0.5 * l {
                    d[k] -= l;
                } else if d[k] < -0.5 * l {
                    d[k] += l;
                }
            }
        }
        d
    }

    /// Wrap a position into the primary box on periodic axes; returns the
    /// lattice shift applied.
    pub fn wrap(&self, pos: &mut Vector) -> Vector {
        let mut shift = [0.0; 3];
        for k in 0..self.dim {
            if self.periodic(k) {
                let l = self.lengths[k];
                while pos[k] < 0.0 {
                    pos[k] += l;
                    shift[k] += l;
                }
                while pos[k] >= l {
                    pos[k] -= l;
                    shift[k] -= l;
                }
            }
        }
        shift
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|k| self.lengths[k]).product()
    }
}

/// Generalized pair distance: minimum-image centroid separation. A pair
/// overlaps iff `overlap_distance < cutoff(a, b)`.
#[inline]
pub fn overlap_distance(domain: &Domain, ri: &Vector, rj: &Vector) -> f64 {
    let d = domain.min_image(ri, rj);
    norm(&d, domain.dim)
}

/// What happens when an interacting pair comes into contact.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReactionKind {
    /// Hard-core elastic collision (momentum and energy conserving).
    Elastic,
    /// Both reactants removed.
    Annihilate,
    /// One survivor of the given species at the diffusion-weighted midpoint.
    Coalesce { product: SpeciesId },
    /// Reactants removed, products placed at the contact point.
    Products { products: Vec<SpeciesId> },
    /// Hard core plus a concentric outer bound at `range`: the pair also
    /// collides elastically when stretched to `range` (bonded bead chains).
    Tether { range: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRule {
    pub kind: ReactionKind,
    /// Contact distance D_ij; defaults to the additive (D_i + D_j) / 2.
    pub cutoff: f64,
}

#[derive(Clone, Debug)]
pub struct SpeciesSpec {
    pub name: String,
    pub diameter: f64,
    pub mass: f64,
    /// Diffusion coefficient (FPKMC species; 0 for ballistic species).
    pub diffusion: f64,
    /// Decay rate (1/time, 0 if stable).
    pub decay_rate: f64,
    pub decay_products: Vec<SpeciesId>,
    /// Spatially uniform birth rate (events per unit time over the domain).
    pub birth_rate: f64,
    /// Maintain near-neighbor lists for this species.
    pub use_nnl: bool,
}

/// Per-species data plus the symmetric interaction table I_ab and pair rules.
#[derive(Clone, Debug)]
pub struct SpeciesTable {
    species: Vec<SpeciesSpec>,
    interacts: Vec<bool>,
    rules: Vec<Option<PairRule>>,
    /// Bit `b` of `rows[s]` set iff species b interacts with s; used by the
    /// cell-mask skip test.
    rows: Vec<u64>,
    max_reach: f64,
}

impl SpeciesTable {
    pub fn new(
        species: Vec<SpeciesSpec>,
        interacts_matrix: Vec<Vec<bool>>,
        pair_rules: Vec<(SpeciesId, SpeciesId, PairRule)>,
    ) -> Result<Self> {
        let n = species.len();
        if n == 0 {
            return Err(Error::Config("at least one species is required".into()));
        }
        if n > 61 {
            return Err(Error::Config(format!(
                "at most 61 species supported (cell bitmask holds N_s + 3 bits in one word), got {n}"
            )));
        }
        if interacts_matrix.len() != n || interacts_matrix.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!(
                "interaction matrix must be {n}x{n}"
            )));
        }
        for a in 0..n {
            for b in 0..a {
                if interacts_matrix[a][b] != interacts_matrix[b][a] {
                    return Err(Error::Config(format!(
                        "interaction matrix must be symmetric: I[{a}][{b}] != I[{b}][{a}]"
                    )));
                }
            }
        }
        for s in &species {
            if !(s.diameter.is_finite() && s.diameter >= 0.0) {
                return Err(Error::Config(format!(
                    "species {}: diameter must be finite and >= 0",
                    s.name
                )));
            }
            if !(s.mass.is_finite() && s.mass > 0.0) {
                return Err(Error::Config(format!(
                    "species {}: mass must be finite and positive",
                    s.name
                )));
            }
            for rate in [s.diffusion, s.decay_rate, s.birth_rate] {
                if !(rate.is_finite() && rate >= 0.0) {
                    return Err(Error::Config(format!(
                        "species {}: rates and coefficients must be >= 0",
                        s.name
                    )));
                }
            }
            for &p in &s.decay_products {
                if p as usize >= n {
                    return Err(Error::Config(format!(
                        "species {}: decay product {p} out of range",
                        s.name
                    )));
                }
            }
        }

        let mut interacts = vec![false; n * n];
        for a in 0..n {
            for b in 0..n {
                interacts[a * n + b] = interacts_matrix[a][b];
            }
        }
        let mut rules: Vec<Option<PairRule>> = vec![None; n * n];
        for (a, b, rule) in pair_rules {
            let (a, b) = (a as usize, b as usize);
            if a >= n || b >= n {
                return Err(Error::Config(format!(
                    "pair rule references species ({a}, {b}) out of range"
                )));
            }
            if !interacts[a * n + b] {
                return Err(Error::Config(format!(
                    "pair rule given for non-interacting pair ({a}, {b})"
                )));
            }
            rules[a * n + b] = Some(rule.clone());
            rules[b * n + a] = Some(rule);
        }
        let mut rows = vec![0u64; n];
        for (s, row) in rows.iter_mut().enumerate() {
            for b in 0..n {
                if interacts[s * n + b] {
                    *row |= 1 << b;
                }
            }
        }
        let mut table = SpeciesTable {
            species,
            interacts,
            rules,
            rows,
            max_reach: 0.0,
        };
        let mut reach: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                if table.interacts(a as SpeciesId, b as SpeciesId) {
                    reach = reach.max(table.reach(a as SpeciesId, b as SpeciesId));
                }
            }
        }
        table.max_reach = reach;
        Ok(table)
    }

    pub fn count(&self) -> usize {
        self.species.len()
    }

    #[inline]
    pub fn spec(&self, s: SpeciesId) -> &SpeciesSpec {
        &self.species[s as usize]
    }

    pub fn all(&self) -> &[SpeciesSpec] {
        &self.species
    }

    #[inline]
    pub fn interacts(&self, a: SpeciesId, b: SpeciesId) -> bool {
        self.interacts[a as usize * self.count() + b as usize]
    }

    /// Contact distance D_ab; negative encodes a non-interacting pair.
    #[inline]
    pub fn cutoff(&self, a: SpeciesId, b: SpeciesId) -> f64 {
        if !self.interacts(a, b) {
            return -1.0;
        }
        match &self.rules[a as usize * self.count() + b as usize] {
            Some(rule) => rule.cutoff,
            None => 0.5 * (self.spec(a).diameter + self.spec(b).diameter),
        }
    }

    /// Largest distance at which the pair can produce an event (the tether
    /// outer bound exceeds the hard-core cutoff).
    #[inline]
    pub fn reach(&self, a: SpeciesId, b: SpeciesId) -> f64 {
        let cut = self.cutoff(a, b);
        match self.rule(a, b) {
            Some(PairRule {
                kind: ReactionKind::Tether { range },
                ..
            }) => cut.max(*range),
            _ => cut,
        }
    }

    #[inline]
    pub fn rule(&self, a: SpeciesId, b: SpeciesId) -> Option<&PairRule> {
        self.rules[a as usize * self.count() + b as usize].as_ref()
    }

    pub fn reaction(&self, a: SpeciesId, b: SpeciesId) -> ReactionKind {
        match self.rule(a, b) {
            Some(r) => r.kind.clone(),
            None => ReactionKind::Elastic,
        }
    }

    /// Interaction row of species `s` as a bitmask over species bits.
    #[inline]
    pub fn interaction_row(&self, s: SpeciesId) -> u64 {
        self.rows[s as usize]
    }

    /// Max of `reach` over all interacting pairs; lower bound for cell size.
    pub fn max_reach(&self) -> f64 {
        self.max_reach
    }

    pub fn total_birth_rate(&self) -> f64 {
        self.species.iter().map(|s| s.birth_rate).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    EventDriven,
    TimeDriven,
}

#[derive(Clone, Debug)]
pub struct Particle {
    pub species: SpeciesId,
    pub pos: Vector,
    pub vel: Vector,
    /// Particle time t_i: last time this particle's state was updated.
    pub time: f64,
    pub cell: usize,
    pub event: EventRecord,
    pub mode: Mode,
    /// Handle into the NNL registry (None when no neighborhood).
    pub neighborhood: Option<u32>,
    /// Handle into the FPKMC protection registry.
    pub protection: Option<u32>,
    // Intrusive doubly-linked cell list.
    pub(crate) cell_prev: ParticleId,
    pub(crate) cell_next: ParticleId,
    pub(crate) alive: bool,
}

impl Particle {
    pub fn new(species: SpeciesId, pos: Vector, vel: Vector) -> Self {
        Particle {
            species,
            pos,
            vel,
            time: 0.0,
            cell: usize::MAX,
            event: EventRecord::invalid(),
            mode: Mode::EventDriven,
            neighborhood: None,
            protection: None,
            cell_prev: NO_PARTICLE,
            cell_next: NO_PARTICLE,
            alive: true,
        }
    }

    pub fn alive(&self) -> bool {
        self.alive
    }
}

/// Array-backed particle storage with a free-list: ids stay dense so every
/// per-particle attribute is O(1) indexed, which dominates the hot loop.
#[derive(Clone, Debug, Default)]
pub struct ParticleStore {
    slots: Vec<Particle>,
    free: Vec<ParticleId>,
    alive: usize,
}

impl ParticleStore {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn get(&self, id: ParticleId) -> &Particle {
        &self.slots[(id - 1) as usize]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParticleId) -> &mut Particle {
        &mut self.slots[(id - 1) as usize]
    }

    /// Insert a particle, reusing a freed id when one exists.
    pub fn insert(&mut self, particle: Particle) -> ParticleId {
        self.alive += 1;
        if let Some(id) = self.free.pop() {
            self.slots[(id - 1) as usize] = particle;
            id
        } else {
            self.slots.push(particle);
            self.slots.len() as ParticleId
        }
    }

    /// Mark a particle dead and recycle its id. The caller must already have
    /// unlinked it from cells, queues, and regions.
    pub fn remove(&mut self, id: ParticleId) {
        let p = self.get_mut(id);
        debug_assert!(p.alive, "double remove of particle {id}");
        p.alive = false;
        self.alive -= 1;
        self.free.push(id);
    }

    pub fn len(&self) -> usize {
        self.alive
    }

    pub fn is_empty(&self) -> bool {
        self.alive == 0
    }

    /// Number of id slots ever allocated (upper bound over all live ids).
    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Recyclable ids in pop order (snapshot restarts must reproduce id
    /// reuse exactly).
    pub fn free_list(&self) -> &[ParticleId] {
        &self.free
    }

    /// Rebuild a store from snapshot parts. Dead slots carry placeholder
    /// particles; `free` must list exactly the dead ids.
    pub fn from_parts(slots: Vec<Particle>, free: Vec<ParticleId>) -> Self {
        let alive = slots.iter().filter(|p| p.alive).count();
        debug_assert_eq!(slots.len() - alive, free.len());
        ParticleStore { slots, free, alive }
    }

    /// Disjoint mutable access to two distinct particles.
    pub fn pair_mut(&mut self, i: ParticleId, j: ParticleId) -> (&mut Particle, &mut Particle) {
        assert_ne!(i, j);
        let (a, b) = (i as usize - 1, j as usize - 1);
        if a < b {
            let (lo, hi) = self.slots.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.slots.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParticleId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, p)| p.alive)
            .map(|(i, _)| (i + 1) as ParticleId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParticleId, &Particle)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, p)| p.alive)
            .map(|(i, p)| ((i + 1) as ParticleId, p))
    }
}

/// Global simulation clock: non-decreasing time, event counter, and the
/// (snapshottable) random stream.
#[derive(Clone, Debug)]
pub struct SimulationClock {
    pub time: f64,
    pub event_count: u64,
    pub rng: SimRng,
}

impl SimulationClock {
    pub fn new(seed: u64) -> Self {
        SimulationClock {
            time: 0.0,
            event_count: 0,
            rng: SimRng::new(seed),
        }
    }

    /// Advance the global time; faults on regression beyond slack.
    pub fn advance(&mut self, to: f64) -> Result<()> {
        if to < self.time - 1e-12 {
            return Err(Error::Causality {
                event: to,
                clock: self.time,
            });
        }
        self.time = self.time.max(to);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn periodic_box(side: f64) -> Domain {
        Domain::new(3, [side; 3], [FaceSpec::periodic(); 6]).unwrap()
    }

    #[test]
    fn overlap_distance_plain_euclidean() {
        let d = periodic_box(100.0);
        let a = [0.0, 0.0, 0.0];
        let b = [3.0, 0.0, 0.0];
        assert_eq!(overlap_distance(&d, &a, &b), 3.0);
    }

    #[test]
    fn overlap_distance_minimum_image() {
        let d = periodic_box(10.0);
        let a = [0.5, 0.0, 0.0];
        let b = [9.5, 0.0, 0.0];
        assert!((overlap_distance(&d, &a, &b) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn overlap_distance_coincident() {
        let d = periodic_box(10.0);
        let a = [1.0, 2.0, 3.0];
        assert_eq!(overlap_distance(&d, &a, &a), 0.0);
    }

    #[test]
    fn min_image_symmetric_and_bounded() {
        let d = periodic_box(7.0);
        let mut rng = crate::rng::SimRng::new(11);
        let bound = (3.0f64).sqrt() / 2.0 * 7.0 + 1e-12;
        for _ in 0..2000 {
            let a = [
                rng.uniform() * 7.0,
                rng.uniform() * 7.0,
                rng.uniform() * 7.0,
            ];
            let b = [
                rng.uniform() * 7.0,
                rng.uniform() * 7.0,
                rng.uniform() * 7.0,
            ];
            let dij = overlap_distance(&d, &a, &b);
            let dji = overlap_distance(&d, &b, &a);
            assert!((dij - dji).abs() < 1e-15);
            assert!(dij <= bound, "distance {dij} exceeds sqrt(d)/2 * side");
        }
    }

    #[test]
    fn min_image_matches_brute_force_lattice_scan() {
        let side = 5.0;
        let d = periodic_box(side);
        let mut rng = crate::rng::SimRng::new(3);
        for _ in 0..500 {
            let a = [
                rng.uniform() * side,
                rng.uniform() * side,
                rng.uniform() * side,
            ];
            let b = [
                rng.uniform() * side,
                rng.uniform() * side,
                rng.uniform() * side,
            ];
            let fast = overlap_distance(&d, &a, &b);
            // Brute force over all neighboring lattice images.
            let mut best = f64::INFINITY;
            for ix in -1..=1 {
                for iy in -1..=1 {
                    for iz in -1..=1 {
                        let shifted = [
                            b[0] + ix as f64 * side,
                            b[1] + iy as f64 * side,
                            b[2] + iz as f64 * side,
                        ];
                        let delta = sub(&a, &shifted);
                        best = best.min(norm(&delta, 3));
                    }
                }
            }
            assert!((fast - best).abs() < 1e-12);
        }
    }

    #[test]
    fn interaction_matrix_symmetry_enforced() {
        let specs = vec![
            SpeciesSpec {
                name: "a".into(),
                diameter: 1.0,
                mass: 1.0,
                diffusion: 0.0,
                decay_rate: 0.0,
                decay_products: vec![],
                birth_rate: 0.0,
                use_nnl: false,
            };
            2
        ];
        let asym = vec![vec![true, true], vec![false, true]];
        assert!(SpeciesTable::new(specs, asym, vec![]).is_err());
    }

    #[test]
    fn additive_cutoff_default() {
        let mk = |d: f64| SpeciesSpec {
            name: format!("d{d}"),
            diameter: d,
            mass: 1.0,
            diffusion: 0.0,
            decay_rate: 0.0,
            decay_products: vec![],
            birth_rate: 0.0,
            use_nnl: false,
        };
        let t = SpeciesTable::new(
            vec![mk(1.0), mk(2.0)],
            vec![vec![true, true], vec![true, false]],
            vec![],
        )
        .unwrap();
        assert_eq!(t.cutoff(0, 1), 1.5);
        assert_eq!(t.cutoff(1, 1), -1.0); // non-interacting
        assert_eq!(t.interaction_row(0), 0b11);
        assert_eq!(t.interaction_row(1), 0b01);
    }

    #[test]
    fn store_reuses_freed_ids() {
        let mut store = ParticleStore::new();
        let a = store.insert(Particle::new(0, [0.0; 3], [0.0; 3]));
        let b = store.insert(Particle::new(0, [1.0; 3], [0.0; 3]));
        assert_eq!((a, b), (1, 2));
        store.remove(a);
        assert_eq!(store.len(), 1);
        let c = store.insert(Particle::new(0, [2.0; 3], [0.0; 3]));
        assert_eq!(c, a);
        assert_eq!(store.len(), 2);
        assert_eq!(store.ids().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn clock_rejects_time_regression() {
        let mut clock = SimulationClock::new(1);
        clock.advance(5.0).unwrap();
        assert!(clock.advance(4.0).is_err());
        // Within slack is a no-op, never a rewind.
        clock.advance(5.0 - 1e-13).unwrap();
        assert_eq!(clock.time, 5.0);
    }
}
