//! Near-neighbor lists: per-particle neighborhood regions (the particle
//! enlarged by a scaling factor mu > 1) and their intersection lists,
//! reusable until the particle core protrudes from its region.
//!
//! Lists stay symmetric at all times: `j in NNL(i) <=> i in NNL(j)`. Each
//! entry records the lattice translation that brought the neighbor's image
//! closest at creation, so pair geometry stays consistent across periodic
//! wraps during the region's lifetime.

use crate::model::{Domain, ParticleId, ParticleStore, SpeciesTable};
use crate::spatial::CellGrid;
use crate::vecmath::{norm, norm_sq, sub, Vector};
use crate::{Error, Result};

/// Rebuild trigger margin for diffusing particles: the region is renewed
/// when the core comes within this fraction of the radius from the wall.
pub const NEAR_WALL_FRACTION: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NnlTarget {
    Particle(ParticleId),
    /// Hard wall close enough to be a near neighbor (face index).
    Wall(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct NnlEntry {
    pub target: NnlTarget,
    /// Lattice translation: `pos(other) + offset` is the image nearest the
    /// owner at creation time.
    pub offset: Vector,
}

#[derive(Clone, Debug)]
pub struct NeighborhoodRegion {
    pub owner: ParticleId,
    /// Owner position at creation.
    pub center: Vector,
    /// mu * D_i / 2.
    pub radius: f64,
    pub entries: Vec<NnlEntry>,
}

impl NeighborhoodRegion {
    /// Exact time until the ballistic core first touches the inner wall of
    /// the region: smallest positive root of |r(t) - center| = radius - D/2.
    /// None when the particle cannot reach it (zero velocity).
    pub fn ballistic_core_exit(
        &self,
        pos: &Vector,
        vel: &Vector,
        diameter: f64,
        dim: usize,
    ) -> Option<f64> {
        let reach = self.radius - 0.5 * diameter;
        let w = sub(pos, &self.center);
        let a = norm_sq(vel, dim);
        if a == 0.0 {
            return None;
        }
        let b = crate::vecmath::dot(&w, vel, dim);
        let c = norm_sq(&w, dim) - reach * reach;
        // Interior start (c < 0) guarantees one positive root.
        let disc = (b * b - a * c).max(0.0);
        let sq = disc.sqrt();
        let t = if b < 0.0 { (sq - b) / a } else { -c / (b + sq) };
        Some(t.max(0.0))
    }

    /// Diffusive rebuild heuristic: is the core within tolerance of the
    /// inner wall?
    pub fn core_near_inner_wall(&self, pos: &Vector, diameter: f64, dim: usize) -> bool {
        let reach = self.radius - 0.5 * diameter;
        let w = norm(&sub(pos, &self.center), dim);
        w >= reach - NEAR_WALL_FRACTION * self.radius
    }

    /// Core containment: C_i inside N_i.
    pub fn contains_core(&self, pos: &Vector, diameter: f64, dim: usize) -> bool {
        norm(&sub(pos, &self.center), dim) + 0.5 * diameter <= self.radius + 1e-9 * self.radius
    }
}

/// Arena of neighborhood regions; particles hold opaque handles.
#[derive(Clone, Debug, Default)]
pub struct NnlRegistry {
    regions: Vec<Option<NeighborhoodRegion>>,
    free: Vec<u32>,
    pub mu: f64,
    /// Largest region radius over NNL species; sets the cell scan reach.
    max_radius: f64,
}

impl NnlRegistry {
    pub fn new(mu: f64, species: &SpeciesTable) -> Result<Self> {
        if mu <= 1.0 {
            return Err(Error::Config(format!(
                "neighborhood scale mu must exceed 1, got {mu}"
            )));
        }
        let max_radius = species
            .all()
            .iter()
            .filter(|s| s.use_nnl)
            .map(|s| mu * 0.5 * s.diameter)
            .fold(0.0, f64::max);
        Ok(NnlRegistry {
            regions: Vec::new(),
            free: Vec::new(),
            mu,
            max_radius,
        })
    }

    pub fn region(&self, handle: u32) -> &NeighborhoodRegion {
        self.regions[handle as usize].as_ref().expect("stale NNL handle")
    }

    pub fn region_of<'a>(&'a self, store: &ParticleStore, i: ParticleId) -> Option<&'a NeighborhoodRegion> {
        store.get(i).neighborhood.map(|h| self.region(h))
    }

    /// Build N_i at the particle's current position and populate NNL(i) by a
    /// cell scan over every region within reach, inserting the symmetric
    /// entries into each neighbor's list.
    pub fn build(
        &mut self,
        store: &mut ParticleStore,
        grid: &CellGrid,
        domain: &Domain,
        species: &SpeciesTable,
        i: ParticleId,
    ) -> Result<()> {
        debug_assert!(store.get(i).neighborhood.is_none(), "rebuild without destroy");
        let (center, s_i) = {
            let p = store.get(i);
            (p.pos, p.species)
        };
        let radius = self.mu * 0.5 * species.spec(s_i).diameter;
        let mut entries: Vec<NnlEntry> = Vec::new();

        // Region intersections via the cell grid. Reach covers the largest
        // partner region.
        let reach = radius + self.max_radius;
        let min_cell = (0..domain.dim)
            .map(|k| grid.cell_size[k])
            .fold(f64::INFINITY, f64::min);
        let k = (reach / min_cell).ceil().max(1.0) as usize;
        let cell = store.get(i).cell;
        let mut candidates: Vec<ParticleId> = Vec::new();
        grid.for_each_within(domain, cell, k, &mut |c| {
            grid.for_each_in_cell(store, c, |j| {
                if j != i && store.get(j).neighborhood.is_some() {
                    candidates.push(j);
                }
            });
        });
        for j in candidates {
            if !species.interacts(s_i, store.get(j).species) {
                continue;
            }
            let other = self.region(store.get(j).neighborhood.unwrap());
            let d = domain.min_image(&other.center, &center);
            if norm(&d, domain.dim) < radius + other.radius {
                // Offset maps the neighbor's stored position onto the image
                // nearest the new region.
                let raw = sub(&other.center, &center);
                let offset = sub(&d, &raw);
                entries.push(NnlEntry {
                    target: NnlTarget::Particle(j),
                    offset,
                });
            }
        }
        // Hard walls within reach are near neighbors too.
        for axis in 0..domain.dim {
            for hi in [false, true] {
                let face = 2 * axis + hi as usize;
                if domain.face(face).kind != crate::model::BoundaryKind::Wall {
                    continue;
                }
                let dist = if hi {
                    domain.lengths[axis] - center[axis]
                } else {
                    center[axis]
                };
                if dist < radius {
                    entries.push(NnlEntry {
                        target: NnlTarget::Wall(face),
                        offset: [0.0; 3],
                    });
                }
            }
        }

        let handle = self.alloc(NeighborhoodRegion {
            owner: i,
            center,
            radius,
            entries: entries.clone(),
        });
        store.get_mut(i).neighborhood = Some(handle);

        // Mirror the particle entries.
        for e in &entries {
            if let NnlTarget::Particle(j) = e.target {
                let jh = store.get(j).neighborhood.unwrap();
                self.regions[jh as usize]
                    .as_mut()
                    .unwrap()
                    .entries
                    .push(NnlEntry {
                        target: NnlTarget::Particle(i),
                        offset: crate::vecmath::scale(&e.offset, -1.0),
                    });
            }
        }
        Ok(())
    }

    /// Drop N_i and remove the owner from every neighbor's list.
    pub fn destroy(&mut self, store: &mut ParticleStore, i: ParticleId) {
        let Some(handle) = store.get_mut(i).neighborhood.take() else {
            return;
        };
        let region = self.regions[handle as usize].take().expect("stale NNL handle");
        self.free.push(handle);
        for e in &region.entries {
            if let NnlTarget::Particle(j) = e.target {
                if let Some(jh) = store.get(j).neighborhood {
                    let list = &mut self.regions[jh as usize].as_mut().unwrap().entries;
                    list.retain(
                        |x| !matches!(x.target, NnlTarget::Particle(p) if p == i),
                    );
                }
            }
        }
    }

    /// A periodic wrap moved particle `j` by `shift`; keep every stored
    /// image consistent.
    pub fn apply_wrap(&mut self, store: &ParticleStore, j: ParticleId, shift: &Vector) {
        let Some(jh) = store.get(j).neighborhood else {
            return;
        };
        // j's own entries: neighbor images are now measured from the shifted
        // position, so each image needs the same shift added.
        let entries: Vec<NnlTarget> = {
            let region = self.regions[jh as usize].as_mut().unwrap();
            for e in region.entries.iter_mut() {
                for k in 0..3 {
                    e.offset[k] += shift[k];
                }
            }
            // Keep the stored center on the wrapped image as well so core
            // containment checks keep working.
            for k in 0..3 {
                region.center[k] += shift[k];
            }
            region.entries.iter().map(|e| e.target).collect()
        };
        // Entries pointing back at j absorb the opposite shift.
        for t in entries {
            if let NnlTarget::Particle(k) = t {
                if let Some(kh) = store.get(k).neighborhood {
                    let list = &mut self.regions[kh as usize].as_mut().unwrap().entries;
                    for e in list.iter_mut() {
                        if matches!(e.target, NnlTarget::Particle(p) if p == j) {
                            for a in 0..3 {
                                e.offset[a] -= shift[a];
                            }
                        }
                    }
                }
            }
        }
    }

    fn alloc(&mut self, region: NeighborhoodRegion) -> u32 {
        if let Some(h) = self.free.pop() {
            self.regions[h as usize] = Some(region);
            h
        } else {
            self.regions.push(Some(region));
            (self.regions.len() - 1) as u32
        }
    }

    /// Full-scan symmetry checker: j in NNL(i) <=> i in NNL(j).
    pub fn check_symmetry(&self, store: &ParticleStore) -> Result<()> {
        for region in self.regions.iter().flatten() {
            for e in &region.entries {
                if let NnlTarget::Particle(j) = e.target {
                    let ok = store
                        .get(j)
                        .neighborhood
                        .map(|jh| {
                            self.region(jh).entries.iter().any(
                                |x| matches!(x.target, NnlTarget::Particle(p) if p == region.owner),
                            )
                        })
                        .unwrap_or(false);
                    if !ok {
                        return Err(Error::fault(format!(
                            "NNL asymmetry: {} lists {j} but not vice versa",
                            region.owner
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Brute-force O(N^2) oracle: the set of particle neighbors `i` should
    /// have, by direct region-intersection tests.
    pub fn brute_force_neighbors(
        &self,
        store: &ParticleStore,
        domain: &Domain,
        species: &SpeciesTable,
        i: ParticleId,
    ) -> Vec<ParticleId> {
        let ri = self.region_of(store, i).expect("no region on oracle query");
        let mut out = Vec::new();
        for (j, pj) in store.iter() {
            if j == i {
                continue;
            }
            if !species.interacts(store.get(i).species, pj.species) {
                continue;
            }
            if let Some(rj) = self.region_of(store, j) {
                let d = domain.min_image(&rj.center, &ri.center);
                if norm(&d, domain.dim) < ri.radius + rj.radius {
                    out.push(j);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FaceSpec, Particle, SpeciesSpec};

    fn one_species(use_nnl: bool) -> SpeciesTable {
        SpeciesTable::new(
            vec![SpeciesSpec {
                name: "s".into(),
                diameter: 1.0,
                mass: 1.0,
                diffusion: 0.0,
                decay_rate: 0.0,
                decay_products: vec![],
                birth_rate: 0.0,
                use_nnl,
            }],
            vec![vec![true]],
            vec![],
        )
        .unwrap()
    }

    fn world(side: f64, cells: usize) -> (Domain, CellGrid, ParticleStore) {
        let domain = Domain::new(3, [side; 3], [FaceSpec::periodic(); 6]).unwrap();
        let grid = CellGrid::new(&domain, [cells; 3]).unwrap();
        (domain, grid, ParticleStore::new())
    }

    fn add(
        store: &mut ParticleStore,
        grid: &mut CellGrid,
        pos: Vector,
    ) -> ParticleId {
        let id = store.insert(Particle::new(0, pos, [0.0; 3]));
        grid.insert_particle(store, id);
        id
    }

    #[test]
    fn mu_must_exceed_one() {
        let sp = one_species(true);
        assert!(NnlRegistry::new(1.0, &sp).is_err());
        assert!(NnlRegistry::new(1.3, &sp).is_ok());
    }

    #[test]
    fn isolated_particle_has_empty_list() {
        let sp = one_species(true);
        let (domain, mut grid, mut store) = world(10.0, 5);
        let mut reg = NnlRegistry::new(1.3, &sp).unwrap();
        let i = add(&mut store, &mut grid, [5.0, 5.0, 5.0]);
        reg.build(&mut store, &grid, &domain, &sp, i).unwrap();
        assert!(reg.region_of(&store, i).unwrap().entries.is_empty());
    }

    #[test]
    fn intersection_threshold_from_mu() {
        // Unit spheres 1.5 apart: regions of radius mu/2 each intersect iff
        // 1.5 < mu. Direct sphere-intersection check as oracle.
        let sp = one_species(true);
        let (domain, mut grid, mut store) = world(10.0, 5);
        let a = add(&mut store, &mut grid, [4.0, 5.0, 5.0]);
        let b = add(&mut store, &mut grid, [5.5, 5.0, 5.0]);
        for (mu, expect) in [(1.4, false), (1.6, true)] {
            let mut reg = NnlRegistry::new(mu, &sp).unwrap();
            reg.build(&mut store, &grid, &domain, &sp, a).unwrap();
            reg.build(&mut store, &grid, &domain, &sp, b).unwrap();
            let has = reg
                .region_of(&store, a)
                .unwrap()
                .entries
                .iter()
                .any(|e| matches!(e.target, NnlTarget::Particle(p) if p == b));
            assert_eq!(has, expect, "mu = {mu}");
            reg.check_symmetry(&store).unwrap();
            reg.destroy(&mut store, a);
            reg.destroy(&mut store, b);
        }
    }

    #[test]
    fn build_matches_brute_force_oracle() {
        let sp = one_species(true);
        let (domain, mut grid, mut store) = world(8.0, 8);
        let mut reg = NnlRegistry::new(1.5, &sp).unwrap();
        let mut rng = crate::rng::SimRng::new(77);
        let mut ids = Vec::new();
        for _ in 0..120 {
            let pos = [
                rng.uniform() * 8.0,
                rng.uniform() * 8.0,
                rng.uniform() * 8.0,
            ];
            ids.push(add(&mut store, &mut grid, pos));
        }
        for &i in &ids {
            reg.build(&mut store, &grid, &domain, &sp, i).unwrap();
        }
        for &i in &ids {
            let mut got: Vec<ParticleId> = reg
                .region_of(&store, i)
                .unwrap()
                .entries
                .iter()
                .filter_map(|e| match e.target {
                    NnlTarget::Particle(p) => Some(p),
                    NnlTarget::Wall(_) => None,
                })
                .collect();
            got.sort_unstable();
            let want = reg.brute_force_neighbors(&store, &domain, &sp, i);
            assert_eq!(got, want, "particle {i}");
        }
        reg.check_symmetry(&store).unwrap();
    }

    #[test]
    fn ballistic_exit_time_exact_and_matches_bisection() {
        let region = NeighborhoodRegion {
            owner: 1,
            center: [0.0; 3],
            radius: 1.5,
            entries: vec![],
        };
        // reach = radius - D/2 = 1; straight run from center at speed 1.
        let t = region
            .ballistic_core_exit(&[0.0; 3], &[1.0, 0.0, 0.0], 1.0, 3)
            .unwrap();
        assert!((t - 1.0).abs() < 1e-14);
        // Stationary particle never exits.
        assert!(region
            .ballistic_core_exit(&[0.2, 0.0, 0.0], &[0.0; 3], 1.0, 3)
            .is_none());
        // Random cases against a bisection root of |w + v t| - reach.
        let mut rng = crate::rng::SimRng::new(4);
        for _ in 0..200 {
            let pos = [
                0.4 * (rng.uniform() - 0.5),
                0.4 * (rng.uniform() - 0.5),
                0.4 * (rng.uniform() - 0.5),
            ];
            let vel = [
                rng.uniform() * 2.0 - 1.0,
                rng.uniform() * 2.0 - 1.0,
                rng.uniform() * 2.0 - 1.0,
            ];
            if norm(&vel, 3) < 1e-3 {
                continue;
            }
            let t = region.ballistic_core_exit(&pos, &vel, 1.0, 3).unwrap();
            let dist = |tt: f64| {
                let w = [
                    pos[0] + vel[0] * tt,
                    pos[1] + vel[1] * tt,
                    pos[2] + vel[2] * tt,
                ];
                norm(&w, 3) - 1.0
            };
            let (mut lo, mut hi) = (0.0, t * 2.0 + 1.0);
            assert!(dist(lo) < 0.0 && dist(hi) > 0.0);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if dist(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            assert!((t - lo).abs() < 1e-9, "exit {t} vs bisection {lo}");
        }
    }

    #[test]
    fn destroy_removes_symmetric_entries_and_rebuild_is_deterministic() {
        let sp = one_species(true);
        let (domain, mut grid, mut store) = world(10.0, 5);
        let mut reg = NnlRegistry::new(1.8, &sp).unwrap();
        let a = add(&mut store, &mut grid, [5.0, 5.0, 5.0]);
        let b = add(&mut store, &mut grid, [5.6, 5.0, 5.0]);
        reg.build(&mut store, &grid, &domain, &sp, a).unwrap();
        reg.build(&mut store, &grid, &domain, &sp, b).unwrap();
        let before: Vec<NnlTarget> = reg
            .region_of(&store, a)
            .unwrap()
            .entries
            .iter()
            .map(|e| e.target)
            .collect();
        reg.destroy(&mut store, a);
        // b no longer lists a.
        assert!(reg
            .region_of(&store, b)
            .unwrap()
            .entries
            .iter()
            .all(|e| !matches!(e.target, NnlTarget::Particle(p) if p == a)));
        reg.build(&mut store, &grid, &domain, &sp, a).unwrap();
        let after: Vec<NnlTarget> = reg
            .region_of(&store, a)
            .unwrap()
            .entries
            .iter()
            .map(|e| e.target)
            .collect();
        assert_eq!(before, after);
        reg.check_symmetry(&store).unwrap();
    }

    #[test]
    fn random_build_destroy_keeps_symmetry() {
        let sp = one_species(true);
        let (domain, mut grid, mut store) = world(6.0, 6);
        let mut reg = NnlRegistry::new(1.5, &sp).unwrap();
        let mut rng = crate::rng::SimRng::new(13);
        let mut ids = Vec::new();
        for _ in 0..40 {
            let pos = [
                rng.uniform() * 6.0,
                rng.uniform() * 6.0,
                rng.uniform() * 6.0,
            ];
            ids.push(add(&mut store, &mut grid, pos));
        }
        for step in 0..2000 {
            let i = ids[rng.index(ids.len())];
            if store.get(i).neighborhood.is_some() {
                reg.destroy(&mut store, i);
            } else {
                reg.build(&mut store, &grid, &domain, &sp, i).unwrap();
            }
            if step % 100 == 0 {
                reg.check_symmetry(&store).unwrap();
            }
        }
        reg.check_symmetry(&store).unwrap();
    }

    #[test]
    fn wall_within_reach_is_listed() {
        let sp = one_species(true);
        let faces = [
            FaceSpec {
                kind: crate::model::BoundaryKind::Wall,
                temperature: None,
            },
            FaceSpec {
                kind: crate::model::BoundaryKind::Wall,
                temperature: None,
            },
            FaceSpec::periodic(),
            FaceSpec::periodic(),
            FaceSpec::periodic(),
            FaceSpec::periodic(),
        ];
        let domain = Domain::new(3, [10.0; 3], faces).unwrap();
        let mut grid = CellGrid::new(&domain, [5; 3]).unwrap();
        let mut store = ParticleStore::new();
        let mut reg = NnlRegistry::new(1.6, &sp).unwrap();
        let i = add(&mut store, &mut grid, [0.6, 5.0, 5.0]);
        reg.build(&mut store, &grid, &domain, &sp, i).unwrap();
        let has_wall = reg
            .region_of(&store, i)
            .unwrap()
            .entries
            .iter()
            .any(|e| matches!(e.target, NnlTarget::Wall(0)));
        assert!(has_wall, "wall face 0 is 0.6 away, radius 0.8");
    }
}
