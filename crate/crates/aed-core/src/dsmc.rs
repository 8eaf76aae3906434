//! Stochastic collisions (event-driven DSMC), the SEDMD hybrid pieces
//! (event-driven/time-driven cell classification, time-step propagation),
//! and open-boundary reservoir insertion.
//!
//! DSMC particles belong to one species `delta` with I_dd = false: they
//! interpenetrate freely but collide deterministically with every other
//! species. Stochastic collisions among them arrive either as a global
//! Poisson event (event-driven cells) selected by cell rejection, or in
//! per-cell batches at time-step events (time-driven cells).

use crate::model::{BoundaryKind, Domain, Mode, Particle, ParticleId, ParticleStore, SpeciesId};
use crate::rng::SimRng;
use crate::spatial::{CellGrid, MASK_SPECIES};
use crate::vecmath::{norm, Vector};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct ReservoirParams {
    /// Number density of the implicit surrounding fluid.
    pub density: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug)]
pub struct DsmcParams {
    /// The DSMC species delta.
    pub species: SpeciesId,
    /// Rejection bound on pair relative speed; raised (and counted) on
    /// violation so acceptance stays rigorous.
    pub v_rel_max: f64,
    /// Per-pair collision attempt rate at v_rel_max = 1 (sigma / 2 V_cell
    /// from hard-sphere kinetic theory, or a fitted override divided by the
    /// initial bound). The live prefactor is `rate_per_pair_speed * v_rel_max`.
    pub rate_per_pair_speed: f64,
    /// Time step for time-driven cells.
    pub dt: f64,
    /// Hybrid ED/TD handling on, or pure event-driven DSMC.
    pub time_driven: bool,
    pub reservoir: Option<ReservoirParams>,
    /// Body force velocity kick per unit time, applied at time-step events.
    pub body_accel: Vector,
}

impl DsmcParams {
    /// Hard-sphere kinetic-theory prefactor: attempts per pair per unit time
    /// = sigma_cs * v_rel_max / (2 V_cell), with cross-section pi D^2 in 3D
    /// and 2 D in 2D.
    pub fn kinetic_theory_rate(dim: usize, diameter: f64, cell_volume: f64) -> f64 {
        let sigma = match dim {
            2 => 2.0 * diameter,
            _ => std::f64::consts::PI * diameter * diameter,
        };
        sigma / (2.0 * cell_volume)
    }

    #[inline]
    pub fn lambda0(&self) -> f64 {
        self.rate_per_pair_speed * self.v_rel_max
    }
}

/// Mutable DSMC bookkeeping carried by the driver.
#[derive(Clone, Debug)]
pub struct DsmcState {
    pub params: DsmcParams,
    /// Cells eligible for event-driven stochastic collisions.
    pub ed_cells: Vec<usize>,
    /// Running maximum delta-occupancy over eligible cells.
    pub n_max: u32,
    pub speed_violations: u64,
    pub occupancy_violations: u64,
    pub collisions: u64,
    pub selections: u64,
}

impl DsmcState {
    pub fn new(params: DsmcParams) -> Self {
        DsmcState {
            params,
            ed_cells: Vec::new(),
            n_max: 0,
            speed_violations: 0,
            occupancy_violations: 0,
            collisions: 0,
            selections: 0,
        }
    }

    /// Global stochastic-collision attempt rate: the per-cell rate is capped
    /// by the maximal occupancy, so attempts arrive at
    /// `n_cells * lambda0 * N_max (N_max - 1)` and cell rejection thins them.
    pub fn attempt_rate(&self) -> f64 {
        if self.n_max < 2 || self.ed_cells.is_empty() {
            return 0.0;
        }
        self.ed_cells.len() as f64
            * self.params.lambda0()
            * (self.n_max as f64)
            * (self.n_max as f64 - 1.0)
    }

    /// Recompute N_max exactly (synchronization points).
    pub fn refresh_n_max(&mut self, grid: &CellGrid, store: &ParticleStore) {
        let delta = self.params.species;
        self.n_max = self
            .ed_cells
            .iter()
            .map(|&c| grid.species_count_in_cell(store, c, delta))
            .max()
            .unwrap_or(0);
    }
}

/// Next stochastic-collision time ahead of `now`: exponential increment of
/// the given rate (no event for a non-positive rate).
pub fn next_stochastic_collision_time(rng: &mut SimRng, now: f64, rate: f64) -> Option<f64> {
    if rate <= 0.0 {
        return None;
    }
    Some(now + rng.exp_time(rate))
}

/// Uniformly pick a candidate cell and accept it with probability
/// N_L (N_L - 1) / [N_max (N_max - 1)]; a rejection processes no collision.
pub fn select_cell_rejection(
    state: &mut DsmcState,
    grid: &CellGrid,
    store: &ParticleStore,
    rng: &mut SimRng,
) -> Option<usize> {
    if state.ed_cells.is_empty() || state.n_max < 2 {
        return None;
    }
    state.selections += 1;
    let cell = state.ed_cells[rng.index(state.ed_cells.len())];
    let n = grid.species_count_in_cell(store, cell, state.params.species);
    if n > state.n_max {
        // The bound went stale between refreshes; accept and raise it.
        state.occupancy_violations += 1;
        state.n_max = n;
        return Some(cell);
    }
    let bound = state.n_max as f64 * (state.n_max as f64 - 1.0);
    let weight = n as f64 * (n as f64 - 1.0);
    if rng.uniform() * bound < weight {
        Some(cell)
    } else {
        None
    }
}

/// Uniform random distinct DSMC pair from the cell, accepted with
/// probability |v_ij| / v_rel_max. Violations of the bound are counted,
/// accepted, and raise the bound for subsequent attempts.
pub fn select_pair_rejection(
    state: &mut DsmcState,
    grid: &CellGrid,
    store: &ParticleStore,
    cell: usize,
    rng: &mut SimRng,
) -> Option<(ParticleId, ParticleId)> {
    let delta = state.params.species;
    let mut members: Vec<ParticleId> = Vec::new();
    grid.for_each_in_cell(store, cell, |id| {
        if store.get(id).species == delta {
            members.push(id);
        }
    });
    if members.len() < 2 {
        return None;
    }
    let a = rng.index(members.len());
    let mut b = rng.index(members.len() - 1);
    if b >= a {
        b += 1;
    }
    let (i, j) = (members[a], members[b]);
    let mut vrel = [0.0; 3];
    for k in 0..3 {
        vrel[k] = store.get(i).vel[k] - store.get(j).vel[k];
    }
    let speed = norm(&vrel, 3);
    if speed > state.params.v_rel_max {
        state.speed_violations += 1;
        state.params.v_rel_max = speed;
        return Some((i, j));
    }
    if rng.uniform() * state.params.v_rel_max < speed {
        Some((i, j))
    } else {
        None
    }
}

/// Hard-sphere stochastic scattering: the relative speed is preserved, its
/// direction resampled uniformly (sphere in 3D, circle in 2D), and the
/// center-of-mass velocity untouched — momentum exact, energy to rounding.
pub fn process_stochastic_collision(
    store: &mut ParticleStore,
    dim: usize,
    i: ParticleId,
    j: ParticleId,
    mi: f64,
    mj: f64,
    rng: &mut SimRng,
) -> Result<()> {
    if i == j {
        return Err(Error::fault("stochastic self-collision"));
    }
    let (vi, vj) = (store.get(i).vel, store.get(j).vel);
    let m = mi + mj;
    let mut vcm = [0.0; 3];
    let mut vrel = [0.0; 3];
    for k in 0..dim {
        vcm[k] = (mi * vi[k] + mj * vj[k]) / m;
        vrel[k] = vi[k] - vj[k];
    }
    let speed = norm(&vrel, dim);
    let dir = rng.unit_vector(dim);
    {
        let p = store.get_mut(i);
        for k in 0..dim {
            p.vel[k] = vcm[k] + mj / m * speed * dir[k];
        }
    }
    {
        let p = store.get_mut(j);
        for k in 0..dim {
            p.vel[k] = vcm[k] - mi / m * speed * dir[k];
        }
    }
    Ok(())
}

/// Mark every cell whose 3^d neighborhood contains a non-DSMC particle as
/// event-driven, clear the flag elsewhere, and return the ED cell list.
/// Assumes the species bits were just refreshed. With hybrid handling off,
/// every cell is event-driven.
pub fn classify_cells_ed_td(
    grid: &mut CellGrid,
    domain: &Domain,
    delta: SpeciesId,
    time_driven: bool,
) -> Vec<usize> {
    let non_delta = MASK_SPECIES & !(1u64 << delta);
    let mut ed = Vec::new();
    let flags: Vec<bool> = (0..grid.cell_count())
        .map(|cell| {
            if grid.is_purely_external(cell) {
                return false;
            }
            if !time_driven {
                return true;
            }
            let mut near_solute = false;
            grid.for_each_neighbor(domain, cell, |c| {
                if grid.mask(c) & non_delta != 0 {
                    near_solute = true;
                }
            });
            near_solute
        })
        .collect();
    for (cell, &is_ed) in flags.iter().enumerate() {
        grid.set_event_driven(cell, is_ed);
        if is_ed && !grid.is_purely_external(cell) {
            ed.push(cell);
        }
    }
    ed
}

/// Integer part plus a Bernoulli draw on the remainder.
pub fn sample_count(rng: &mut SimRng, expected: f64) -> u64 {
    let base = expected.floor();
    let frac = expected - base;
    base as u64 + (rng.uniform() < frac) as u64
}

/// Advance one time-driven particle ballistically by `dt`, bouncing off
/// hard walls (specular, or thermal resampling on thermal walls). Positions
/// are wrapped on periodic axes. Returns false if the particle left the
/// domain through an open face and should be removed.
pub fn td_propagate_particle(
    domain: &Domain,
    p: &mut Particle,
    radius: f64,
    mass: f64,
    dt: f64,
    rng: &mut SimRng,
) -> bool {
    let mut rem = dt;
    for _ in 0..64 {
        // Earliest wall contact within the remaining step.
        let mut t_hit = rem;
        let mut hit: Option<usize> = None;
        for axis in 0..domain.dim {
            if p.vel[axis] == 0.0 {
                continue;
            }
            let hi = p.vel[axis] > 0.0;
            let face = 2 * axis + hi as usize;
            if domain.face(face).kind != BoundaryKind::Wall {
                continue;
            }
            let plane = if hi {
                domain.lengths[axis] - radius
            } else {
                radius
            };
            let t = ((plane - p.pos[axis]) / p.vel[axis]).max(0.0);
            if t < t_hit {
                t_hit = t;
                hit = Some(face);
            }
        }
        for k in 0..domain.dim {
            p.pos[k] += p.vel[k] * t_hit;
        }
        rem -= t_hit;
        match hit {
            None => break,
            Some(face) => {
                let axis = face / 2;
                match domain.face(face).temperature {
                    Some(t_wall) => {
                        p.vel = crate::edmd::thermal_wall_velocity(
                            rng, domain.dim, face, t_wall, mass,
                        );
                    }
                    None => p.vel[axis] = -p.vel[axis],
                }
            }
        }
    }
    p.time += dt;
    domain.wrap(&mut p.pos);
    // Open faces: out of the box means out of the simulation.
    for axis in 0..domain.dim {
        if !domain.periodic(axis)
            && (p.pos[axis] < 0.0 || p.pos[axis] >= domain.lengths[axis])
        {
            return false;
        }
    }
    true
}

/// Insert grand-canonical reservoir particles: per external-and-boundary
/// (ghost) cell, Poisson(n V_cell) trial particles with uniform positions
/// and Maxwell-Boltzmann velocities, thought to be at `t - dt` and advanced
/// by dt; only trials landing in a non-external cell become real particles.
/// Returns the accepted count.
#[allow(clippy::too_many_arguments)]
pub fn insert_reservoir_particles(
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    domain: &Domain,
    params: &DsmcParams,
    reservoir: &ReservoirParams,
    mass: f64,
    now: f64,
    rng: &mut SimRng,
) -> u32 {
    let mean = reservoir.density * grid.cell_volume();
    let sigma = (reservoir.temperature / mass).sqrt();
    let mut accepted = 0;
    for cell in 0..grid.cell_count() {
        if !(grid.is_external(cell) && grid.is_boundary(cell)) {
            continue;
        }
        let coords = grid.coords(cell);
        let trials = rng.poisson(mean);
        for _ in 0..trials {
            let mut pos = [0.0; 3];
            let mut vel = [0.0; 3];
            for k in 0..domain.dim {
                pos[k] = (coords[k] as f64 + rng.uniform()) * grid.cell_size[k];
                vel[k] = sigma * rng.normal();
            }
            // Propagate the trial across the step.
            for k in 0..domain.dim {
                pos[k] += vel[k] * params.dt;
            }
            domain.wrap(&mut pos);
            let inside = (0..domain.dim).all(|k| {
                domain.periodic(k) || (pos[k] >= 0.0 && pos[k] < domain.lengths[k])
            });
            if !inside {
                continue;
            }
            let target = grid.locate_cell(&pos);
            if grid.is_external(target) {
                continue;
            }
            let mut p = Particle::new(params.species, pos, vel);
            p.time = now;
            p.mode = Mode::TimeDriven;
            let id = store.insert(p);
            grid.insert_particle(store, id);
            accepted += 1;
        }
    }
    accepted
}

/// Expected attempt count for one TD cell over one step.
pub fn cell_step_attempts(lambda0: f64, n_delta: u32, dt: f64) -> f64 {
    lambda0 * n_delta as f64 * (n_delta as f64 - 1.0) * dt
}
