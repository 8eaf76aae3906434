//! First-passage kinetic Monte Carlo backend: disjoint protective regions,
//! exactly sampled single-particle propagators, pair protections with a
//! hopping difference walker, and reaction/birth processing.
//!
//! Protective shapes are cubes: every propagator factorizes into the 1D
//! interval solutions in [`interval`]. Spheres are protected by bounding
//! cubes. Domains are fully periodic (reflecting-wall propagators are out
//! of scope), which config validation enforces.

pub mod cluster;
pub mod interval;
pub mod pair;

use crate::events::{EventQueue, EventRecord, Partner, Q_DECAY, Q_NEW_GEOMETRY, Q_PROTECTION, Q_REPREDICT};
use crate::model::{
    Domain, Mode, Particle, ParticleId, ParticleStore, ReactionKind, SpeciesId, SpeciesTable,
};
use crate::rng::SimRng;
use crate::spatial::CellGrid;
use crate::vecmath::{norm, sub, Vector};
use crate::{Error, Result};

use interval::{sample_cube_exit, sample_cube_exit_position, sample_cube_no_passage, CubeExit};
use pair::{sample_pair_prediction, PairGeometry, PairProtection, PairScheduled};

// Qualifiers on Partner::Pair specific to this backend.
pub const Q_PAIR_FP: i32 = 10;
/// Reactants found already in contact (newborn overlap, engagement overlap):
/// the reaction fires immediately when the record pops.
pub const Q_CONTACT: i32 = 11;

#[derive(Clone, Debug)]
pub struct FpkmcParams {
    /// Minimum comfortable protection scale: a fresh single must reach a
    /// half-width of mu_p * D_i / 2 or the blocking neighbor is engaged.
    pub mu_p: f64,
    /// Size cap: half-width at most mu_p_max * D_i / 2.
    pub mu_p_max: f64,
    /// Pair-protect when the mutual gap is below theta_pair * D_ij.
    pub theta_pair: f64,
    /// Difference-walker hop length as a fraction of D_ij.
    pub h_hop_frac: f64,
    /// Time-driven hop scale as a fraction of the species diameter.
    pub cluster_step_frac: f64,
}

impl Default for FpkmcParams {
    fn default() -> Self {
        FpkmcParams {
            mu_p: 1.5,
            mu_p_max: 5.0,
            theta_pair: 0.1,
            h_hop_frac: 0.05,
            cluster_step_frac: 0.1,
        }
    }
}

/// Single-particle protective cube.
#[derive(Clone, Debug)]
pub struct ProtectiveRegion {
    pub owner: ParticleId,
    pub center: Vector,
    /// Cube half-width; the centroid wanders in half - radius per axis.
    pub half: f64,
    pub created_at: f64,
    /// The sampled first-passage exit, when the exit is the scheduled event.
    pub scheduled_exit: Option<CubeExit>,
}

#[derive(Clone, Debug)]
pub enum Protection {
    Single(ProtectiveRegion),
    Pair(PairProtection),
}

#[derive(Clone, Debug, Default)]
pub struct FpkmcState {
    pub params: FpkmcParams,
    arena: Vec<Option<Protection>>,
    free: Vec<u32>,
    /// Members of the synchronous time-driven cluster (dense crowding
    /// fallback); empty in dilute runs.
    pub td_members: Vec<ParticleId>,
    pub cluster_time: f64,
    /// Running bound on any protection box half-width, setting the
    /// constraint-scan reach. Reset at synchronization points.
    max_box_half: f64,
    pub births: u64,
    pub deaths: u64,
    pub reactions: u64,
}

impl FpkmcState {
    pub fn new(params: FpkmcParams) -> Self {
        FpkmcState {
            params,
            ..Default::default()
        }
    }

    pub fn get(&self, handle: u32) -> &Protection {
        self.arena[handle as usize].as_ref().expect("stale protection handle")
    }

    fn alloc(&mut self, p: Protection) -> u32 {
        let half = match &p {
            Protection::Single(s) => s.half,
            Protection::Pair(pp) => pp.envelope_i.max(pp.envelope_j),
        };
        self.max_box_half = self.max_box_half.max(half);
        if let Some(h) = self.free.pop() {
            self.arena[h as usize] = Some(p);
            h
        } else {
            self.arena.push(Some(p));
            (self.arena.len() - 1) as u32
        }
    }

    fn release(&mut self, handle: u32) -> Protection {
        let p = self.arena[handle as usize].take().expect("stale protection handle");
        self.free.push(handle);
        p
    }

    /// Recompute the box-size bound from live protections (sync points).
    pub fn refresh_scan_bound(&mut self) {
        self.max_box_half = self
            .arena
            .iter()
            .flatten()
            .map(|p| match p {
                Protection::Single(s) => s.half,
                Protection::Pair(pp) => pp.envelope_i.max(pp.envelope_j),
            })
            .fold(0.0, f64::max);
    }

    /// The protection box (center, half-width) shielding one particle.
    pub fn box_of(&self, store: &ParticleStore, id: ParticleId) -> Option<(Vector, f64)> {
        let p = store.get(id);
        match p.protection {
            None => None,
            Some(h) => Some(match self.get(h) {
                Protection::Single(s) => (s.center, s.half),
                Protection::Pair(pp) => {
                    if pp.members.0 == id {
                        (pp.origin_i, pp.envelope_i)
                    } else {
                        (pp.origin_j, pp.envelope_j)
                    }
                }
            }),
        }
    }

    /// Full O(N^2) disjointness sweep: boxes of distinct protections must
    /// not overlap (members of one pair protection are exempt against each
    /// other). Debug-build invariant.
    pub fn check_disjoint(&self, store: &ParticleStore, domain: &Domain) -> Result<()> {
        let protected: Vec<(ParticleId, u32, Vector, f64)> = store
            .iter()
            .filter_map(|(id, p)| {
                p.protection.map(|h| {
                    let (c, half) = self.box_of(store, id).unwrap();
                    (id, h, c, half)
                })
            })
            .collect();
        for (n, &(ia, ha, ca, wa)) in protected.iter().enumerate() {
            for &(ib, hb, cb, wb) in protected.iter().skip(n + 1) {
                if ha == hb {
                    continue; // same protection (pair members)
                }
                let d = domain.min_image(&ca, &cb);
                let overlap = (0..domain.dim).all(|k| d[k].abs() < wa + wb - 1e-12);
                if overlap {
                    return Err(Error::fault(format!(
                        "protections of particles {ia} and {ib} overlap"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn count_boxes(&self) -> usize {
        self.arena.iter().flatten().count()
    }
}

/// Largest cube half-width available to `i` at `pos` before hitting another
/// protection box (separating-axis test per neighbor, minimized over
/// neighbors), together with the tightest blocker.
///
/// Unprotected neighbors (time-driven cluster members, transient states)
/// constrain with their core radius.
pub fn protection_allowance(
    st: &FpkmcState,
    store: &ParticleStore,
    grid: &CellGrid,
    domain: &Domain,
    species: &SpeciesTable,
    i: ParticleId,
    pos: &Vector,
    exclude: &[ParticleId],
) -> (f64, Option<ParticleId>) {
    let h_cap_i = 0.5 * st.params.mu_p_max * species.spec(store.get(i).species).diameter;
    let reach = h_cap_i + st.max_box_half.max(0.5 * species.max_reach());
    let min_cell = (0..domain.dim)
        .map(|k| grid.cell_size[k])
        .fold(f64::INFINITY, f64::min);
    let k = ((reach / min_cell).ceil() as usize).max(1);
    let mut best = f64::INFINITY;
    let mut blocker = None;
    let cell = grid.locate_cell(pos);
    grid.for_each_within(domain, cell, k, &mut |c| {
        grid.for_each_in_cell(store, c, |j| {
            if j == i || exclude.contains(&j) {
                return;
            }
            let pj = store.get(j);
            let (center, half) = st
                .box_of(store, j)
                .unwrap_or((pj.pos, 0.5 * species.spec(pj.species).diameter));
            let d = domain.min_image(&center, pos);
            let mut allow: f64 = f64::NEG_INFINITY;
            for ax in 0..domain.dim {
                allow = allow.max(d[ax].abs() - half);
            }
            if allow < best {
                best = allow;
                blocker = Some(j);
            }
        });
    });
    (best, blocker)
}

fn radius_of(species: &SpeciesTable, store: &ParticleStore, i: ParticleId) -> f64 {
    0.5 * species.spec(store.get(i).species).diameter
}

/// Quarter of the smallest periodic box length: two boxes at this half
/// width can never straddle their own images.
fn periodic_cap(domain: &Domain) -> f64 {
    (0..domain.dim)
        .map(|k| domain.lengths[k])
        .fold(f64::INFINITY, f64::min)
        * 0.25
}

/// Build a single protective cube and schedule its first-passage/decay
/// prediction. `half` must already respect all constraints.
#[allow(clippy::too_many_arguments)]
fn install_single(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    species: &SpeciesTable,
    queue: &mut EventQueue,
    rng: &mut SimRng,
    now: f64,
    i: ParticleId,
    half: f64,
    dim: usize,
) -> Result<()> {
    let spec = species.spec(store.get(i).species);
    let radius = 0.5 * spec.diameter;
    let wander = half - radius;
    debug_assert!(wander > 0.0, "protection smaller than the core");
    let center = store.get(i).pos;
    let mut exit = None;
    let mut record;
    if spec.diffusion > 0.0 {
        let cube_exit = sample_cube_exit(rng, dim, &[wander; 3], spec.diffusion);
        record = EventRecord::new(now + cube_exit.elapsed, Partner::Boundary, Q_PROTECTION);
        exit = Some(cube_exit);
    } else {
        // Immobile species: nothing ever leaves the region.
        record = EventRecord::new(f64::INFINITY, Partner::Boundary, Q_PROTECTION);
    }
    if spec.decay_rate > 0.0 {
        let t_decay = now + rng.exp_time(spec.decay_rate);
        if t_decay < record.time {
            record = EventRecord::new(t_decay, Partner::SelfEvent, Q_DECAY);
            exit = None;
        }
    }
    let handle = st.alloc(Protection::Single(ProtectiveRegion {
        owner: i,
        center,
        half,
        created_at: now,
        scheduled_exit: exit,
    }));
    let p = store.get_mut(i);
    p.protection = Some(handle);
    p.event = record;
    queue.schedule(i, record.time)?;
    Ok(())
}

/// Propagate a single-protected particle to `to` with the no-passage
/// propagator and drop its (now stale) protection. The caller rebuilds.
pub fn single_no_passage_advance(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    domain: &Domain,
    species: &SpeciesTable,
    rng: &mut SimRng,
    i: ParticleId,
    to: f64,
) -> Result<()> {
    let handle = store.get(i).protection.ok_or_else(|| {
        Error::fault(format!("no-passage advance of unprotected particle {i}"))
    })?;
    let (wander, diffusion, created) = match st.get(handle) {
        Protection::Single(s) => (
            s.half - radius_of(species, store, i),
            species.spec(store.get(i).species).diffusion,
            s.created_at,
        ),
        Protection::Pair(_) => {
            return Err(Error::fault("single advance called on a pair member"))
        }
    };
    let elapsed = to - created;
    if elapsed < -1e-12 {
        return Err(Error::Causality {
            event: to,
            clock: created,
        });
    }
    if diffusion > 0.0 && elapsed > 0.0 {
        let d = sample_cube_no_passage(rng, domain.dim, &[wander; 3], diffusion, elapsed);
        let p = store.get_mut(i);
        for k in 0..domain.dim {
            p.pos[k] += d[k];
        }
    }
    {
        let p = store.get_mut(i);
        p.time = to;
        domain.wrap(&mut p.pos);
        p.protection = None;
    }
    st.release(handle);
    grid.relocate(store, i);
    Ok(())
}

/// Place a single-protected particle on its sampled exit surface at the
/// scheduled first-passage time, then drop the protection.
pub fn single_exit_advance(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    domain: &Domain,
    species: &SpeciesTable,
    rng: &mut SimRng,
    i: ParticleId,
) -> Result<()> {
    let handle = store.get(i).protection.ok_or_else(|| {
        Error::fault(format!("exit advance of unprotected particle {i}"))
    })?;
    let (center, wander, exit, created) = match st.get(handle) {
        Protection::Single(s) => {
            let exit = s.scheduled_exit.ok_or_else(|| {
                Error::fault(format!("particle {i} exit event without a sampled exit"))
            })?;
            (
                s.center,
                s.half - radius_of(species, store, i),
                exit,
                s.created_at,
            )
        }
        Protection::Pair(_) => return Err(Error::fault("exit advance on a pair member")),
    };
    let diffusion = species.spec(store.get(i).species).diffusion;
    let d = sample_cube_exit_position(rng, domain.dim, &[wander; 3], diffusion, &exit);
    {
        let p = store.get_mut(i);
        for k in 0..domain.dim {
            p.pos[k] = center[k] + d[k];
        }
        p.time = created + exit.elapsed;
        domain.wrap(&mut p.pos);
        p.protection = None;
    }
    st.release(handle);
    grid.relocate(store, i);
    Ok(())
}

/// Propagate both members of a pair protection to `to` (before the
/// scheduled pair event) by replaying the saved hop trajectory, then
/// destroy the protection. Restoring the generator to the saved state and
/// replaying the prefix returns the unrealized suffix draws to the stream.
#[allow(clippy::too_many_arguments)]
pub fn pair_propagate_to(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    domain: &Domain,
    rng: &mut SimRng,
    handle: u32,
    to: f64,
) -> Result<(ParticleId, ParticleId)> {
    let pair = match st.release(handle) {
        Protection::Pair(p) => p,
        Protection::Single(_) => return Err(Error::fault("pair propagate on a single")),
    };
    let elapsed = (to - pair.created_at).max(0.0);
    debug_assert!(
        to <= pair.event_time + 1e-12,
        "pair propagated past its event"
    );
    let partial = pair.replay_to(rng, elapsed)?;
    let dcm = sample_cube_no_passage(rng, domain.dim, &[pair.cm_half; 3], pair.cm_d, elapsed);
    let dw = sub(&partial.w_end, &pair.geometry.w0);
    let (di, dj) = pair.member_displacements(&dw, &dcm);
    let (i, j) = pair.members;
    for (id, origin, d) in [(i, pair.origin_i, di), (j, pair.origin_j, dj)] {
        let p = store.get_mut(id);
        for k in 0..domain.dim {
            p.pos[k] = origin[k] + d[k];
        }
        p.time = to;
        domain.wrap(&mut p.pos);
        p.protection = None;
        grid.relocate(store, id);
    }
    Ok((i, j))
}

/// Synchronization advance: no-passage-propagate a protected particle (and
/// its pair partner, when paired) to `to`, destroying the protection.
#[allow(clippy::too_many_arguments)]
pub fn single_or_pair_advance(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    domain: &Domain,
    species: &SpeciesTable,
    rng: &mut SimRng,
    i: ParticleId,
    to: f64,
) -> Result<()> {
    let Some(handle) = store.get(i).protection else {
        return Ok(());
    };
    match st.get(handle) {
        Protection::Single(_) => {
            single_no_passage_advance(st, store, grid, domain, species, rng, i, to)
        }
        Protection::Pair(_) => {
            pair_propagate_to(st, store, grid, domain, rng, handle, to).map(|_| ())
        }
    }
}

/// Result of processing the scheduled pair event.
pub enum PairEvent {
    /// Members touched: the reaction between them fires now.
    Contact(ParticleId, ParticleId),
    /// Pair separated (difference shell or CM cube): rebuild protections.
    Separated(ParticleId, ParticleId),
    /// A member decays before anything else.
    Decay {
        decaying: ParticleId,
        partner: ParticleId,
    },
}

/// Advance a pair to its scheduled event time, position both members, and
/// report what happened. The protection is destroyed either way.
pub fn pair_process_event(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    domain: &Domain,
    rng: &mut SimRng,
    handle: u32,
) -> Result<PairEvent> {
    let pair = match st.release(handle) {
        Protection::Pair(p) => p,
        Protection::Single(_) => return Err(Error::fault("pair event on a single")),
    };
    let (i, j) = pair.members;
    let event = match pair.scheduled {
        PairScheduled::Outcome => {
            let elapsed = pair.outcome.elapsed;
            let dcm = match pair.outcome.kind {
                pair::PairEventKind::CmExit => sample_cube_exit_position(
                    rng,
                    domain.dim,
                    &[pair.cm_half; 3],
                    pair.cm_d,
                    &pair.cm_exit,
                ),
                _ => sample_cube_no_passage(
                    rng,
                    domain.dim,
                    &[pair.cm_half; 3],
                    pair.cm_d,
                    elapsed,
                ),
            };
            let dw = sub(&pair.outcome.w_end, &pair.geometry.w0);
            let (di, dj) = pair.member_displacements(&dw, &dcm);
            for (id, origin, d) in [(i, pair.origin_i, di), (j, pair.origin_j, dj)] {
                let p = store.get_mut(id);
                for k in 0..domain.dim {
                    p.pos[k] = origin[k] + d[k];
                }
                p.time = pair.event_time;
                domain.wrap(&mut p.pos);
                p.protection = None;
                grid.relocate(store, id);
            }
            match pair.outcome.kind {
                pair::PairEventKind::Collision => PairEvent::Contact(i, j),
                _ => PairEvent::Separated(i, j),
            }
        }
        PairScheduled::DecayFirst(decaying) => {
            let elapsed = pair.event_time - pair.created_at;
            // Replay the hop prefix to the decay time; the CM is sampled
            // no-passage from the post-replay stream.
            let partial = pair.replay_to(rng, elapsed)?;
            let dcm =
                sample_cube_no_passage(rng, domain.dim, &[pair.cm_half; 3], pair.cm_d, elapsed);
            let dw = sub(&partial.w_end, &pair.geometry.w0);
            let (di, dj) = pair.member_displacements(&dw, &dcm);
            for (id, origin, d) in [(i, pair.origin_i, di), (j, pair.origin_j, dj)] {
                let p = store.get_mut(id);
                for k in 0..domain.dim {
                    p.pos[k] = origin[k] + d[k];
                }
                p.time = pair.event_time;
                domain.wrap(&mut p.pos);
                p.protection = None;
                grid.relocate(store, id);
            }
            PairEvent::Decay {
                decaying,
                partner: pair.other(decaying),
            }
        }
    };
    Ok(event)
}

/// Outcome of (re)protecting a particle.
pub enum ProtectOutcome {
    /// Scheduled (single or pair records installed, queue updated).
    Scheduled,
    /// The particle found a reactive partner already in contact; both carry
    /// immediate contact records.
    ContactPending(ParticleId, ParticleId),
    /// Too crowded even for a pair: converted to time-driven members.
    TimeDriven(Vec<ParticleId>),
}

/// The protection-rebuild step: protect `i` with the largest cube that fits
/// (capped), engaging the nearest blocking neighbor when the fit is too
/// tight — destroying that neighbor's protection and building either a pair
/// protection or shrunk singles depending on the local geometry.
///
/// `i` must be unprotected, dequeued, and advanced to `now`.
#[allow(clippy::too_many_arguments)]
pub fn ensure_protected(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    domain: &Domain,
    species: &SpeciesTable,
    queue: &mut EventQueue,
    rng: &mut SimRng,
    now: f64,
    i: ParticleId,
) -> Result<ProtectOutcome> {
    debug_assert!(store.get(i).protection.is_none());
    debug_assert!(!queue.contains(i));
    let dim = domain.dim;
    let pos_i = store.get(i).pos;
    let spec_i = species.spec(store.get(i).species).clone();
    let radius_i = 0.5 * spec_i.diameter;
    let h_cap = (0.5 * st.params.mu_p_max * spec_i.diameter).min(periodic_cap(domain));

    let (allow, blocker) = protection_allowance(st, store, grid, domain, species, i, &pos_i, &[]);
    let half = allow.min(h_cap) * (1.0 - 1e-12);
    let comfortable = 0.5 * st.params.mu_p * spec_i.diameter;
    if half >= comfortable.min(h_cap * 0.999) || blocker.is_none() {
        if half <= radius_i {
            // No blocker to engage and still no room: crowded by the cap
            // geometry itself; fall through to the time-driven path.
            return convert_to_time_driven(st, store, queue, now, vec![i]);
        }
        install_single(st, store, species, queue, rng, now, i, half, dim)?;
        return Ok(ProtectOutcome::Scheduled);
    }

    // Engage the blocking neighbor.
    let j = blocker.unwrap();
    if store.get(j).mode == Mode::TimeDriven {
        // Crowded by the synchronous cluster: join it.
        return convert_to_time_driven(st, store, queue, now, vec![i]);
    }
    match store.get(j).protection {
        None => {
            // Transient unprotected neighbor (its own rebuild is pending in
            // the queue at this same time). Take what room there is; if the
            // core cannot even be covered, go time-driven.
            if half > radius_i {
                install_single(st, store, species, queue, rng, now, i, half, dim)?;
                return Ok(ProtectOutcome::Scheduled);
            }
            return convert_to_time_driven(st, store, queue, now, vec![i]);
        }
        Some(handle) => {
            let is_pair = matches!(st.get(handle), Protection::Pair(_));
            if is_pair {
                // Third-party handling: propagate the pair to now, destroy
                // it, and reset the far member's prediction to (t, 0, 0).
                let (a, b) = pair_propagate_to(st, store, grid, domain, rng, handle, now)?;
                let third = if a == j { b } else { a };
                if queue.contains(j) {
                    queue.cancel(j)?;
                }
                if queue.contains(third) {
                    queue.cancel(third)?;
                }
                store.get_mut(third).event = EventRecord::update_at(now, Q_REPREDICT);
                queue.schedule(third, now)?;
            } else {
                single_no_passage_advance(st, store, grid, domain, species, rng, j, now)?;
                if queue.contains(j) {
                    queue.cancel(j)?;
                }
            }
        }
    }

    // Both i and j are now unprotected at `now`.
    let pos_j = store.get(j).pos;
    let s_j = store.get(j).species;
    let radius_j = 0.5 * species.spec(s_j).diameter;
    let cutoff = species.cutoff(store.get(i).species, s_j);
    let w0 = domain.min_image(&pos_i, &pos_j);
    let d0 = norm(&w0, dim);
    if cutoff > 0.0 && d0 <= cutoff * (1.0 + 1e-12) {
        // Already in contact: dispatch the reaction as an immediate event.
        let rec = |other| EventRecord::new(now, Partner::Pair(other), Q_CONTACT);
        store.get_mut(i).event = rec(j);
        store.get_mut(j).event = rec(i);
        queue.schedule(i, now)?;
        queue.schedule(j, now)?;
        return Ok(ProtectOutcome::ContactPending(i, j));
    }

    let contact = if cutoff > 0.0 { cutoff } else { radius_i + radius_j };
    let gap = d0 - contact;
    let max_axis = (0..dim).map(|k| w0[k].abs()).fold(0.0, f64::max);
    let room_axis = max_axis - radius_i - radius_j;
    let want_pair = cutoff > 0.0
        && (gap < st.params.theta_pair * contact || room_axis <= st.params.theta_pair * contact);

    if want_pair {
        match try_install_pair(
            st, store, grid, domain, species, queue, rng, now, i, j, w0, d0, contact,
        )? {
            true => return Ok(ProtectOutcome::Scheduled),
            false => return convert_to_time_driven(st, store, queue, now, vec![i, j]),
        }
    }

    // Shrunk singles: split the separating-axis room between the two.
    let (allow_i, _) =
        protection_allowance(st, store, grid, domain, species, i, &pos_i, &[j]);
    let (allow_j, _) =
        protection_allowance(st, store, grid, domain, species, j, &pos_j, &[i]);
    let share = 0.5 * room_axis;
    let half_i = (radius_i + share).min(allow_i).min(h_cap) * (1.0 - 1e-12);
    let h_cap_j = (0.5 * st.params.mu_p_max * species.spec(s_j).diameter).min(periodic_cap(domain));
    let half_j = (radius_j + share).min(allow_j).min(h_cap_j) * (1.0 - 1e-12);
    if half_i <= radius_i || half_j <= radius_j {
        return convert_to_time_driven(st, store, queue, now, vec![i, j]);
    }
    install_single(st, store, species, queue, rng, now, i, half_i, dim)?;
    install_single(st, store, species, queue, rng, now, j, half_j, dim)?;
    Ok(ProtectOutcome::Scheduled)
}

/// Build the pair protection for (i, j): difference-walker shells around
/// the current separation plus a CM cube sized from the room left by other
/// neighbors. Returns false when no workable geometry exists.
#[allow(clippy::too_many_arguments)]
fn try_install_pair(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    domain: &Domain,
    species: &SpeciesTable,
    queue: &mut EventQueue,
    rng: &mut SimRng,
    now: f64,
    i: ParticleId,
    j: ParticleId,
    w0: Vector,
    d0: f64,
    cutoff: f64,
) -> Result<bool> {
    let dim = domain.dim;
    let pos_i = store.get(i).pos;
    let pos_j = store.get(j).pos;
    let (s_i, s_j) = (store.get(i).species, store.get(j).species);
    let (di_spec, dj_spec) = (species.spec(s_i).clone(), species.spec(s_j).clone());
    let (d_i, d_j) = (di_spec.diffusion, dj_spec.diffusion);
    if d_i + d_j <= 0.0 {
        return Ok(false); // two immobile particles cannot pair-propagate
    }
    let weight_i = d_i / (d_i + d_j);
    let cm_d = if d_i == 0.0 || d_j == 0.0 {
        // One immobile member: the CM walker carries no diffusion; give it
        // a tiny positive value so the cube exit sampler stays defined.
        1e-300
    } else {
        d_i * d_j / (d_i + d_j)
    };
    let (radius_i, radius_j) = (0.5 * di_spec.diameter, 0.5 * dj_spec.diameter);
    let gap = d0 - cutoff;
    let w0_max = (0..dim).map(|k| w0[k].abs()).fold(0.0, f64::max);
    let (room_i, _) = protection_allowance(st, store, grid, domain, species, i, &pos_i, &[j]);
    let (room_j, _) = protection_allowance(st, store, grid, domain, species, j, &pos_j, &[i]);
    let room_i = room_i.min(periodic_cap(domain));
    let room_j = room_j.min(periodic_cap(domain));
    let cm_min = 1e-3 * cutoff;

    let mut shrink = 1.0;
    for _ in 0..10 {
        let r_outer = d0 + gap.max(1e-9 * cutoff) * shrink;
        let need = |b: f64| b * (r_outer + w0_max);
        let cm_half_i = room_i - radius_i - need(weight_i);
        let cm_half_j = room_j - radius_j - need(1.0 - weight_i);
        let cm_half = cm_half_i.min(cm_half_j).min(2.0 * cutoff);
        if cm_half >= cm_min {
            let geometry = PairGeometry {
                dim,
                w0,
                r_inner: cutoff,
                r_outer,
                diff_d: d_i + d_j,
                hop: st.params.h_hop_frac * cutoff,
            };
            let env_i = cm_half + weight_i * (r_outer + w0_max) + radius_i;
            let env_j = cm_half + (1.0 - weight_i) * (r_outer + w0_max) + radius_j;
            let pair = sample_pair_prediction(
                rng,
                (i, j),
                pos_i,
                pos_j,
                geometry,
                cm_half,
                cm_d.max(1e-300),
                weight_i,
                (di_spec.decay_rate, dj_spec.decay_rate),
                now,
                (env_i, env_j),
            )?;
            let t_event = pair.event_time;
            let handle = st.alloc(Protection::Pair(pair));
            for (a, b) in [(i, j), (j, i)] {
                let p = store.get_mut(a);
                p.protection = Some(handle);
                p.event = EventRecord::new(t_event, Partner::Pair(b), Q_PAIR_FP);
            }
            queue.schedule(i, t_event)?;
            queue.schedule(j, t_event)?;
            return Ok(true);
        }
        shrink *= 0.5;
    }
    Ok(false)
}

fn convert_to_time_driven(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    queue: &mut EventQueue,
    now: f64,
    ids: Vec<ParticleId>,
) -> Result<ProtectOutcome> {
    for &id in &ids {
        if queue.contains(id) {
            queue.cancel(id)?;
        }
        let p = store.get_mut(id);
        debug_assert!(p.protection.is_none());
        p.mode = Mode::TimeDriven;
        p.event = EventRecord::invalid();
        if !st.td_members.contains(&id) {
            st.td_members.push(id);
        }
    }
    if st.td_members.len() == ids.len() {
        st.cluster_time = now;
    }
    Ok(ProtectOutcome::TimeDriven(ids))
}

/// Remove a particle entirely (reactions): grid unlink and store release.
/// The caller has already cleared queue entries and protections.
fn remove_particle(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    id: ParticleId,
) {
    debug_assert!(store.get(id).protection.is_none());
    grid.unlink(store, id);
    store.remove(id);
    st.deaths += 1;
    st.td_members.retain(|&m| m != id);
}

fn spawn_product(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    domain: &Domain,
    queue: &mut EventQueue,
    species_id: SpeciesId,
    mut pos: Vector,
    now: f64,
) -> Result<ParticleId> {
    domain.wrap(&mut pos);
    let mut p = Particle::new(species_id, pos, [0.0; 3]);
    p.time = now;
    p.event = EventRecord::update_at(now, Q_NEW_GEOMETRY);
    let id = store.insert(p);
    grid.insert_particle(store, id);
    queue.schedule(id, now)?;
    st.births += 1;
    Ok(id)
}

/// Process a contact or decay reaction. Reactants are at `now`, dequeued
/// and unprotected; products are queued with an immediate geometry-update
/// record so overlaps are checked before they are protected.
#[allow(clippy::too_many_arguments)]
pub fn process_reaction(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    domain: &Domain,
    species: &SpeciesTable,
    queue: &mut EventQueue,
    now: f64,
    i: ParticleId,
    j: Option<ParticleId>,
    kind: &ReactionKind,
) -> Result<Vec<ParticleId>> {
    st.reactions += 1;
    match (j, kind) {
        (Some(j), ReactionKind::Annihilate) => {
            remove_particle(st, store, grid, i);
            remove_particle(st, store, grid, j);
            Ok(vec![])
        }
        (Some(j), ReactionKind::Coalesce { product }) => {
            let (pi, pj) = (store.get(i).pos, store.get(j).pos);
            let (da, db) = (
                species.spec(store.get(i).species).diffusion,
                species.spec(store.get(j).species).diffusion,
            );
            // Diffusion-weighted midpoint: the CM-walker combination
            // (D_j r_i + D_i r_j) / (D_i + D_j); plain midpoint when both
            // are immobile.
            let b = if da + db > 0.0 { da / (da + db) } else { 0.5 };
            let w = domain.min_image(&pi, &pj);
            let mut pos = [0.0; 3];
            for k in 0..domain.dim {
                pos[k] = pi[k] - b * w[k];
            }
            remove_particle(st, store, grid, j);
            // Morph the survivor in place.
            domain.wrap(&mut pos);
            {
                let p = store.get_mut(i);
                p.species = *product;
                p.pos = pos;
                p.time = now;
                p.event = EventRecord::update_at(now, Q_NEW_GEOMETRY);
            }
            grid.relocate(store, i);
            queue.schedule(i, now)?;
            st.deaths += 1; // two reactants became one survivor
            st.births += 1;
            Ok(vec![i])
        }
        (Some(j), ReactionKind::Products { products }) => {
            let (pi, pj) = (store.get(i).pos, store.get(j).pos);
            let w = domain.min_image(&pi, &pj);
            let d = norm(&w, domain.dim).max(1e-300);
            let normal = crate::vecmath::scale(&w, 1.0 / d);
            let mut contact = [0.0; 3];
            for k in 0..domain.dim {
                contact[k] = pi[k] - 0.5 * w[k];
            }
            remove_particle(st, store, grid, i);
            remove_particle(st, store, grid, j);
            let m = products.len();
            let mut out = Vec::with_capacity(m);
            for (idx, &sp) in products.iter().enumerate() {
                // Spread along the contact normal so consecutive products
                // start non-overlapping.
                let spread = species.spec(sp).diameter * 1.001;
                let offset = (idx as f64 - 0.5 * (m as f64 - 1.0)) * spread;
                let mut pos = contact;
                for k in 0..domain.dim {
                    pos[k] += offset * normal[k];
                }
                out.push(spawn_product(st, store, grid, domain, queue, sp, pos, now)?);
            }
            Ok(out)
        }
        (None, _) => {
            // Single-particle decay: products appear at the reactant's
            // position.
            let decay_products = species.spec(store.get(i).species).decay_products.clone();
            let pos = store.get(i).pos;
            remove_particle(st, store, grid, i);
            let mut out = Vec::with_capacity(decay_products.len());
            for sp in decay_products {
                out.push(spawn_product(st, store, grid, domain, queue, sp, pos, now)?);
            }
            Ok(out)
        }
        (Some(_), other) => Err(Error::Config(format!(
            "reaction kind {other:?} is not valid for diffusing species"
        ))),
    }
}

/// Process a birth: species chosen proportionally to the per-species birth
/// rates, position uniform over non-external cells, inserted with an
/// immediate geometry-update record (overlap check happens when it pops).
pub fn process_birth_event(
    st: &mut FpkmcState,
    store: &mut ParticleStore,
    grid: &mut CellGrid,
    domain: &Domain,
    species: &SpeciesTable,
    queue: &mut EventQueue,
    rng: &mut SimRng,
    now: f64,
) -> Result<Option<ParticleId>> {
    let total: f64 = species.total_birth_rate();
    if total <= 0.0 {
        return Ok(None);
    }
    let mut pick = rng.uniform() * total;
    let mut chosen = 0u16;
    for (s, spec) in species.all().iter().enumerate() {
        if pick < spec.birth_rate {
            chosen = s as SpeciesId;
            break;
        }
        pick -= spec.birth_rate;
    }
    for _ in 0..1000 {
        let mut pos = [0.0; 3];
        for k in 0..domain.dim {
            pos[k] = rng.uniform() * domain.lengths[k];
        }
        let cell = grid.locate_cell(&pos);
        if grid.is_external(cell) {
            continue;
        }
        let id = spawn_product(st, store, grid, domain, queue, chosen, pos, now)?;
        return Ok(Some(id));
    }
    // Entire domain external-blocked: defer this birth by one event.
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FaceSpec, SpeciesSpec};

    fn diffusing_species(n: usize, diameter: f64, diffusion: f64) -> SpeciesTable {
        let specs: Vec<SpeciesSpec> = (0..n)
            .map(|k| SpeciesSpec {
                name: format!("s{k}"),
                diameter,
                mass: 1.0,
                diffusion,
                decay_rate: 0.0,
                decay_products: vec![],
                birth_rate: 0.0,
                use_nnl: false,
            })
            .collect();
        let inter = vec![vec![true; n]; n];
        SpeciesTable::new(specs, inter, vec![]).unwrap()
    }

    fn world(side: f64, cells: usize) -> (Domain, CellGrid, ParticleStore) {
        let domain = Domain::new(3, [side; 3], [FaceSpec::periodic(); 6]).unwrap();
        let grid = CellGrid::new(&domain, [cells; 3]).unwrap();
        (domain, grid, ParticleStore::new())
    }

    fn add(store: &mut ParticleStore, grid: &mut CellGrid, s: SpeciesId, pos: Vector) -> ParticleId {
        let id = store.insert(Particle::new(s, pos, [0.0; 3]));
        grid.insert_particle(store, id);
        id
    }

    #[test]
    fn isolated_particle_gets_capped_cube_and_finite_exit() {
        let species = diffusing_species(1, 1.0, 0.5);
        let (domain, mut grid, mut store) = world(20.0, 10);
        let mut st = FpkmcState::new(FpkmcParams::default());
        let mut queue = EventQueue::new();
        let mut rng = SimRng::new(3);
        let i = add(&mut store, &mut grid, 0, [10.0, 10.0, 10.0]);
        let out = ensure_protected(
            &mut st, &mut store, &mut grid, &domain, &species, &mut queue, &mut rng, 0.0, i,
        )
        .unwrap();
        assert!(matches!(out, ProtectOutcome::Scheduled));
        let (center, half) = st.box_of(&store, i).unwrap();
        assert_eq!(center, [10.0, 10.0, 10.0]);
        // Cap: mu_p_max * D / 2 = 2.5.
        assert!((half - 2.5).abs() < 1e-9, "half {half}");
        let rec = store.get(i).event;
        assert!(rec.time.is_finite() && rec.time > 0.0);
        assert_eq!(rec.partner, Partner::Boundary);
        assert!(queue.contains(i));
    }

    #[test]
    fn approaching_pair_gets_pair_protection_with_symmetric_records() {
        let species = diffusing_species(1, 1.0, 0.5);
        let (domain, mut grid, mut store) = world(20.0, 10);
        let mut st = FpkmcState::new(FpkmcParams::default());
        let mut queue = EventQueue::new();
        let mut rng = SimRng::new(5);
        // Gap 0.05 < theta_pair * D_ij = 0.1.
        let i = add(&mut store, &mut grid, 0, [10.0, 10.0, 10.0]);
        let j = add(&mut store, &mut grid, 0, [11.05, 10.0, 10.0]);
        ensure_protected(
            &mut st, &mut store, &mut grid, &domain, &species, &mut queue, &mut rng, 0.0, j,
        )
        .unwrap();
        let out = ensure_protected(
            &mut st, &mut store, &mut grid, &domain, &species, &mut queue, &mut rng, 0.0, i,
        )
        .unwrap();
        assert!(matches!(out, ProtectOutcome::Scheduled));
        let (ri, rj) = (store.get(i).event, store.get(j).event);
        assert_eq!(ri.partner, Partner::Pair(j));
        assert_eq!(rj.partner, Partner::Pair(i));
        assert_eq!(ri.time, rj.time);
        assert_eq!(ri.qualifier, Q_PAIR_FP);
        assert_eq!(store.get(i).protection, store.get(j).protection);
        st.check_disjoint(&store, &domain).unwrap();
    }

    #[test]
    fn random_configurations_protect_disjointly() {
        let species = diffusing_species(2, 1.0, 0.3);
        let (domain, mut grid, mut store) = world(24.0, 12);
        let mut st = FpkmcState::new(FpkmcParams::default());
        let mut queue = EventQueue::new();
        let mut rng = SimRng::new(7);
        let mut ids = Vec::new();
        // Random non-overlapping positions.
        'outer: while ids.len() < 60 {
            let pos = [
                rng.uniform() * 24.0,
                rng.uniform() * 24.0,
                rng.uniform() * 24.0,
            ];
            for &e in &ids {
                let d = crate::model::overlap_distance(&domain, &pos, &store.get(e).pos);
                if d < 1.05 {
                    continue 'outer;
                }
            }
            ids.push(add(&mut store, &mut grid, (ids.len() % 2) as u16, pos));
        }
        for &i in &ids {
            if store.get(i).protection.is_none() && store.get(i).mode == Mode::EventDriven {
                if queue.contains(i) {
                    queue.cancel(i).unwrap();
                }
                ensure_protected(
                    &mut st, &mut store, &mut grid, &domain, &species, &mut queue, &mut rng,
                    0.0, i,
                )
                .unwrap();
            }
        }
        st.check_disjoint(&store, &domain).unwrap();
        grid.check_counts(&store).unwrap();
    }

    #[test]
    fn annihilation_removes_both() {
        let species = {
            let mut specs = vec![];
            for k in 0..2 {
                specs.push(SpeciesSpec {
                    name: format!("s{k}"),
                    diameter: 1.0,
                    mass: 1.0,
                    diffusion: 0.4,
                    decay_rate: 0.0,
                    decay_products: vec![],
                    birth_rate: 0.0,
                    use_nnl: false,
                });
            }
            SpeciesTable::new(
                specs,
                vec![vec![false, true], vec![true, false]],
                vec![(
                    0,
                    1,
                    crate::model::PairRule {
                        kind: ReactionKind::Annihilate,
                        cutoff: 1.0,
                    },
                )],
            )
            .unwrap()
        };
        let (domain, mut grid, mut store) = world(12.0, 6);
        let mut st = FpkmcState::new(FpkmcParams::default());
        let mut queue = EventQueue::new();
        let i = add(&mut store, &mut grid, 0, [5.0, 5.0, 5.0]);
        let j = add(&mut store, &mut grid, 1, [6.0, 5.0, 5.0]);
        let products = process_reaction(
            &mut st,
            &mut store,
            &mut grid,
            &domain,
            &species,
            &mut queue,
            1.0,
            i,
            Some(j),
            &ReactionKind::Annihilate,
        )
        .unwrap();
        assert!(products.is_empty());
        assert_eq!(store.len(), 0);
        assert_eq!(st.deaths, 2);
        grid.check_counts(&store).unwrap();
    }

    #[test]
    fn coalescence_survivor_at_weighted_midpoint() {
        let species = diffusing_species(1, 1.0, 0.4);
        let (domain, mut grid, mut store) = world(12.0, 6);
        let mut st = FpkmcState::new(FpkmcParams::default());
        let mut queue = EventQueue::new();
        let i = add(&mut store, &mut grid, 0, [5.0, 5.0, 5.0]);
        let j = add(&mut store, &mut grid, 0, [6.0, 5.0, 5.0]);
        let products = process_reaction(
            &mut st,
            &mut store,
            &mut grid,
            &domain,
            &species,
            &mut queue,
            1.0,
            i,
            Some(j),
            &ReactionKind::Coalesce { product: 0 },
        )
        .unwrap();
        assert_eq!(products, vec![i]);
        assert_eq!(store.len(), 1);
        // Equal diffusivities: plain midpoint of the contact configuration.
        let pos = store.get(i).pos;
        assert!((pos[0] - 5.5).abs() < 1e-12, "{pos:?}");
        assert_eq!(store.get(i).time, 1.0);
        assert!(queue.contains(i));
    }

    #[test]
    fn decay_products_at_parent_position() {
        let specs = vec![
            SpeciesSpec {
                name: "parent".into(),
                diameter: 1.0,
                mass: 1.0,
                diffusion: 0.4,
                decay_rate: 2.0,
                decay_products: vec![1],
                birth_rate: 0.0,
                use_nnl: false,
            },
            SpeciesSpec {
                name: "child".into(),
                diameter: 0.5,
                mass: 1.0,
                diffusion: 0.8,
                decay_rate: 0.0,
                decay_products: vec![],
                birth_rate: 0.0,
                use_nnl: false,
            },
        ];
        let species =
            SpeciesTable::new(specs, vec![vec![true, false], vec![false, false]], vec![]).unwrap();
        let (domain, mut grid, mut store) = world(12.0, 6);
        let mut st = FpkmcState::new(FpkmcParams::default());
        let mut queue = EventQueue::new();
        let i = add(&mut store, &mut grid, 0, [3.0, 4.0, 5.0]);
        let products = process_reaction(
            &mut st, &mut store, &mut grid, &domain, &species, &mut queue, 2.0, i, None,
            &ReactionKind::Annihilate, // kind unused for decay path
        )
        .unwrap();
        assert_eq!(products.len(), 1);
        let child = products[0];
        assert_eq!(store.get(child).species, 1);
        assert_eq!(store.get(child).pos, [3.0, 4.0, 5.0]);
        assert_eq!(store.get(child).event.qualifier, Q_NEW_GEOMETRY);
        assert!(queue.contains(child));
        assert_eq!((st.births, st.deaths), (1, 1));
    }

    #[test]
    fn births_follow_species_rates() {
        let mk = |rate: f64| SpeciesSpec {
            name: format!("b{rate}"),
            diameter: 0.5,
            mass: 1.0,
            diffusion: 0.3,
            decay_rate: 0.0,
            decay_products: vec![],
            birth_rate: rate,
            use_nnl: false,
        };
        let species = SpeciesTable::new(
            vec![mk(2.0), mk(1.0)],
            vec![vec![false, false], vec![false, false]],
            vec![],
        )
        .unwrap();
        let (domain, mut grid, mut store) = world(12.0, 6);
        let mut st = FpkmcState::new(FpkmcParams::default());
        let mut queue = EventQueue::new();
        let mut rng = SimRng::new(11);
        let mut counts = [0u64; 2];
        let n = 30_000;
        for _ in 0..n {
            let id = process_birth_event(
                &mut st, &mut store, &mut grid, &domain, &species, &mut queue, &mut rng, 0.0,
            )
            .unwrap()
            .unwrap();
            counts[store.get(id).species as usize] += 1;
            // Clean up to keep the store small.
            queue.cancel(id).unwrap();
            grid.unlink(&mut store, id);
            store.remove(id);
        }
        let frac = counts[0] as f64 / n as f64;
        let sigma = (2.0 / 3.0 * 1.0 / 3.0 / n as f64).sqrt();
        assert!(
            (frac - 2.0 / 3.0).abs() < 3.0 * sigma,
            "species-0 fraction {frac}"
        );
        assert_eq!(st.births, n as u64);
    }
}
