//! The top-level asynchronous event loop.
//!
//! One iteration processes exactly one event: the earlier of the queue top
//! and the next external event. Particle events dispatch on the (p, nu)
//! taxonomy; the loop itself is backend-agnostic, with the backend enum
//! supplying propagation, prediction, and reaction steps.
//!
//! Pair scheduling follows the symmetric-schedule discipline: a particle
//! adopts a pair candidate only when the contact time beats the partner's
//! current key; the partner is then removed from the queue and its stolen
//! third party is invalidated with an immediate (t, 0, 0) update. Records
//! are otherwise lower bounds, re-scanned when popped.

use crate::dsmc::{self, DsmcState};
use crate::edmd;
use crate::events::{
    decode_geometry, EventQueue, EventRecord, ExternalEventSource, ExternalKind, GeometryEvent,
    Partner, Q_CORE_COLLISION, Q_DECAY, Q_NEW_GEOMETRY, Q_REPREDICT, Q_TETHER_STRETCH,
    Q_VELOCITY_CHANGED,
};
use crate::fpkmc::{self, cluster, FpkmcState, PairEvent, ProtectOutcome, Protection};
use crate::model::{
    Domain, Mode, ParticleId, ParticleStore, ReactionKind, SimulationClock, SpeciesTable,
};
use crate::nnl::{NnlRegistry, NnlTarget};
use crate::output::FlowAccumulator;
use crate::spatial::CellGrid;
use crate::vecmath::{norm_sq, Vector};
use crate::{Error, Result};

/// Absolute slack for immediate re-events and causality checks.
pub const TIME_SLACK: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub max_events: Option<u64>,
    pub max_time: Option<f64>,
    /// Synchronization cadence for EDMD/FPKMC runs (mask refresh, snapshot
    /// points). SEDMD synchronizes at time-step events instead.
    pub sync_every: Option<f64>,
    /// SEDMD: refresh masks / reclassify every this many time steps.
    pub mask_refresh_steps: u32,
    /// Run the continuous invariant sweeps (schedule symmetry, disjoint
    /// protections, cell counts). Defaults to debug builds.
    pub invariant_checks: bool,
    /// Protection-disjointness sweep cadence (events).
    pub disjoint_check_every: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_events: None,
            max_time: None,
            sync_every: None,
            mask_refresh_steps: 100,
            invariant_checks: cfg!(debug_assertions),
            disjoint_check_every: 1000,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunStats {
    pub events: u64,
    pub collisions: u64,
    pub tether_events: u64,
    pub transfers: u64,
    pub wall_reflections: u64,
    pub nnl_rebuilds: u64,
    pub protection_rebuilds: u64,
    pub sc_collisions: u64,
    pub time_steps: u64,
    pub reactions: u64,
    pub births: u64,
    pub outflow: u64,
    pub reservoir_insertions: u64,
    pub reclass_to_ed: u64,
    pub reclass_to_td: u64,
    /// Deterministic collisions between two DSMC-species particles; the
    /// interaction table forbids them, so this must stay zero.
    pub delta_delta_collisions: u64,
    pub syncs: u64,
}

/// One processed event, in log order.
#[derive(Clone, Debug, PartialEq)]
pub struct EventLogEntry {
    pub seq: u64,
    pub time: f64,
    pub kind: &'static str,
    pub particle: ParticleId,
    pub partner: Partner,
    pub qualifier: i32,
    pub payload: Vec<f64>,
}

/// Shared state every backend operates on.
pub struct World {
    pub domain: Domain,
    pub species: SpeciesTable,
    pub store: ParticleStore,
    pub grid: CellGrid,
    pub queue: EventQueue,
    pub external: ExternalEventSource,
    pub clock: SimulationClock,
    pub nnl: NnlRegistry,
    pub stats: RunStats,
    pub opts: RunOptions,
    pub flow: Option<FlowAccumulator>,
    pub seq: u64,
    /// Steps since the last mask refresh (SEDMD cadence).
    pub steps_since_refresh: u32,
}

pub enum Backend {
    /// EDMD, and SEDMD when DSMC state is present.
    Ballistic { dsmc: Option<DsmcState> },
    /// FPKMC.
    Diffusive { st: FpkmcState },
}

impl Backend {
    pub fn dsmc(&self) -> Option<&DsmcState> {
        match self {
            Backend::Ballistic { dsmc } => dsmc.as_ref(),
            Backend::Diffusive { .. } => None,
        }
    }

    pub fn fpkmc(&self) -> Option<&FpkmcState> {
        match self {
            Backend::Diffusive { st } => Some(st),
            Backend::Ballistic { .. } => None,
        }
    }
}

pub struct Sim {
    pub world: World,
    pub backend: Backend,
}

impl World {
    /// Total momentum over alive particles (velocities are piecewise
    /// constant, so the sum is meaningful at any instant).
    pub fn total_momentum(&self) -> Vector {
        let mut p = [0.0; 3];
        for (_, part) in self.store.iter() {
            let m = self.species.spec(part.species).mass;
            for k in 0..self.domain.dim {
                p[k] += m * part.vel[k];
            }
        }
        p
    }

    pub fn total_kinetic_energy(&self) -> f64 {
        self.store
            .iter()
            .map(|(_, p)| {
                0.5 * self.species.spec(p.species).mass * norm_sq(&p.vel, self.domain.dim)
            })
            .sum()
    }

    fn next_entry(
        &mut self,
        kind: &'static str,
        particle: ParticleId,
        partner: Partner,
        qualifier: i32,
        payload: Vec<f64>,
    ) -> EventLogEntry {
        let seq = self.seq;
        self.seq += 1;
        self.stats.events += 1;
        EventLogEntry {
            seq,
            time: self.clock.time,
            kind,
            particle,
            partner,
            qualifier,
            payload,
        }
    }

    /// Remove a particle from the queue; if it held a pair partner, reset
    /// that partner to an immediate re-prediction (step-9c invalidation).
    fn yank(&mut self, i: ParticleId, t: f64) -> Result<()> {
        if self.queue.contains(i) {
            self.queue.cancel(i)?;
        }
        let record = self.store.get(i).event;
        if let Partner::Pair(k) = record.partner {
            if k != i && self.store.get(k).alive() && self.queue.contains(k) {
                self.store.get_mut(k).event = EventRecord::update_at(t, Q_REPREDICT);
                self.queue.update_key(k, t)?;
            }
        }
        self.store.get_mut(i).event = EventRecord::invalid();
        Ok(())
    }

    /// Queue (or re-key) an immediate update record.
    fn requeue_update(&mut self, i: ParticleId, t: f64, qualifier: i32) -> Result<()> {
        self.store.get_mut(i).event = EventRecord::update_at(t, qualifier);
        if self.queue.contains(i) {
            self.queue.update_key(i, t)?;
        } else {
            self.queue.schedule(i, t)?;
        }
        Ok(())
    }

    /// Schedule-symmetry sweep: pair partners must be mutual with equal
    /// event times; every queued id must be alive and event-driven.
    pub fn check_schedule_symmetry(&self) -> Result<()> {
        for i in self.queue.ids() {
            let p = self.store.get(i);
            if !p.alive() {
                return Err(Error::fault(format!("dead particle {i} in queue")));
            }
            if p.mode == Mode::TimeDriven {
                return Err(Error::fault(format!("time-driven particle {i} in queue")));
            }
            if let Partner::Pair(j) = p.event.partner {
                let q = self.store.get(j);
                if !self.queue.contains(j) {
                    return Err(Error::fault(format!(
                        "pair partner {j} of {i} is not queued"
                    )));
                }
                match q.event.partner {
                    Partner::Pair(back) if back == i => {}
                    other => {
                        return Err(Error::fault(format!(
                            "schedule asymmetry: {i} pairs {j} but {j} holds {other:?}"
                        )))
                    }
                }
                if q.event.time != p.event.time {
                    return Err(Error::fault(format!(
                        "pair times differ: {i}@{} vs {j}@{}",
                        p.event.time, q.event.time
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Sim {
    /// Process the next event. Returns None when nothing is scheduled
    /// anywhere (empty queue and no external events).
    pub fn step(&mut self) -> Result<Option<EventLogEntry>> {
        // Pending time-driven FPKMC cluster work runs ahead of the queue.
        if let Backend::Diffusive { st } = &mut self.backend {
            if !st.td_members.is_empty() {
                if let Some(entry) = Self::advance_fpkmc_cluster(&mut self.world, st)? {
                    return Ok(Some(entry));
                }
            }
        }

        let next_particle = self.world.queue.peek();
        let next_external = self.world.external.peek();
        match (next_particle, next_external) {
            (None, None) => Ok(None),
            (Some((t_e, _)), Some((t_ex, _))) if t_ex < t_e => self.process_external().map(Some),
            (None, Some(_)) => self.process_external().map(Some),
            (Some(_), _) => self.process_particle_event().map(Some),
        }
    }

    /// Run until a termination condition (max events / max time / nothing
    /// left), feeding every entry to `sink`.
    pub fn run(
        &mut self,
        mut sink: impl FnMut(&World, &EventLogEntry) -> Result<()>,
    ) -> Result<()> {
        loop {
            if let Some(max) = self.world.opts.max_events {
                if self.world.stats.events >= max {
                    return Ok(());
                }
            }
            if let Some(max) = self.world.opts.max_time {
                if self.world.clock.time >= max {
                    return Ok(());
                }
            }
            match self.step()? {
                None => return Ok(()),
                Some(entry) => sink(&self.world, &entry)?,
            }
        }
    }

    fn process_external(&mut self) -> Result<EventLogEntry> {
        let (t, kind) = self.world.external.consume().expect("peeked external");
        self.world.clock.advance(t)?;
        self.world.clock.event_count += 1;
        match kind {
            ExternalKind::TimeStep => self.process_time_step(t),
            ExternalKind::StochasticCollision => self.process_stochastic_collision_event(t),
            ExternalKind::Birth => self.process_birth(t),
            ExternalKind::Sync => {
                self.synchronize_all(t)?;
                let n = self.world.store.len() as f64;
                if let Some(every) = self.world.opts.sync_every {
                    self.world.external.set(ExternalKind::Sync, Some(t + every));
                }
                Ok(self.world.next_entry("sync", 0, Partner::Update, 0, vec![n]))
            }
        }
    }

    fn process_particle_event(&mut self) -> Result<EventLogEntry> {
        let (t_e, i) = self.world.queue.pop().expect("peeked queue");
        if t_e < self.world.clock.time - TIME_SLACK {
            return Err(Error::Causality {
                event: t_e,
                clock: self.world.clock.time,
            });
        }
        self.world.clock.advance(t_e)?;
        self.world.clock.event_count += 1;
        let record = self.world.store.get(i).event;
        debug_assert_eq!(record.time, t_e, "queue key out of sync with record");
        let entry = match record.partner {
            Partner::Invalid => {
                return Err(Error::fault(format!("invalid record popped for {i}")))
            }
            Partner::Update => self.handle_update(i, t_e, record.qualifier)?,
            Partner::SelfEvent => self.handle_self_event(i, t_e, record.qualifier)?,
            Partner::Pair(j) => self.handle_pair_event(i, j, t_e, record.qualifier)?,
            Partner::Boundary => self.handle_boundary(i, t_e, record.qualifier)?,
        };
        if self.world.opts.invariant_checks {
            self.world.check_schedule_symmetry()?;
            if let Backend::Diffusive { st } = &self.backend {
                if self.world.stats.events % self.world.opts.disjoint_check_every == 0 {
                    st.check_disjoint(&self.world.store, &self.world.domain)?;
                }
            }
        }
        Ok(entry)
    }

    /// p = 0: update the prediction; nu = -1 additionally rebuilds the
    /// neighborhood and checks for overlaps (fresh insertions, sync).
    fn handle_update(&mut self, i: ParticleId, t: f64, qualifier: i32) -> Result<EventLogEntry> {
        match &mut self.backend {
            Backend::Ballistic { .. } => {
                if qualifier == Q_NEW_GEOMETRY {
                    edmd::advance_ballistic(self.world.store.get_mut(i), t)?;
                    self.world.grid.relocate(&mut self.world.store, i);
                    Self::rebuild_neighborhood_if_used(&mut self.world, i)?;
                    Self::ballistic_overlap_scan(&self.world, i)?;
                }
                Self::predict_ballistic(&mut self.world, i, t)?;
            }
            Backend::Diffusive { st } => {
                Self::fpkmc_predict(&mut self.world, st, i, t)?;
            }
        }
        Ok(self
            .world
            .next_entry("upd", i, Partner::Update, qualifier, vec![]))
    }

    /// p = i: single-particle event (decay).
    fn handle_self_event(
        &mut self,
        i: ParticleId,
        t: f64,
        qualifier: i32,
    ) -> Result<EventLogEntry> {
        match &mut self.backend {
            Backend::Diffusive { st } => {
                if qualifier != Q_DECAY {
                    return Err(Error::fault(format!(
                        "unknown self-event qualifier {qualifier}"
                    )));
                }
                fpkmc::single_no_passage_advance(
                    st,
                    &mut self.world.store,
                    &mut self.world.grid,
                    &self.world.domain,
                    &self.world.species,
                    &mut self.world.clock.rng,
                    i,
                    t,
                )?;
                let products = fpkmc::process_reaction(
                    st,
                    &mut self.world.store,
                    &mut self.world.grid,
                    &self.world.domain,
                    &self.world.species,
                    &mut self.world.queue,
                    t,
                    i,
                    None,
                    &ReactionKind::Annihilate, // unused on the decay path
                )?;
                self.world.stats.reactions += 1;
                let payload = products.iter().map(|&id| id as f64).collect();
                Ok(self
                    .world
                    .next_entry("decay", i, Partner::SelfEvent, qualifier, payload))
            }
            Backend::Ballistic { .. } => Err(Error::fault(
                "self events are not used by the ballistic backends",
            )),
        }
    }

    fn handle_pair_event(
        &mut self,
        i: ParticleId,
        j: ParticleId,
        t: f64,
        qualifier: i32,
    ) -> Result<EventLogEntry> {
        // Symmetric schedules: j holds the mirror record; remove it first.
        debug_assert_eq!(self.world.store.get(j).event.partner, Partner::Pair(i));
        self.world.queue.cancel(j)?;
        match &mut self.backend {
            Backend::Ballistic { dsmc } => {
                let dsmc_species = dsmc.as_ref().map(|d| d.params.species);
                edmd::advance_ballistic(self.world.store.get_mut(i), t)?;
                edmd::advance_ballistic(self.world.store.get_mut(j), t)?;
                let (s_i, s_j) = (
                    self.world.store.get(i).species,
                    self.world.store.get(j).species,
                );
                let (mi, mj) = (
                    self.world.species.spec(s_i).mass,
                    self.world.species.spec(s_j).mass,
                );
                let kind;
                match qualifier {
                    Q_CORE_COLLISION => {
                        let cutoff = self.world.species.cutoff(s_i, s_j);
                        let (pi, pj) = self.world.store.pair_mut(i, j);
                        edmd::process_elastic_collision(
                            &self.world.domain,
                            pi,
                            pj,
                            mi,
                            mj,
                            cutoff,
                        )?;
                        self.world.stats.collisions += 1;
                        if dsmc_species == Some(s_i) && dsmc_species == Some(s_j) {
                            self.world.stats.delta_delta_collisions += 1;
                        }
                        kind = "col";
                    }
                    Q_TETHER_STRETCH => {
                        let range = match self.world.species.rule(s_i, s_j) {
                            Some(crate::model::PairRule {
                                kind: ReactionKind::Tether { range },
                                ..
                            }) => *range,
                            _ => {
                                return Err(Error::fault(
                                    "tether event for pair without a tether rule",
                                ))
                            }
                        };
                        let (pi, pj) = self.world.store.pair_mut(i, j);
                        edmd::process_tether_rebound(&self.world.domain, pi, pj, mi, mj, range)?;
                        self.world.stats.tether_events += 1;
                        kind = "tether";
                    }
                    other => {
                        return Err(Error::fault(format!(
                            "unknown ballistic pair qualifier {other}"
                        )))
                    }
                }
                // Step 7: the partner goes back with an immediate update;
                // step 9 re-predicts for i.
                self.world.requeue_update(j, t, Q_REPREDICT)?;
                Self::predict_ballistic(&mut self.world, i, t)?;
                let vi = self.world.store.get(i).vel;
                let vj = self.world.store.get(j).vel;
                let mut payload = vec![s_i as f64, s_j as f64];
                payload.extend_from_slice(&vi[..self.world.domain.dim]);
                payload.extend_from_slice(&vj[..self.world.domain.dim]);
                Ok(self
                    .world
                    .next_entry(kind, i, Partner::Pair(j), qualifier, payload))
            }
            Backend::Diffusive { st } => {
                let entry = match qualifier {
                    fpkmc::Q_PAIR_FP => {
                        let handle = self.world.store.get(i).protection.ok_or_else(|| {
                            Error::fault(format!("pair event for unprotected particle {i}"))
                        })?;
                        let event = fpkmc::pair_process_event(
                            st,
                            &mut self.world.store,
                            &mut self.world.grid,
                            &self.world.domain,
                            &mut self.world.clock.rng,
                            handle,
                        )?;
                        match event {
                            PairEvent::Contact(a, b) => {
                                let kind = self.world.species.reaction(
                                    self.world.store.get(a).species,
                                    self.world.store.get(b).species,
                                );
                                let products = fpkmc::process_reaction(
                                    st,
                                    &mut self.world.store,
                                    &mut self.world.grid,
                                    &self.world.domain,
                                    &self.world.species,
                                    &mut self.world.queue,
                                    t,
                                    a,
                                    Some(b),
                                    &kind,
                                )?;
                                self.world.stats.reactions += 1;
                                let payload = products.iter().map(|&id| id as f64).collect();
                                self.world
                                    .next_entry("react", a, Partner::Pair(b), qualifier, payload)
                            }
                            PairEvent::Separated(a, b) => {
                                // Rebuild a immediately (it may pair with b
                                // again); b follows with an update record.
                                self.world.requeue_update(b, t, Q_REPREDICT)?;
                                Self::fpkmc_protect(&mut self.world, st, a, t)?;
                                self.world
                                    .next_entry("pairfp", a, Partner::Pair(b), qualifier, vec![])
                            }
                            PairEvent::Decay { decaying, partner } => {
                                self.world.requeue_update(partner, t, Q_REPREDICT)?;
                                let products = fpkmc::process_reaction(
                                    st,
                                    &mut self.world.store,
                                    &mut self.world.grid,
                                    &self.world.domain,
                                    &self.world.species,
                                    &mut self.world.queue,
                                    t,
                                    decaying,
                                    None,
                                    &ReactionKind::Annihilate, // decay path
                                )?;
                                self.world.stats.reactions += 1;
                                let payload = products.iter().map(|&id| id as f64).collect();
                                self.world.next_entry(
                                    "decay",
                                    decaying,
                                    Partner::SelfEvent,
                                    Q_DECAY,
                                    payload,
                                )
                            }
                        }
                    }
                    fpkmc::Q_CONTACT => {
                        let kind = self.world.species.reaction(
                            self.world.store.get(i).species,
                            self.world.store.get(j).species,
                        );
                        let products = fpkmc::process_reaction(
                            st,
                            &mut self.world.store,
                            &mut self.world.grid,
                            &self.world.domain,
                            &self.world.species,
                            &mut self.world.queue,
                            t,
                            i,
                            Some(j),
                            &kind,
                        )?;
                        self.world.stats.reactions += 1;
                        let payload = products.iter().map(|&id| id as f64).collect();
                        self.world
                            .next_entry("react", i, Partner::Pair(j), qualifier, payload)
                    }
                    other => {
                        return Err(Error::fault(format!(
                            "unknown diffusive pair qualifier {other}"
                        )))
                    }
                };
                Ok(entry)
            }
        }
    }

    fn handle_boundary(&mut self, i: ParticleId, t: f64, qualifier: i32) -> Result<EventLogEntry> {
        match &mut self.backend {
            Backend::Diffusive { st } => {
                // nu = 0: first passage out of the protective region.
                if qualifier != crate::events::Q_PROTECTION {
                    return Err(Error::fault(format!(
                        "unexpected diffusive boundary qualifier {qualifier}"
                    )));
                }
                fpkmc::single_exit_advance(
                    st,
                    &mut self.world.store,
                    &mut self.world.grid,
                    &self.world.domain,
                    &self.world.species,
                    &mut self.world.clock.rng,
                    i,
                )?;
                self.world.stats.protection_rebuilds += 1;
                Self::fpkmc_protect(&mut self.world, st, i, t)?;
                Ok(self
                    .world
                    .next_entry("prot", i, Partner::Boundary, qualifier, vec![]))
            }
            Backend::Ballistic { .. } => {
                edmd::advance_ballistic(self.world.store.get_mut(i), t)?;
                if qualifier == crate::events::Q_NEIGHBORHOOD {
                    // Core reached the neighborhood's inner wall: rebuild.
                    self.world.stats.nnl_rebuilds += 1;
                    Self::rebuild_neighborhood_if_used(&mut self.world, i)?;
                    Self::predict_ballistic(&mut self.world, i, t)?;
                    return Ok(self.world.next_entry(
                        "nnl",
                        i,
                        Partner::Boundary,
                        qualifier,
                        vec![],
                    ));
                }
                match decode_geometry(qualifier) {
                    Some(GeometryEvent::CellTransfer { face }) => {
                        // Capture the wrap shift for the NNL image fixup.
                        let shift = match self.world.grid.across_face(
                            &self.world.domain,
                            self.world.store.get(i).cell,
                            face,
                        ) {
                            crate::spatial::FaceCrossing::Cell { shift, .. } => shift,
                            crate::spatial::FaceCrossing::Edge => {
                                return Err(Error::fault(format!(
                                    "transfer event into a domain edge (particle {i})"
                                )))
                            }
                        };
                        self.world.grid.transfer_particle(
                            &mut self.world.store,
                            &self.world.domain,
                            i,
                            face,
                        )?;
                        if shift != [0.0; 3] {
                            self.world.nnl.apply_wrap(&self.world.store, i, &shift);
                        }
                        self.world.stats.transfers += 1;
                        Self::predict_ballistic(&mut self.world, i, t)?;
                        Ok(self
                            .world
                            .next_entry("xfer", i, Partner::Boundary, qualifier, vec![]))
                    }
                    Some(GeometryEvent::WallCollision { face }) => {
                        let s = self.world.store.get(i).species;
                        let radius = 0.5 * self.world.species.spec(s).diameter;
                        match self.world.domain.face(face).temperature {
                            None => {
                                edmd::process_wall_reflection(
                                    &self.world.domain,
                                    self.world.store.get_mut(i),
                                    radius,
                                    face,
                                )?;
                            }
                            Some(temp) => {
                                let mass = self.world.species.spec(s).mass;
                                let v = edmd::thermal_wall_velocity(
                                    &mut self.world.clock.rng,
                                    self.world.domain.dim,
                                    face,
                                    temp,
                                    mass,
                                );
                                let axis = face / 2;
                                let plane = if face % 2 == 1 {
                                    self.world.domain.lengths[axis] - radius
                                } else {
                                    radius
                                };
                                let p = self.world.store.get_mut(i);
                                p.vel = v;
                                p.pos[axis] = plane;
                            }
                        }
                        self.world.stats.wall_reflections += 1;
                        Self::predict_ballistic(&mut self.world, i, t)?;
                        let vi = self.world.store.get(i).vel;
                        let payload = vi[..self.world.domain.dim].to_vec();
                        Ok(self
                            .world
                            .next_entry("wall", i, Partner::Boundary, qualifier, payload))
                    }
                    None => Err(Error::fault(format!(
                        "undecodable boundary qualifier {qualifier}"
                    ))),
                }
            }
        }
    }

    // ---- ballistic prediction (step 9) ----

    fn rebuild_neighborhood_if_used(world: &mut World, i: ParticleId) -> Result<()> {
        let uses = world.species.spec(world.store.get(i).species).use_nnl;
        if world.store.get(i).neighborhood.is_some() {
            world.nnl.destroy(&mut world.store, i);
        }
        if uses {
            world
                .nnl
                .build(&mut world.store, &world.grid, &world.domain, &world.species, i)?;
        }
        Ok(())
    }

    /// Overlap scan after insertion/synchronization: contacts are fine,
    /// interpenetration breaks the hard-core invariant.
    fn ballistic_overlap_scan(world: &World, i: ParticleId) -> Result<()> {
        let p = world.store.get(i);
        let (s_i, pos, cell) = (p.species, p.pos, p.cell);
        let mut bad: Option<(ParticleId, f64, f64)> = None;
        world.grid.for_each_neighbor(&world.domain, cell, |c| {
            world.grid.for_each_in_cell(&world.store, c, |j| {
                if j == i || bad.is_some() {
                    return;
                }
                let q = world.store.get(j);
                let cutoff = world.species.cutoff(s_i, q.species);
                if cutoff <= 0.0 {
                    return;
                }
                let d = crate::model::overlap_distance(&world.domain, &pos, &q.pos);
                if d < cutoff * (1.0 - edmd::OVERLAP_TOL) {
                    bad = Some((j, d, cutoff));
                }
            });
        });
        if let Some((j, d, cutoff)) = bad {
            return Err(Error::fault(format!(
                "overlap between {i} and {j}: d = {d} < {cutoff}"
            )));
        }
        Ok(())
    }

    /// Find the minimal next event for a ballistic particle and install the
    /// symmetric records. The particle has been advanced to `t` and is
    /// currently dequeued.
    fn predict_ballistic(world: &mut World, i: ParticleId, t: f64) -> Result<()> {
        debug_assert!(!world.queue.contains(i));
        debug_assert!((world.store.get(i).time - t).abs() <= TIME_SLACK);
        let (s_i, pos, vel, cell) = {
            let p = world.store.get(i);
            (p.species, p.pos, p.vel, p.cell)
        };
        let radius = 0.5 * world.species.spec(s_i).diameter;

        // Boundary candidates: cell transfer or wall contact, plus the
        // virtual collision with the neighborhood's inner wall.
        let mut best: EventRecord = EventRecord::invalid();
        if let Some((dt, q)) =
            edmd::predict_boundary(&world.grid, &world.domain, &pos, &vel, cell, radius)
        {
            best = EventRecord::new(t + dt, Partner::Boundary, q);
        }
        if let Some(h) = world.store.get(i).neighborhood {
            let region = world.nnl.region(h);
            if let Some(dt) =
                region.ballistic_core_exit(&pos, &vel, 2.0 * radius, world.domain.dim)
            {
                if t + dt < best.time {
                    best =
                        EventRecord::new(t + dt, Partner::Boundary, crate::events::Q_NEIGHBORHOOD);
                }
            }
        }

        // Pair candidates: neighborhood entries for listed species, cell
        // scan for the rest (or for everything when i keeps no list).
        let mut best_pair: Option<(f64, ParticleId, i32)> = None;
        let nnl_handle = world.store.get(i).neighborhood;
        if let Some(h) = nnl_handle {
            let entries = world.nnl.region(h).entries.clone();
            for e in entries {
                if let NnlTarget::Particle(j) = e.target {
                    let cap = best_pair.map_or(best.time, |(bt, _, _)| bt.min(best.time));
                    if let Some(c) =
                        Self::consider_pair(world, i, j, &e.offset, t, &pos, &vel, s_i, cap)?
                    {
                        best_pair = Some(c);
                    }
                }
            }
        }
        let scan_row = {
            let mut row = world.species.interaction_row(s_i);
            if nnl_handle.is_some() {
                for (s, spec) in world.species.all().iter().enumerate() {
                    if spec.use_nnl {
                        row &= !(1u64 << s);
                    }
                }
            }
            row
        };
        if scan_row != 0 {
            let mut candidates: Vec<ParticleId> = Vec::new();
            world.grid.for_each_neighbor(&world.domain, cell, |c| {
                if world.grid.mask_skip(c, scan_row) {
                    return;
                }
                world.grid.for_each_in_cell(&world.store, c, |j| {
                    if j != i && scan_row & (1u64 << world.store.get(j).species) != 0 {
                        candidates.push(j);
                    }
                });
            });
            for j in candidates {
                let off = {
                    let rel_raw =
                        crate::vecmath::sub(&world.store.get(j).pos, &world.store.get(i).pos);
                    let rel_img = world
                        .domain
                        .min_image(&world.store.get(j).pos, &world.store.get(i).pos);
                    crate::vecmath::sub(&rel_img, &rel_raw)
                };
                let cap = best_pair.map_or(best.time, |(bt, _, _)| bt.min(best.time));
                if let Some(c) = Self::consider_pair(world, i, j, &off, t, &pos, &vel, s_i, cap)? {
                    best_pair = Some(c);
                }
            }
        }

        if let Some((t_pair, j, q)) = best_pair {
            if t_pair < best.time {
                // Bind the partner: remove it from the queue and invalidate
                // its stolen third party.
                world.queue.cancel(j)?;
                let old = world.store.get(j).event;
                if let Partner::Pair(k) = old.partner {
                    if k != i && world.store.get(k).alive() && world.queue.contains(k) {
                        world.store.get_mut(k).event = EventRecord::update_at(t, Q_REPREDICT);
                        world.queue.update_key(k, t)?;
                    }
                }
                world.store.get_mut(j).event = EventRecord::new(t_pair, Partner::Pair(i), q);
                world.queue.schedule(j, t_pair)?;
                world.store.get_mut(i).event = EventRecord::new(t_pair, Partner::Pair(j), q);
                world.queue.schedule(i, t_pair)?;
                return Ok(());
            }
        }
        // No pair adopted: boundary, or parked when the particle can reach
        // nothing at all (isolated and at rest).
        if best.time.is_finite() {
            world.store.get_mut(i).event = best;
            world.queue.schedule(i, best.time)?;
        } else {
            let parked = EventRecord::update_at(f64::INFINITY, Q_REPREDICT);
            world.store.get_mut(i).event = parked;
            world.queue.schedule(i, f64::INFINITY)?;
        }
        Ok(())
    }

    /// Evaluate one pair candidate; adopt it only when the contact time
    /// beats both the current minimum and the partner's own key (a partner
    /// with an earlier event re-discovers this pair when it re-predicts).
    #[allow(clippy::too_many_arguments)]
    fn consider_pair(
        world: &World,
        _i: ParticleId,
        j: ParticleId,
        offset: &Vector,
        t: f64,
        pos: &Vector,
        vel: &Vector,
        s_i: crate::model::SpeciesId,
        current_best: f64,
    ) -> Result<Option<(f64, ParticleId, i32)>> {
        let q = world.store.get(j);
        if !q.alive() || q.mode == Mode::TimeDriven {
            return Ok(None);
        }
        if !world.queue.contains(j) {
            return Ok(None); // mid-processing; it will re-predict against us
        }
        let t_e_j = q.event.time;
        let cutoff = world.species.cutoff(s_i, q.species);
        // Partner position advanced conceptually to t, no mutation.
        let dt_j = t - q.time;
        let mut rel = [0.0; 3];
        let mut relv = [0.0; 3];
        for k in 0..world.domain.dim {
            rel[k] = pos[k] - (q.pos[k] + offset[k] + q.vel[k] * dt_j);
            relv[k] = vel[k] - q.vel[k];
        }
        let mut best: Option<(f64, ParticleId, i32)> = None;
        let mut cap = current_best;
        if let Some(dt) = edmd::predict_sphere_collision(&rel, &relv, cutoff, world.domain.dim)? {
            let t_abs = t + dt;
            if t_abs < cap && t_abs < t_e_j {
                best = Some((t_abs, j, Q_CORE_COLLISION));
                cap = t_abs;
            }
        }
        if let Some(crate::model::PairRule {
            kind: ReactionKind::Tether { range },
            ..
        }) = world.species.rule(s_i, q.species)
        {
            if let Some(dt) = edmd::predict_shell_exit(&rel, &relv, *range, world.domain.dim) {
                let t_abs = t + dt;
                if t_abs < cap && t_abs < t_e_j {
                    best = Some((t_abs, j, Q_TETHER_STRETCH));
                }
            }
        }
        Ok(best)
    }

    // ---- FPKMC glue ----

    fn fpkmc_predict(world: &mut World, st: &mut FpkmcState, i: ParticleId, t: f64) -> Result<()> {
        // An update record implies the particle is unprotected (fresh
        // insertion, dissolution partner, stolen third party); its position
        // is already current.
        let pt = world.store.get(i).time;
        if pt < t - TIME_SLACK {
            return Err(Error::fault(format!(
                "fpkmc update for particle {i} at t = {t} with stale time {pt}"
            )));
        }
        world.store.get_mut(i).time = t;
        Self::fpkmc_protect(world, st, i, t)
    }

    fn fpkmc_protect(world: &mut World, st: &mut FpkmcState, i: ParticleId, t: f64) -> Result<()> {
        match fpkmc::ensure_protected(
            st,
            &mut world.store,
            &mut world.grid,
            &world.domain,
            &world.species,
            &mut world.queue,
            &mut world.clock.rng,
            t,
            i,
        )? {
            ProtectOutcome::Scheduled | ProtectOutcome::ContactPending(..) => Ok(()),
            ProtectOutcome::TimeDriven(ids) => {
                world.stats.reclass_to_td += ids.len() as u64;
                Ok(())
            }
        }
    }

    /// Hop the synchronous cluster up to the next scheduled event; overlaps
    /// and decays inside the burst become events of their own.
    fn advance_fpkmc_cluster(
        world: &mut World,
        st: &mut FpkmcState,
    ) -> Result<Option<EventLogEntry>> {
        let until = match (world.queue.peek(), world.external.peek()) {
            (Some((tq, _)), Some((tx, _))) => tq.min(tx),
            (Some((tq, _)), None) => tq,
            (None, Some((tx, _))) => tx,
            (None, None) => return Ok(None),
        };
        if until <= st.cluster_time || !until.is_finite() {
            return Ok(None);
        }
        let channels: Vec<cluster::HopChannel> = world
            .species
            .all()
            .iter()
            .enumerate()
            .map(|(s, spec)| {
                cluster::HopChannel::new(
                    s as u16,
                    spec.diffusion,
                    st.params.cluster_step_frac * spec.diameter.max(1e-12),
                    spec.decay_rate,
                )
            })
            .collect();
        let members = st.td_members.clone();
        let domain = world.domain.clone();
        let species = world.species.clone();
        let grid = &mut world.grid;
        let (reached, stop) = cluster::hop_until(
            &mut world.clock.rng,
            &mut world.store,
            &members,
            &channels,
            domain.dim,
            st.cluster_time,
            until,
            |store, moved| {
                domain.wrap(&mut store.get_mut(moved).pos);
                grid.relocate(store, moved);
                // First overlapping interacting neighbor stops the burst.
                let p = store.get(moved);
                let (pos, s, cell) = (p.pos, p.species, p.cell);
                let mut hit = None;
                grid.for_each_neighbor(&domain, cell, |c| {
                    grid.for_each_in_cell(store, c, |j| {
                        if j == moved || hit.is_some() {
                            return;
                        }
                        let cutoff = species.cutoff(s, store.get(j).species);
                        if cutoff <= 0.0 {
                            return;
                        }
                        let d =
                            crate::model::overlap_distance(&domain, &pos, &store.get(j).pos);
                        if d < cutoff {
                            hit = Some((moved, j));
                        }
                    });
                });
                hit
            },
        );
        st.cluster_time = reached;
        for &m in &members {
            if world.store.get(m).alive() {
                world.store.get_mut(m).time = reached;
            }
        }
        match stop {
            cluster::ClusterStop::Bound => {
                // Try to promote members back to event-driven handling.
                let mut promoted = Vec::new();
                for &m in &members {
                    if !world.store.get(m).alive() {
                        continue;
                    }
                    let pos = world.store.get(m).pos;
                    let (allow, _) = fpkmc::protection_allowance(
                        st,
                        &world.store,
                        &world.grid,
                        &world.domain,
                        &world.species,
                        m,
                        &pos,
                        &[],
                    );
                    let spec = world.species.spec(world.store.get(m).species);
                    if allow > 0.75 * st.params.mu_p * spec.diameter {
                        promoted.push(m);
                    }
                }
                for m in promoted {
                    st.td_members.retain(|&x| x != m);
                    world.store.get_mut(m).mode = Mode::EventDriven;
                    world.stats.reclass_to_ed += 1;
                    world.requeue_update(m, reached, Q_NEW_GEOMETRY)?;
                }
                Ok(None)
            }
            cluster::ClusterStop::Overlap(a, b) => {
                world.clock.advance(reached)?;
                world.clock.event_count += 1;
                // The partner may be event-driven: pull it out of the queue
                // and advance it to the reaction time first.
                if world.store.get(b).mode == Mode::EventDriven {
                    world.yank(b, reached)?;
                    if let Some(h) = world.store.get(b).protection {
                        match st.get(h) {
                            Protection::Single(_) => {
                                fpkmc::single_no_passage_advance(
                                    st,
                                    &mut world.store,
                                    &mut world.grid,
                                    &world.domain,
                                    &world.species,
                                    &mut world.clock.rng,
                                    b,
                                    reached,
                                )?;
                            }
                            Protection::Pair(_) => {
                                let (x, y) = fpkmc::pair_propagate_to(
                                    st,
                                    &mut world.store,
                                    &mut world.grid,
                                    &world.domain,
                                    &mut world.clock.rng,
                                    h,
                                    reached,
                                )?;
                                let third = if x == b { y } else { x };
                                world.yank(third, reached)?;
                                world.requeue_update(third, reached, Q_REPREDICT)?;
                            }
                        }
                    }
                }
                let kind = world
                    .species
                    .reaction(world.store.get(a).species, world.store.get(b).species);
                st.td_members.retain(|&m| m != a && m != b);
                let products = fpkmc::process_reaction(
                    st,
                    &mut world.store,
                    &mut world.grid,
                    &world.domain,
                    &world.species,
                    &mut world.queue,
                    reached,
                    a,
                    Some(b),
                    &kind,
                )?;
                world.stats.reactions += 1;
                let payload = products.iter().map(|&id| id as f64).collect();
                Ok(Some(world.next_entry(
                    "react",
                    a,
                    Partner::Pair(b),
                    fpkmc::Q_CONTACT,
                    payload,
                )))
            }
            cluster::ClusterStop::Decay(m) => {
                world.clock.advance(reached)?;
                world.clock.event_count += 1;
                st.td_members.retain(|&x| x != m);
                let products = fpkmc::process_reaction(
                    st,
                    &mut world.store,
                    &mut world.grid,
                    &world.domain,
                    &world.species,
                    &mut world.queue,
                    reached,
                    m,
                    None,
                    &ReactionKind::Annihilate,
                )?;
                world.stats.reactions += 1;
                let payload = products.iter().map(|&id| id as f64).collect();
                Ok(Some(world.next_entry(
                    "decay",
                    m,
                    Partner::SelfEvent,
                    Q_DECAY,
                    payload,
                )))
            }
        }
    }

    // ---- external events ----

    fn process_birth(&mut self, t: f64) -> Result<EventLogEntry> {
        let Backend::Diffusive { st } = &mut self.backend else {
            return Err(Error::fault("birth event without the diffusive backend"));
        };
        let born = fpkmc::process_birth_event(
            st,
            &mut self.world.store,
            &mut self.world.grid,
            &self.world.domain,
            &self.world.species,
            &mut self.world.queue,
            &mut self.world.clock.rng,
            t,
        )?;
        self.world.stats.births += born.is_some() as u64;
        let rate = self.world.species.total_birth_rate();
        let next = t + self.world.clock.rng.exp_time(rate);
        self.world.external.set(ExternalKind::Birth, Some(next));
        let (id, payload) = match born {
            Some(id) => (id, vec![self.world.store.get(id).species as f64]),
            None => (0, vec![]),
        };
        Ok(self
            .world
            .next_entry("birth", id, Partner::Update, Q_NEW_GEOMETRY, payload))
    }

    /// Event-driven stochastic collision attempt (t_sc): cell rejection,
    /// pair rejection, then a momentum/energy conserving exchange; both
    /// partners go to the top of the queue with (t, 0, 1).
    fn process_stochastic_collision_event(&mut self, t: f64) -> Result<EventLogEntry> {
        let Backend::Ballistic { dsmc: Some(state) } = &mut self.backend else {
            return Err(Error::fault("stochastic collision without DSMC state"));
        };
        let mut collided: Option<(ParticleId, ParticleId)> = None;
        if let Some(cell) = dsmc::select_cell_rejection(
            state,
            &self.world.grid,
            &self.world.store,
            &mut self.world.clock.rng,
        ) {
            if let Some((i, j)) = dsmc::select_pair_rejection(
                state,
                &self.world.grid,
                &self.world.store,
                cell,
                &mut self.world.clock.rng,
            ) {
                edmd::advance_ballistic(self.world.store.get_mut(i), t)?;
                edmd::advance_ballistic(self.world.store.get_mut(j), t)?;
                let mass = self.world.species.spec(state.params.species).mass;
                dsmc::process_stochastic_collision(
                    &mut self.world.store,
                    self.world.domain.dim,
                    i,
                    j,
                    mass,
                    mass,
                    &mut self.world.clock.rng,
                )?;
                state.collisions += 1;
                self.world.stats.sc_collisions += 1;
                self.world.yank(i, t)?;
                self.world.yank(j, t)?;
                self.world.requeue_update(i, t, Q_VELOCITY_CHANGED)?;
                self.world.requeue_update(j, t, Q_VELOCITY_CHANGED)?;
                collided = Some((i, j));
            }
        }
        let rate = state.attempt_rate();
        let next = dsmc::next_stochastic_collision_time(&mut self.world.clock.rng, t, rate);
        self.world
            .external
            .set(ExternalKind::StochasticCollision, next);
        let entry = match collided {
            Some((i, j)) => {
                let vi = self.world.store.get(i).vel;
                let vj = self.world.store.get(j).vel;
                let mut payload = Vec::new();
                payload.extend_from_slice(&vi[..self.world.domain.dim]);
                payload.extend_from_slice(&vj[..self.world.domain.dim]);
                self.world
                    .next_entry("sc", i, Partner::Pair(j), Q_VELOCITY_CHANGED, payload)
            }
            None => self.world.next_entry("sc", 0, Partner::Update, 0, vec![]),
        };
        Ok(entry)
    }

    /// Time-step event: body-force kick, synchronous propagation of the
    /// time-driven particles, reservoir insertion, per-cell stochastic
    /// collisions, and (on cadence) mask refresh plus reclassification.
    fn process_time_step(&mut self, t: f64) -> Result<EventLogEntry> {
        let Backend::Ballistic { dsmc: Some(_) } = &self.backend else {
            return Err(Error::fault("time-step event without DSMC state"));
        };
        self.world.stats.time_steps += 1;
        self.world.steps_since_refresh += 1;

        let (dt, accel, delta, mass, radius, reservoir) = {
            let state = self.backend.dsmc().unwrap();
            let spec = self.world.species.spec(state.params.species);
            (
                state.params.dt,
                state.params.body_accel,
                state.params.species,
                spec.mass,
                0.5 * spec.diameter,
                state.params.reservoir,
            )
        };

        // Body-force kick: time-driven particles take it as part of the
        // step; event-driven ones are advanced, kicked, and invalidated.
        if accel != [0.0; 3] {
            let ids: Vec<ParticleId> = self.world.store.ids().collect();
            for id in ids {
                match self.world.store.get(id).mode {
                    Mode::TimeDriven => {
                        let p = self.world.store.get_mut(id);
                        for k in 0..self.world.domain.dim {
                            p.vel[k] += accel[k] * dt;
                        }
                    }
                    Mode::EventDriven => {
                        edmd::advance_ballistic(self.world.store.get_mut(id), t)?;
                        {
                            let p = self.world.store.get_mut(id);
                            for k in 0..self.world.domain.dim {
                                p.vel[k] += accel[k] * dt;
                            }
                        }
                        self.world.yank(id, t)?;
                        self.world.requeue_update(id, t, Q_VELOCITY_CHANGED)?;
                    }
                }
            }
        }

        // Propagate the time-driven particles by dt (walls included) and
        // re-bin; particles leaving through open faces disappear.
        let td_ids: Vec<ParticleId> = self
            .world
            .store
            .iter()
            .filter(|(_, p)| p.mode == Mode::TimeDriven)
            .map(|(id, _)| id)
            .collect();
        let mut outflow = 0u64;
        let mut entered_ed: Vec<ParticleId> = Vec::new();
        for id in td_ids {
            let survived = {
                let p = self.world.store.get_mut(id);
                dsmc::td_propagate_particle(
                    &self.world.domain,
                    p,
                    radius,
                    mass,
                    dt,
                    &mut self.world.clock.rng,
                )
            };
            if !survived {
                self.world.grid.unlink(&mut self.world.store, id);
                self.world.store.remove(id);
                outflow += 1;
                continue;
            }
            self.world.grid.relocate(&mut self.world.store, id);
            let cell = self.world.store.get(id).cell;
            if self.world.grid.is_purely_external(cell) {
                self.world.grid.unlink(&mut self.world.store, id);
                self.world.store.remove(id);
                outflow += 1;
                continue;
            }
            if self.world.grid.is_event_driven(cell) {
                entered_ed.push(id);
            }
        }
        self.world.stats.outflow += outflow;

        // Reservoir insertion into ghost cells.
        let mut inserted = 0u32;
        if let Some(res) = reservoir {
            let state = match &self.backend {
                Backend::Ballistic { dsmc: Some(s) } => s,
                _ => unreachable!(),
            };
            inserted = dsmc::insert_reservoir_particles(
                &mut self.world.store,
                &mut self.world.grid,
                &self.world.domain,
                &state.params,
                &res,
                mass,
                t,
                &mut self.world.clock.rng,
            );
            self.world.stats.reservoir_insertions += inserted as u64;
            let fresh: Vec<ParticleId> = self
                .world
                .store
                .iter()
                .filter(|(_, p)| {
                    p.mode == Mode::TimeDriven
                        && p.time == t
                        && self.world.grid.is_event_driven(p.cell)
                })
                .map(|(id, _)| id)
                .collect();
            entered_ed.extend(fresh);
        }

        // TD -> ED conversion at step end for cell crossers.
        entered_ed.sort_unstable();
        entered_ed.dedup();
        for id in entered_ed {
            if !self.world.store.get(id).alive() {
                continue;
            }
            self.world.store.get_mut(id).mode = Mode::EventDriven;
            self.world.stats.reclass_to_ed += 1;
            self.world.requeue_update(id, t, Q_NEW_GEOMETRY)?;
        }

        // Stochastic collisions in time-driven cells: expected attempt
        // count lambda0 N (N-1) dt, fractional part Bernoulli.
        let mut step_collisions = 0u64;
        {
            let state = match &mut self.backend {
                Backend::Ballistic { dsmc: Some(s) } => s,
                _ => unreachable!(),
            };
            if state.params.time_driven {
                for cell in 0..self.world.grid.cell_count() {
                    if self.world.grid.is_event_driven(cell)
                        || self.world.grid.is_purely_external(cell)
                    {
                        continue;
                    }
                    let n = self
                        .world
                        .grid
                        .species_count_in_cell(&self.world.store, cell, delta);
                    if n < 2 {
                        continue;
                    }
                    let expected = dsmc::cell_step_attempts(state.params.lambda0(), n, dt);
                    let attempts = dsmc::sample_count(&mut self.world.clock.rng, expected);
                    for _ in 0..attempts {
                        if let Some((i, j)) = dsmc::select_pair_rejection(
                            state,
                            &self.world.grid,
                            &self.world.store,
                            cell,
                            &mut self.world.clock.rng,
                        ) {
                            dsmc::process_stochastic_collision(
                                &mut self.world.store,
                                self.world.domain.dim,
                                i,
                                j,
                                mass,
                                mass,
                                &mut self.world.clock.rng,
                            )?;
                            state.collisions += 1;
                            step_collisions += 1;
                        }
                    }
                }
            }
        }
        self.world.stats.sc_collisions += step_collisions;

        // Mask refresh / reclassification on cadence.
        if self.world.steps_since_refresh >= self.world.opts.mask_refresh_steps {
            self.synchronize_all(t)?;
        }

        // Flow statistics sample.
        if let Some(flow) = &mut self.world.flow {
            flow.sample(&self.world.store, &self.world.grid, &self.world.species);
        }

        let next = t + dt;
        self.world.external.set(ExternalKind::TimeStep, Some(next));
        let payload = vec![outflow as f64, inserted as f64, step_collisions as f64];
        Ok(self.world.next_entry("step", 0, Partner::Update, 0, payload))
    }

    /// Synchronize every particle to `t`, refresh masks, re-apply the
    /// partition, reclassify cells, drop purely-external particles, and
    /// requeue every event-driven particle with an immediate update. This
    /// is the canonical state snapshots are taken from.
    pub fn synchronize_all(&mut self, t: f64) -> Result<()> {
        self.world.stats.syncs += 1;
        self.world.steps_since_refresh = 0;
        let ids: Vec<ParticleId> = self.world.store.ids().collect();
        match &mut self.backend {
            Backend::Ballistic { .. } => {
                for &id in &ids {
                    if self.world.store.get(id).mode == Mode::EventDriven {
                        edmd::advance_ballistic(self.world.store.get_mut(id), t)?;
                        self.world
                            .domain
                            .wrap(&mut self.world.store.get_mut(id).pos);
                        self.world.grid.relocate(&mut self.world.store, id);
                    }
                    // Time-driven particles already live at step boundaries.
                }
            }
            Backend::Diffusive { st } => {
                for &id in &ids {
                    if self.world.store.get(id).mode == Mode::TimeDriven {
                        continue; // cluster members carry cluster_time
                    }
                    if self.world.store.get(id).protection.is_some() {
                        fpkmc::single_or_pair_advance(
                            st,
                            &mut self.world.store,
                            &mut self.world.grid,
                            &self.world.domain,
                            &self.world.species,
                            &mut self.world.clock.rng,
                            id,
                            t,
                        )?;
                    } else {
                        self.world.store.get_mut(id).time = t;
                    }
                }
                st.refresh_scan_bound();
            }
        }
        // Masks and partition.
        self.world.grid.refresh_species_bits(&self.world.store);
        if let Some(spec) = self.world.grid.partition_spec() {
            self.world.grid.partition_domain(spec)?;
        }
        // Remove anything stranded in purely external cells.
        let stranded: Vec<ParticleId> = self
            .world
            .store
            .iter()
            .filter(|(_, p)| self.world.grid.is_purely_external(p.cell))
            .map(|(id, _)| id)
            .collect();
        for id in stranded {
            if self.world.queue.contains(id) {
                self.world.queue.cancel(id)?;
            }
            self.world.grid.unlink(&mut self.world.store, id);
            self.world.store.remove(id);
            self.world.stats.outflow += 1;
        }
        // Reclassify (SEDMD) and refresh rate bookkeeping.
        if let Backend::Ballistic { dsmc: Some(state) } = &mut self.backend {
            let before = self.world.store.len();
            let ed_cells = dsmc::classify_cells_ed_td(
                &mut self.world.grid,
                &self.world.domain,
                state.params.species,
                state.params.time_driven,
            );
            state.ed_cells = ed_cells;
            let ids: Vec<ParticleId> = self.world.store.ids().collect();
            for id in ids {
                let p = self.world.store.get(id);
                if p.species != state.params.species {
                    continue;
                }
                let in_ed = self.world.grid.is_event_driven(p.cell);
                match (p.mode, in_ed) {
                    (Mode::TimeDriven, true) => {
                        self.world.store.get_mut(id).mode = Mode::EventDriven;
                        self.world.stats.reclass_to_ed += 1;
                    }
                    (Mode::EventDriven, false) => {
                        if self.world.queue.contains(id) {
                            self.world.yank(id, t)?;
                        }
                        if self.world.store.get(id).neighborhood.is_some() {
                            self.world.nnl.destroy(&mut self.world.store, id);
                        }
                        self.world.store.get_mut(id).mode = Mode::TimeDriven;
                        self.world.store.get_mut(id).event = EventRecord::invalid();
                        self.world.stats.reclass_to_td += 1;
                    }
                    _ => {}
                }
            }
            debug_assert_eq!(
                before,
                self.world.store.len(),
                "reclassification lost particles"
            );
            state.refresh_n_max(&self.world.grid, &self.world.store);
            let rate = state.attempt_rate();
            let next = dsmc::next_stochastic_collision_time(&mut self.world.clock.rng, t, rate);
            self.world
                .external
                .set(ExternalKind::StochasticCollision, next);
        }
        if let Backend::Diffusive { st } = &mut self.backend {
            st.cluster_time = st.cluster_time.max(t);
        }
        // Re-initialize event processing: every event-driven particle gets
        // an immediate update event.
        let ids: Vec<ParticleId> = self.world.store.ids().collect();
        for id in ids {
            if self.world.store.get(id).mode == Mode::EventDriven {
                if self.world.queue.contains(id) {
                    self.world.queue.cancel(id)?;
                }
                self.world.store.get_mut(id).event = EventRecord::update_at(t, Q_NEW_GEOMETRY);
                self.world.queue.schedule(id, t)?;
            }
        }
        if self.world.opts.invariant_checks {
            self.world.grid.check_counts(&self.world.store)?;
        }
        Ok(())
    }
}
