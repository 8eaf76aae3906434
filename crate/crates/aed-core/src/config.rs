//! TOML run configuration: parsing with full validation (unknown keys are
//! errors, every constraint names its invariant), rendering for the
//! round-trip contract, and construction of a ready-to-run simulation.

use crate::driver::{Backend, RunOptions, RunStats, Sim, World};
use crate::dsmc::{DsmcParams, DsmcState, ReservoirParams};
use crate::events::{EventQueue, ExternalEventSource, ExternalKind};
use crate::fpkmc::{FpkmcParams, FpkmcState};
use crate::model::{
    BoundaryKind, Domain, FaceSpec, Mode, PairRule, ParticleStore, ReactionKind, SimulationClock,
    SpeciesId, SpeciesSpec, SpeciesTable,
};
use crate::nnl::NnlRegistry;
use crate::output::{FlowAccumulator, SnapshotData};
use crate::spatial::{CellGrid, PartitionSpec};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Edmd,
    Sedmd,
    Fpkmc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub backend: BackendKind,
    pub dimension: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_events: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_time: Option<f64>,
    /// Synchronization cadence (EDMD/FPKMC); SEDMD synchronizes on the
    /// mask-refresh step cadence instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync_every: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub lengths: Vec<f64>,
    /// Per face, `2*axis + hi`: 2*dimension entries.
    pub boundaries: Vec<BoundaryKind>,
    /// Thermal wall temperatures per face; 0 = specular/adiabatic wall.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_temperatures: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub cells: Vec<usize>,
    #[serde(default = "default_one")]
    pub boundary_width: usize,
    #[serde(default = "default_one")]
    pub ghost_width: usize,
    #[serde(default = "default_refresh")]
    pub mask_refresh_steps: u32,
}

fn default_one() -> usize {
    1
}
fn default_refresh() -> u32 {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesSection {
    pub name: String,
    pub diameter: f64,
    #[serde(default = "default_mass")]
    pub mass: f64,
    #[serde(default)]
    pub diffusion: f64,
    #[serde(default)]
    pub decay_rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub decay_products: Vec<String>,
    #[serde(default)]
    pub birth_rate: f64,
    #[serde(default)]
    pub use_nnl: bool,
    /// Initial population (ignored when explicit positions are given).
    #[serde(default)]
    pub count: usize,
    /// Explicit initial positions (chains, fixed seeds).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positions: Vec<Vec<f64>>,
    /// Initial Maxwell-Boltzmann temperature for ballistic species.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

fn default_mass() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRuleSection {
    pub species: Vec<String>,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub products: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsmcSection {
    pub species: String,
    pub dt: f64,
    /// 0 = derive from temperature: 5 sqrt(k T / m).
    #[serde(default)]
    pub v_rel_max: f64,
    /// 0 = hard-sphere kinetic theory prefactor.
    #[serde(default)]
    pub lambda0: f64,
    #[serde(default = "default_true")]
    pub time_driven: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_accel: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reservoir: Option<ReservoirSection>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirSection {
    pub density: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpkmcSection {
    #[serde(default = "default_mu_p")]
    pub mu_p: f64,
    #[serde(default = "default_mu_p_max")]
    pub mu_p_max: f64,
    #[serde(default = "default_theta_pair")]
    pub theta_pair: f64,
    #[serde(default = "default_h_hop")]
    pub h_hop_frac: f64,
    #[serde(default = "default_cluster_step")]
    pub cluster_step_frac: f64,
}

fn default_mu_p() -> f64 {
    1.5
}
fn default_mu_p_max() -> f64 {
    5.0
}
fn default_theta_pair() -> f64 {
    0.1
}
fn default_h_hop() -> f64 {
    0.05
}
fn default_cluster_step() -> f64 {
    0.1
}

impl Default for FpkmcSection {
    fn default() -> Self {
        FpkmcSection {
            mu_p: default_mu_p(),
            mu_p_max: default_mu_p_max(),
            theta_pair: default_theta_pair(),
            h_hop_frac: default_h_hop(),
            cluster_step_frac: default_cluster_step(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    /// "lattice" places particles on a cubic lattice; "uniform" scatters
    /// them uniformly over non-external cells (ideal-gas species).
    #[serde(default = "default_arrangement")]
    pub arrangement: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_true")]
    pub zero_momentum: bool,
}

fn default_arrangement() -> String {
    "lattice".into()
}
fn default_temperature() -> f64 {
    1.0
}

impl Default for InitialSection {
    fn default() -> Self {
        InitialSection {
            arrangement: default_arrangement(),
            temperature: default_temperature(),
            zero_momentum: default_true(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Sample cell averages every n time-step/sync events (0 = off).
    #[serde(default)]
    pub cell_averages: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            cell_averages: false,
        }
    }
}

/// Symmetric N_s x N_s interaction table, its own table so it can follow
/// the species array in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionSection {
    pub matrix: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub simulation: SimulationSection,
    pub domain: DomainSection,
    pub grid: GridSection,
    pub species: Vec<SpeciesSection>,
    pub interactions: InteractionSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pair_rules: Vec<PairRuleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsmc: Option<DsmcSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fpkmc: Option<FpkmcSection>,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl SimConfig {
    /// Parse and validate. TOML errors carry line/column diagnostics;
    /// validation errors name the violated constraint.
    pub fn parse(text: &str) -> Result<SimConfig> {
        let cfg: SimConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    pub fn species_index(&self, name: &str) -> Result<SpeciesId> {
        self.species
            .iter()
            .position(|s| s.name == name)
            .map(|i| i as SpeciesId)
            .ok_or_else(|| Error::Config(format!("unknown species name '{name}'")))
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.simulation.dimension;
        if dim != 2 && dim != 3 {
            return Err(Error::Config(format!("dimension must be 2 or 3, got {dim}")));
        }
        if self.domain.lengths.len() != dim {
            return Err(Error::Config(format!(
                "domain.lengths must have {dim} entries"
            )));
        }
        if self.domain.boundaries.len() != 2 * dim {
            return Err(Error::Config(format!(
                "domain.boundaries must have {} entries (2 per axis, lo/hi order)",
                2 * dim
            )));
        }
        if let Some(wt) = &self.domain.wall_temperatures {
            if wt.len() != 2 * dim {
                return Err(Error::Config(format!(
                    "domain.wall_temperatures must have {} entries",
                    2 * dim
                )));
            }
            for (f, &t) in wt.iter().enumerate() {
                if t < 0.0 || !t.is_finite() {
                    return Err(Error::Config(format!(
                        "wall temperature on face {f} must be finite and >= 0"
                    )));
                }
                if t > 0.0 && self.domain.boundaries[f] != BoundaryKind::Wall {
                    return Err(Error::Config(format!(
                        "thermal temperature set on non-wall face {f}"
                    )));
                }
            }
        }
        if self.grid.cells.len() != dim {
            return Err(Error::Config(format!("grid.cells must have {dim} entries")));
        }
        if self.species.is_empty() {
            return Err(Error::Config("at least one species required".into()));
        }
        // Build the table once for its own validation (symmetry, rates).
        let table = self.build_species_table()?;
        // Cell size must cover the largest interaction reach.
        let mut min_cell = f64::INFINITY;
        for k in 0..dim {
            min_cell = min_cell.min(self.domain.lengths[k] / self.grid.cells[k] as f64);
        }
        if table.max_reach() > min_cell {
            return Err(Error::Config(format!(
                "cell size {min_cell} is below the largest interaction reach {} \
                 (cells must be at least as large as the widest cutoff)",
                table.max_reach()
            )));
        }
        for s in &self.species {
            for p in &s.positions {
                if p.len() != dim {
                    return Err(Error::Config(format!(
                        "species {}: positions must have {dim} coordinates",
                        s.name
                    )));
                }
            }
        }
        match self.simulation.backend {
            BackendKind::Sedmd => {
                let d = self.dsmc.as_ref().ok_or_else(|| {
                    Error::Config("sedmd backend requires a [dsmc] section".into())
                })?;
                let delta = self.species_index(&d.species)?;
                if table.interacts(delta, delta) {
                    return Err(Error::Config(
                        "the DSMC species must not self-interact (I_dd must be false)".into(),
                    ));
                }
                if !(d.dt.is_finite() && d.dt > 0.0) {
                    return Err(Error::Config("dsmc.dt must be positive".into()));
                }
            }
            BackendKind::Fpkmc => {
                for (f, b) in self.domain.boundaries.iter().enumerate() {
                    if *b != BoundaryKind::Periodic {
                        return Err(Error::Config(format!(
                            "fpkmc requires fully periodic boundaries (face {f} is {b:?}); \
                             reflecting-wall propagators are not implemented"
                        )));
                    }
                }
                for r in &self.pair_rules {
                    if r.kind == "elastic" || r.kind == "tether" {
                        return Err(Error::Config(format!(
                            "pair rule '{}' is not available for diffusing species \
                             (reflective pair boundaries are reserved)",
                            r.kind
                        )));
                    }
                }
            }
            BackendKind::Edmd => {}
        }
        // Resolve pair-rule names and shapes.
        for r in &self.pair_rules {
            if r.species.len() != 2 {
                return Err(Error::Config(
                    "pair_rules.species must list exactly two species".into(),
                ));
            }
            let a = self.species_index(&r.species[0])?;
            let b = self.species_index(&r.species[1])?;
            if !table.interacts(a, b) {
                return Err(Error::Config(format!(
                    "pair rule given for non-interacting pair ({}, {})",
                    r.species[0], r.species[1]
                )));
            }
            match r.kind.as_str() {
                "elastic" | "annihilate" => {}
                "coalesce" => {
                    let p = r.product.as_ref().ok_or_else(|| {
                        Error::Config("coalesce rule needs a product species".into())
                    })?;
                    self.species_index(p)?;
                }
                "products" => {
                    for p in &r.products {
                        self.species_index(p)?;
                    }
                }
                "tether" => {
                    let range = r.range.ok_or_else(|| {
                        Error::Config("tether rule needs a range".into())
                    })?;
                    let cutoff = r
                        .cutoff
                        .unwrap_or_else(|| 0.5 * (self.diameter_of(a) + self.diameter_of(b)));
                    if range <= cutoff {
                        return Err(Error::Config(
                            "tether range must exceed the core cutoff".into(),
                        ));
                    }
                }
                other => {
                    return Err(Error::Config(format!("unknown pair rule kind '{other}'")));
                }
            }
        }
        match self.initial.arrangement.as_str() {
            "lattice" | "uniform" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown initial arrangement '{other}'"
                )))
            }
        }
        Ok(())
    }

    fn diameter_of(&self, s: SpeciesId) -> f64 {
        self.species[s as usize].diameter
    }

    fn build_species_table(&self) -> Result<SpeciesTable> {
        let mut specs = Vec::with_capacity(self.species.len());
        for s in &self.species {
            let decay_products = s
                .decay_products
                .iter()
                .map(|n| self.species_index(n))
                .collect::<Result<Vec<_>>>()?;
            specs.push(SpeciesSpec {
                name: s.name.clone(),
                diameter: s.diameter,
                mass: s.mass,
                diffusion: s.diffusion,
                decay_rate: s.decay_rate,
                decay_products,
                birth_rate: s.birth_rate,
                use_nnl: s.use_nnl,
            });
        }
        let mut rules = Vec::new();
        for r in &self.pair_rules {
            let a = self.species_index(&r.species[0])?;
            let b = self.species_index(&r.species[1])?;
            let cutoff = r
                .cutoff
                .unwrap_or_else(|| 0.5 * (self.diameter_of(a) + self.diameter_of(b)));
            let kind = match r.kind.as_str() {
                "elastic" => ReactionKind::Elastic,
                "annihilate" => ReactionKind::Annihilate,
                "coalesce" => ReactionKind::Coalesce {
                    product: self.species_index(r.product.as_ref().unwrap())?,
                },
                "products" => ReactionKind::Products {
                    products: r
                        .products
                        .iter()
                        .map(|p| self.species_index(p))
                        .collect::<Result<Vec<_>>>()?,
                },
                "tether" => ReactionKind::Tether {
                    range: r.range.unwrap(),
                },
                other => return Err(Error::Config(format!("unknown pair rule '{other}'"))),
            };
            rules.push((a, b, PairRule { kind, cutoff }));
        }
        SpeciesTable::new(specs, self.interactions.matrix.clone(), rules)
    }

    fn build_domain(&self) -> Result<Domain> {
        let dim = self.simulation.dimension;
        let mut lengths = [1.0; 3];
        for k in 0..dim {
            lengths[k] = self.domain.lengths[k];
        }
        let mut faces = [FaceSpec::periodic(); 6];
        for f in 0..2 * dim {
            let temp = self
                .domain
                .wall_temperatures
                .as_ref()
                .map(|wt| wt[f])
                .filter(|&t| t > 0.0);
            faces[f] = FaceSpec {
                kind: self.domain.boundaries[f],
                temperature: temp,
            };
        }
        Domain::new(dim, lengths, faces)
    }

    fn partition_for(&self, domain: &Domain, grid: &CellGrid) -> Result<PartitionSpec> {
        let dim = domain.dim;
        let mut sim_lo = [0usize; 3];
        let mut sim_hi = grid.dims;
        let mut any_open = false;
        for axis in 0..dim {
            for hi in [false, true] {
                let face = 2 * axis + hi as usize;
                if domain.face(face).kind == BoundaryKind::Open {
                    any_open = true;
                    let w = self.grid.ghost_width;
                    if hi {
                        if sim_hi[axis] <= w + sim_lo[axis] {
                            return Err(Error::Config(format!(
                                "axis {axis}: not enough cells for a ghost layer of {w}"
                            )));
                        }
                        sim_hi[axis] -= w;
                    } else {
                        sim_lo[axis] += w;
                        if sim_lo[axis] >= sim_hi[axis] {
                            return Err(Error::Config(format!(
                                "axis {axis}: not enough cells for a ghost layer of {w}"
                            )));
                        }
                    }
                }
            }
        }
        let _ = any_open;
        Ok(PartitionSpec {
            sim_lo,
            sim_hi,
            w_boundary: self.grid.boundary_width,
            w_external: self.grid.ghost_width,
        })
    }

    /// Build a ready-to-run simulation: domain, grid, initial placement,
    /// backend state, and the initial event schedule.
    pub fn build(&self) -> Result<Sim> {
        self.validate()?;
        let domain = self.build_domain()?;
        let species = self.build_species_table()?;
        let mut cells = [1usize; 3];
        for k in 0..domain.dim {
            cells[k] = self.grid.cells[k];
        }
        let mut grid = CellGrid::new(&domain, cells)?;
        grid.partition_domain(self.partition_for(&domain, &grid)?)?;
        let mut clock = SimulationClock::new(self.simulation.seed);
        let mut store = ParticleStore::new();
        crate::setup::place_initial(
            self,
            &domain,
            &species,
            &grid,
            &mut store,
            &mut clock.rng,
        )?;
        for id in 1..=store.capacity() as u32 {
            if store.get(id).alive() {
                grid.insert_particle(&mut store, id);
            }
        }

        let nnl_mu = 1.3; // neighborhood scale; tunable via future config
        let nnl = NnlRegistry::new(nnl_mu, &species)?;
        let opts = RunOptions {
            max_events: self.simulation.max_events,
            max_time: self.simulation.max_time,
            sync_every: self.simulation.sync_every,
            mask_refresh_steps: self.grid.mask_refresh_steps,
            ..RunOptions::default()
        };
        let flow = self
            .output
            .cell_averages
            .then(|| FlowAccumulator::new(&grid, domain.dim));

        let backend = match self.simulation.backend {
            BackendKind::Edmd => Backend::Ballistic { dsmc: None },
            BackendKind::Sedmd => {
                let d = self.dsmc.as_ref().unwrap();
                let delta = self.species_index(&d.species)?;
                let spec = species.spec(delta);
                let temp = self.species[delta as usize]
                    .temperature
                    .unwrap_or(self.initial.temperature);
                let v_rel_max = if d.v_rel_max > 0.0 {
                    d.v_rel_max
                } else {
                    5.0 * (temp / spec.mass).sqrt()
                };
                let rate_per_pair_speed = if d.lambda0 > 0.0 {
                    d.lambda0 / v_rel_max
                } else {
                    DsmcParams::kinetic_theory_rate(domain.dim, spec.diameter, grid.cell_volume())
                };
                let mut body_accel = [0.0; 3];
                if let Some(a) = &d.body_accel {
                    for k in 0..domain.dim.min(a.len()) {
                        body_accel[k] = a[k];
                    }
                }
                Backend::Ballistic {
                    dsmc: Some(DsmcState::new(DsmcParams {
                        species: delta,
                        v_rel_max,
                        rate_per_pair_speed,
                        dt: d.dt,
                        time_driven: d.time_driven,
                        reservoir: d.reservoir.as_ref().map(|r| ReservoirParams {
                            density: r.density,
                            temperature: r.temperature,
                        }),
                        body_accel,
                    })),
                }
            }
            BackendKind::Fpkmc => {
                let f = self.fpkmc.clone().unwrap_or_default();
                Backend::Diffusive {
                    st: FpkmcState::new(FpkmcParams {
                        mu_p: f.mu_p,
                        mu_p_max: f.mu_p_max,
                        theta_pair: f.theta_pair,
                        h_hop_frac: f.h_hop_frac,
                        cluster_step_frac: f.cluster_step_frac,
                    }),
                }
            }
        };

        let world = World {
            domain,
            species,
            store,
            grid,
            queue: EventQueue::new(),
            external: ExternalEventSource::new(),
            clock,
            nnl,
            stats: RunStats::default(),
            opts,
            flow,
            seq: 0,
            steps_since_refresh: 0,
        };
        let mut sim = Sim { world, backend };
        // Canonical initialization: masks, classification, modes, and the
        // immediate update events.
        sim.synchronize_all(0.0)?;
        self.arm_externals(&mut sim, 0.0)?;
        Ok(sim)
    }

    fn arm_externals(&self, sim: &mut Sim, t: f64) -> Result<()> {
        if let Some(d) = &self.dsmc {
            sim.world
                .external
                .set(ExternalKind::TimeStep, Some(t + d.dt));
        }
        if let Some(every) = self.simulation.sync_every {
            sim.world.external.set(ExternalKind::Sync, Some(t + every));
        }
        let birth_rate = sim.world.species.total_birth_rate();
        if birth_rate > 0.0 {
            let next = t + sim.world.clock.rng.exp_time(birth_rate);
            sim.world.external.set(ExternalKind::Birth, Some(next));
        }
        Ok(())
    }

    /// Rebuild a simulation mid-run from a snapshot taken at a
    /// synchronization point. Geometry and parameters come from the config,
    /// dynamic state (positions, modes, generator, pending externals) from
    /// the snapshot; events are re-initialized exactly as the donor run did
    /// at that point.
    pub fn build_from_snapshot(&self, snap: &SnapshotData) -> Result<Sim> {
        self.validate()?;
        if snap.dim as usize != self.simulation.dimension {
            return Err(Error::Snapshot(format!(
                "snapshot dimension {} does not match config {}",
                snap.dim, self.simulation.dimension
            )));
        }
        if snap.n_species as usize != self.species.len() {
            return Err(Error::Snapshot(format!(
                "snapshot species count {} does not match config {}",
                snap.n_species,
                self.species.len()
            )));
        }
        let domain = self.build_domain()?;
        let species = self.build_species_table()?;
        let mut cells = [1usize; 3];
        for k in 0..domain.dim {
            cells[k] = self.grid.cells[k];
        }
        let mut grid = CellGrid::new(&domain, cells)?;
        grid.partition_domain(self.partition_for(&domain, &grid)?)?;

        let mut slots = Vec::with_capacity(snap.slots.len());
        for s in &snap.slots {
            match s {
                Some(p) => {
                    let mut particle =
                        crate::model::Particle::new(p.species, p.pos, p.vel);
                    particle.time = p.time;
                    particle.mode = if p.mode == 0 {
                        Mode::EventDriven
                    } else {
                        Mode::TimeDriven
                    };
                    slots.push(particle);
                }
                None => {
                    let mut dead = crate::model::Particle::new(0, [0.0; 3], [0.0; 3]);
                    dead.alive = false;
                    slots.push(dead);
                }
            }
        }
        let mut store = ParticleStore::from_parts(slots, snap.free.clone());
        for id in 1..=store.capacity() as u32 {
            if store.get(id).alive() {
                grid.insert_particle(&mut store, id);
            }
        }
        let mut clock = SimulationClock::new(0);
        clock.time = snap.time;
        clock.event_count = snap.event_count;
        clock.rng = crate::rng::SimRng::restore(snap.rng);

        let backend = match self.simulation.backend {
            BackendKind::Edmd => Backend::Ballistic { dsmc: None },
            BackendKind::Sedmd => {
                let d = self.dsmc.as_ref().unwrap();
                let delta = self.species_index(&d.species)?;
                let spec = species.spec(delta);
                let ds = snap.dsmc.as_ref().ok_or_else(|| {
                    Error::Snapshot("sedmd snapshot missing DSMC state".into())
                })?;
                let rate_per_pair_speed = if d.lambda0 > 0.0 {
                    d.lambda0 / ds.v_rel_max
                } else {
                    DsmcParams::kinetic_theory_rate(domain.dim, spec.diameter, grid.cell_volume())
                };
                let mut body_accel = [0.0; 3];
                if let Some(a) = &d.body_accel {
                    for k in 0..domain.dim.min(a.len()) {
                        body_accel[k] = a[k];
                    }
                }
                let mut state = DsmcState::new(DsmcParams {
                    species: delta,
                    v_rel_max: ds.v_rel_max,
                    rate_per_pair_speed,
                    dt: d.dt,
                    time_driven: d.time_driven,
                    reservoir: d.reservoir.as_ref().map(|r| ReservoirParams {
                        density: r.density,
                        temperature: r.temperature,
                    }),
                    body_accel,
                });
                state.speed_violations = ds.speed_violations;
                state.occupancy_violations = ds.occupancy_violations;
                state.collisions = ds.collisions;
                state.selections = ds.selections;
                Backend::Ballistic { dsmc: Some(state) }
            }
            BackendKind::Fpkmc => {
                let f = self.fpkmc.clone().unwrap_or_default();
                Backend::Diffusive {
                    st: FpkmcState::new(FpkmcParams {
                        mu_p: f.mu_p,
                        mu_p_max: f.mu_p_max,
                        theta_pair: f.theta_pair,
                        h_hop_frac: f.h_hop_frac,
                        cluster_step_frac: f.cluster_step_frac,
                    }),
                }
            }
        };

        let nnl = NnlRegistry::new(1.3, &species)?;
        let opts = RunOptions {
            max_events: self.simulation.max_events,
            max_time: self.simulation.max_time,
            sync_every: self.simulation.sync_every,
            mask_refresh_steps: self.grid.mask_refresh_steps,
            ..RunOptions::default()
        };
        let flow = self
            .output
            .cell_averages
            .then(|| FlowAccumulator::new(&grid, domain.dim));
        let world = World {
            domain,
            species,
            store,
            grid,
            queue: EventQueue::new(),
            external: ExternalEventSource::new(),
            clock,
            nnl,
            stats: RunStats::default(),
            opts,
            flow,
            seq: snap.seq,
            steps_since_refresh: snap.steps_since_refresh,
        };
        let mut sim = Sim { world, backend };
        sim.restore_schedule(snap)?;
        Ok(sim)
    }
}

impl Sim {
    /// Rebuild masks, classification, cluster membership, and the
    /// immediate-update queue exactly as the donor run's synchronization
    /// left them; restore pending externals verbatim (no generator draws).
    fn restore_schedule(&mut self, snap: &SnapshotData) -> Result<()> {
        let t = snap.time;
        self.world.grid.refresh_species_bits(&self.world.store);
        match &mut self.backend {
            Backend::Ballistic { dsmc: Some(state) } => {
                let ed = crate::dsmc::classify_cells_ed_td(
                    &mut self.world.grid,
                    &self.world.domain,
                    state.params.species,
                    state.params.time_driven,
                );
                state.ed_cells = ed;
                state.refresh_n_max(&self.world.grid, &self.world.store);
            }
            Backend::Ballistic { dsmc: None } | Backend::Diffusive { .. } => {
                for cell in 0..self.world.grid.cell_count() {
                    let ed = !self.world.grid.is_purely_external(cell);
                    self.world.grid.set_event_driven(cell, ed);
                }
            }
        }
        if let Backend::Diffusive { st } = &mut self.backend {
            st.cluster_time = t;
            st.td_members = self
                .world
                .store
                .iter()
                .filter(|(_, p)| p.mode == Mode::TimeDriven)
                .map(|(id, _)| id)
                .collect();
        }
        let ids: Vec<u32> = self.world.store.ids().collect();
        for id in ids {
            if self.world.store.get(id).mode == Mode::EventDriven {
                self.world.store.get_mut(id).event =
                    crate::events::EventRecord::update_at(t, crate::events::Q_NEW_GEOMETRY);
                self.world.queue.schedule(id, t)?;
            }
        }
        let kinds = [
            ExternalKind::TimeStep,
            ExternalKind::StochasticCollision,
            ExternalKind::Birth,
            ExternalKind::Sync,
        ];
        for (k, kind) in kinds.into_iter().enumerate() {
            self.world.external.set(kind, snap.externals[k]);
        }
        Ok(())
    }
}

// Re-export used by snapshot-based construction.
