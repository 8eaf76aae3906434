//! Driver-level integration tests: oracle equivalence against a brute-force
//! reference, determinism, conservation, synchronization semantics, and the
//! hybrid/diffusive backend basics at small scale.

use aed_core::config::SimConfig;
use aed_core::driver::{EventLogEntry, Sim};
use aed_core::model::{overlap_distance, Mode};
use aed_core::output::format_entry;
use aed_core::vecmath::{norm_sq, Vector};

mod common;
use common::reference::RefEdmd;

#[test]
fn reference_engine_self_check() {
    common::reference::self_check();
}

fn edmd_config(n: usize, side: f64, cells: usize, seed: u64) -> String {
    format!(
        r#"
[simulation]
backend = "edmd"
dimension = 3
seed = {seed}

[domain]
lengths = [{side}, {side}, {side}]
boundaries = ["periodic", "periodic", "periodic", "periodic", "periodic", "periodic"]

[grid]
cells = [{cells}, {cells}, {cells}]

[[species]]
name = "A"
diameter = 1.0
count = {n}

[interactions]
matrix = [[true]]
"#
    )
}

fn run_collisions(sim: &mut Sim, target: usize) -> Vec<(f64, u32, u32)> {
    let mut out = Vec::new();
    while out.len() < target {
        let entry = sim.step().expect("step").expect("events left");
        if entry.kind == "col" {
            let j = match entry.partner {
                aed_core::events::Partner::Pair(j) => j,
                _ => unreachable!(),
            };
            let (a, b) = if entry.particle < j {
                (entry.particle, j)
            } else {
                (j, entry.particle)
            };
            out.push((entry.time, a, b));
        }
    }
    out
}

#[test]
fn two_sphere_head_on_first_collision_time() {
    let cfg = SimConfig::parse(&edmd_config(2, 12.0, 6, 1).replace(
        "count = 2",
        "positions = [[3.0, 6.0, 6.0], [9.0, 6.0, 6.0]]",
    ))
    .unwrap();
    let mut sim = cfg.build().unwrap();
    sim.world.store.get_mut(1).vel = [1.0, 0.0, 0.0];
    sim.world.store.get_mut(2).vel = [-1.0, 0.0, 0.0];
    // Gap 6 - 1 = 5, closing speed 2: contact at t = 2.5.
    let cols = run_collisions(&mut sim, 1);
    assert_eq!(cols.len(), 1);
    assert!((cols[0].0 - 2.5).abs() < 1e-12, "t = {}", cols[0].0);
    assert_eq!((cols[0].1, cols[0].2), (1, 2));
    // Velocities swapped.
    assert_eq!(sim.world.store.get(1).vel, [-1.0, 0.0, 0.0]);
    assert_eq!(sim.world.store.get(2).vel, [1.0, 0.0, 0.0]);
}

#[test]
fn engine_matches_brute_force_reference_for_n8() {
    // Full-engine oracle equivalence: identical collision sequence (pairs)
    // with times to 1e-10 relative, over 2000 events.
    let cfg = SimConfig::parse(&edmd_config(8, 6.0, 6, 20260810)).unwrap();
    let mut sim = cfg.build().unwrap();
    let mut reference = RefEdmd::from_sim(&sim);
    let events = 2000;
    let engine = run_collisions(&mut sim, events);
    let brute = reference.run(events);
    for (k, (e, b)) in engine.iter().zip(&brute).enumerate() {
        assert_eq!((e.1, e.2), (b.1, b.2), "pair mismatch at event {k}: {e:?} vs {b:?}");
        let tol = 1e-10 * b.0.abs().max(1.0);
        assert!((e.0 - b.0).abs() <= tol, "time mismatch at {k}: {} vs {}", e.0, b.0);
    }
}

#[test]
fn nnl_on_and_off_produce_identical_collision_sequences() {
    let base = edmd_config(8, 6.0, 6, 4242);
    let with_nnl = base.replace("count = 8", "count = 8\nuse_nnl = true");
    let mut sim_a = SimConfig::parse(&base).unwrap().build().unwrap();
    let mut sim_b = SimConfig::parse(&with_nnl).unwrap().build().unwrap();
    let a = run_collisions(&mut sim_a, 1500);
    let b = run_collisions(&mut sim_b, 1500);
    for (k, (x, y)) in a.iter().zip(&b).enumerate() {
        assert_eq!((x.1, x.2), (y.1, y.2), "pair mismatch at {k}");
        assert!((x.0 - y.0).abs() <= 1e-9 * x.0.max(1.0), "time mismatch at {k}");
    }
    assert!(sim_b.world.stats.nnl_rebuilds > 0, "NNL path exercised");
}

#[test]
fn fixed_seed_runs_are_byte_identical() {
    let text = edmd_config(20, 8.0, 8, 99);
    let collect = |_: &str| -> Vec<String> {
        let cfg = SimConfig::parse(&text).unwrap();
        let mut sim = cfg.build().unwrap();
        let mut lines = Vec::new();
        for _ in 0..5000 {
            let e = sim.step().unwrap().unwrap();
            lines.push(format_entry(&e));
        }
        lines
    };
    let a = collect("a");
    let b = collect("b");
    assert_eq!(a, b);
}

#[test]
fn momentum_and_energy_conserved_over_many_events() {
    let cfg = SimConfig::parse(&edmd_config(60, 8.0, 8, 5)).unwrap();
    let mut sim = cfg.build().unwrap();
    let p0 = sim.world.total_momentum();
    let e0 = sim.world.total_kinetic_energy();
    for _ in 0..100_000 {
        sim.step().unwrap().unwrap();
    }
    let p1 = sim.world.total_momentum();
    let e1 = sim.world.total_kinetic_energy();
    let pscale = (e0 * 2.0 * 60.0).sqrt();
    for k in 0..3 {
        assert!(
            (p1[k] - p0[k]).abs() < 1e-10 * pscale,
            "momentum drift on axis {k}: {} -> {}",
            p0[k],
            p1[k]
        );
    }
    assert!(((e1 - e0) / e0).abs() < 1e-10, "energy drift {e0} -> {e1}");
    assert!(sim.world.stats.collisions > 10_000);
}

#[test]
fn no_overlaps_after_many_events() {
    let cfg = SimConfig::parse(&edmd_config(40, 7.0, 7, 17)).unwrap();
    let mut sim = cfg.build().unwrap();
    for _ in 0..30_000 {
        sim.step().unwrap().unwrap();
    }
    // Bring everyone to a common time and scan all pairs.
    let t = sim.world.clock.time;
    sim.synchronize_all(t).unwrap();
    let ids: Vec<u32> = sim.world.store.ids().collect();
    for (n, &i) in ids.iter().enumerate() {
        for &j in ids.iter().skip(n + 1) {
            let d = overlap_distance(
                &sim.world.domain,
                &sim.world.store.get(i).pos,
                &sim.world.store.get(j).pos,
            );
            assert!(d >= 1.0 * (1.0 - 1e-9), "overlap {i},{j}: d = {d}");
        }
    }
}

#[test]
fn specular_walls_conserve_energy_and_contain_particles() {
    let text = edmd_config(30, 8.0, 8, 23).replace(
        "boundaries = [\"periodic\", \"periodic\", \"periodic\", \"periodic\", \"periodic\", \"periodic\"]",
        "boundaries = [\"periodic\", \"periodic\", \"wall\", \"wall\", \"wall\", \"wall\"]",
    );
    let cfg = SimConfig::parse(&text).unwrap();
    let mut sim = cfg.build().unwrap();
    let e0 = sim.world.total_kinetic_energy();
    for _ in 0..40_000 {
        sim.step().unwrap().unwrap();
    }
    let e1 = sim.world.total_kinetic_energy();
    assert!(((e1 - e0) / e0).abs() < 1e-10, "{e0} vs {e1}");
    assert!(sim.world.stats.wall_reflections > 100);
    for (_, p) in sim.world.store.iter() {
        assert!(p.pos[1] >= 0.5 - 1e-9 && p.pos[1] <= 7.5 + 1e-9);
        assert!(p.pos[2] >= 0.5 - 1e-9 && p.pos[2] <= 7.5 + 1e-9);
    }
}

#[test]
fn synchronize_is_idempotent_and_preserves_dynamics() {
    let cfg = SimConfig::parse(&edmd_config(12, 6.0, 6, 31)).unwrap();
    let mut sim = cfg.build().unwrap();
    for _ in 0..2000 {
        sim.step().unwrap().unwrap();
    }
    let t = sim.world.clock.time;
    sim.synchronize_all(t).unwrap();
    let pos_a: Vec<Vector> = sim.world.store.iter().map(|(_, p)| p.pos).collect();
    sim.synchronize_all(t).unwrap();
    let pos_b: Vec<Vector> = sim.world.store.iter().map(|(_, p)| p.pos).collect();
    assert_eq!(pos_a, pos_b, "second synchronization moved particles");
    // Post-sync: every particle advanced to t.
    for (_, p) in sim.world.store.iter() {
        assert_eq!(p.time, t);
    }
}

#[test]
fn tethered_pair_stays_within_range() {
    let text = format!(
        r#"
[simulation]
backend = "edmd"
dimension = 3
seed = 8

[domain]
lengths = [12.0, 12.0, 12.0]
boundaries = ["periodic", "periodic", "periodic", "periodic", "periodic", "periodic"]

[grid]
cells = [6, 6, 6]

[[species]]
name = "b1"
diameter = 1.0
positions = [[5.0, 6.0, 6.0]]

[[species]]
name = "b2"
diameter = 1.0
positions = [[6.2, 6.0, 6.0]]

[interactions]
matrix = [[true, true], [true, true]]

[[pair_rules]]
species = ["b1", "b2"]
kind = "tether"
range = 1.6
"#
    );
    let cfg = SimConfig::parse(&text).unwrap();
    let mut sim = cfg.build().unwrap();
    sim.world.store.get_mut(1).vel = [-0.7, 0.4, 0.1];
    sim.world.store.get_mut(2).vel = [0.9, -0.2, 0.3];
    for _ in 0..20_000 {
        sim.step().unwrap().unwrap();
    }
    assert!(sim.world.stats.tether_events > 10, "tether exercised");
    let t = sim.world.clock.time;
    sim.synchronize_all(t).unwrap();
    let d = overlap_distance(
        &sim.world.domain,
        &sim.world.store.get(1).pos,
        &sim.world.store.get(2).pos,
    );
    assert!(d <= 1.6 + 1e-9, "bond over-stretched: {d}");
    assert!(d >= 1.0 - 1e-9, "bond interpenetrated: {d}");
}

// ---- SEDMD ----

fn sedmd_config(solvent: usize, seed: u64) -> String {
    format!(
        r#"
[simulation]
backend = "sedmd"
dimension = 3
seed = {seed}

[domain]
lengths = [8.0, 8.0, 8.0]
boundaries = ["periodic", "periodic", "periodic", "periodic", "periodic", "periodic"]

[grid]
cells = [8, 8, 8]
mask_refresh_steps = 10

[[species]]
name = "solute"
diameter = 1.0
mass = 5.0
positions = [[4.0, 4.0, 4.0]]

[[species]]
name = "gas"
diameter = 0.4
count = {solvent}

[interactions]
matrix = [[true, true], [true, false]]

[dsmc]
species = "gas"
dt = 0.05

[initial]
arrangement = "uniform"
"#
    )
}

#[test]
fn sedmd_hybrid_runs_with_conserved_particle_count() {
    let cfg = SimConfig::parse(&sedmd_config(600, 12)).unwrap();
    let mut sim = cfg.build().unwrap();
    let n0 = sim.world.store.len();
    for _ in 0..60_000 {
        sim.step().unwrap().unwrap();
    }
    assert_eq!(sim.world.store.len(), n0, "particle count conserved");
    assert_eq!(sim.world.stats.delta_delta_collisions, 0);
    assert!(sim.world.stats.sc_collisions > 100, "stochastic collisions ran");
    assert!(
        sim.world.stats.reclass_to_ed + sim.world.stats.reclass_to_td > 0,
        "reclassification exercised"
    );
    assert!(sim.world.stats.collisions > 0, "solute-gas collisions happened");
    // Momentum conserved across the hybrid.
    let p = sim.world.total_momentum();
    for k in 0..3 {
        assert!(p[k].abs() < 1e-8, "momentum drift axis {k}: {}", p[k]);
    }
}

#[test]
fn pure_dsmc_gas_equilibrates_to_maxwell() {
    // No solutes: every cell is time-driven, collisions happen at step
    // events only; component variance converges to kT/m.
    let text = sedmd_config(800, 77).replace(
        "positions = [[4.0, 4.0, 4.0]]",
        "count = 0",
    );
    let cfg = SimConfig::parse(&text).unwrap();
    let mut sim = cfg.build().unwrap();
    // Kick the gas out of equilibrium: all speeds equal, random directions.
    let ids: Vec<u32> = sim.world.store.ids().collect();
    for &id in &ids {
        let dir = {
            let p = sim.world.store.get(id);
            let n = norm_sq(&p.vel, 3).sqrt().max(1e-12);
            [p.vel[0] / n, p.vel[1] / n, p.vel[2] / n]
        };
        sim.world.store.get_mut(id).vel = [dir[0] * 1.2, dir[1] * 1.2, dir[2] * 1.2];
    }
    let e_per = 0.5 * 1.2f64 * 1.2; // per particle, mass 1
    let t_expect = 2.0 * e_per / 3.0; // equipartition
    for _ in 0..40_000 {
        sim.step().unwrap().unwrap();
    }
    assert!(sim.world.stats.sc_collisions as usize > 4 * ids.len());
    let vx: Vec<f64> = sim.world.store.iter().map(|(_, p)| p.vel[0]).collect();
    let mean = vx.iter().sum::<f64>() / vx.len() as f64;
    let var = vx.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vx.len() as f64;
    assert!(
        (var - t_expect).abs() < 0.1 * t_expect,
        "component variance {var} vs {t_expect}"
    );
}

// ---- FPKMC ----

fn fpkmc_two_config(seed: u64) -> String {
    format!(
        r#"
[simulation]
backend = "fpkmc"
dimension = 3
seed = {seed}

[domain]
lengths = [3.0, 3.0, 3.0]
boundaries = ["periodic", "periodic", "periodic", "periodic", "periodic", "periodic"]

[grid]
cells = [3, 3, 3]

[[species]]
name = "A"
diameter = 1.0
diffusion = 0.5
positions = [[0.75, 0.75, 0.75]]

[[species]]
name = "B"
diameter = 1.0
diffusion = 0.5
positions = [[2.25, 2.25, 2.25]]

[interactions]
matrix = [[false, true], [true, false]]

[[pair_rules]]
species = ["A", "B"]
kind = "annihilate"
"#
    )
}

#[test]
fn fpkmc_two_particles_eventually_react() {
    let cfg = SimConfig::parse(&fpkmc_two_config(3)).unwrap();
    let mut sim = cfg.build().unwrap();
    let mut reacted = false;
    for _ in 0..200_000 {
        match sim.step().unwrap() {
            Some(e) => {
                if e.kind == "react" {
                    reacted = true;
                    break;
                }
            }
            None => break,
        }
    }
    assert!(reacted, "annihilation never happened");
    assert_eq!(sim.world.store.len(), 0);
    let st = sim.backend.fpkmc().unwrap();
    assert_eq!(st.deaths, 2);
}

#[test]
fn fpkmc_reaction_time_is_seed_deterministic() {
    let run = |seed: u64| -> Vec<String> {
        let cfg = SimConfig::parse(&fpkmc_two_config(seed)).unwrap();
        let mut sim = cfg.build().unwrap();
        let mut lines = Vec::new();
        for _ in 0..50_000 {
            match sim.step().unwrap() {
                Some(e) => {
                    let stop = e.kind == "react";
                    lines.push(format_entry(&e));
                    if stop {
                        break;
                    }
                }
                None => break,
            }
        }
        lines
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11), run(12), "different seeds explore different paths");
}

#[test]
fn fpkmc_decay_chain_counts_balance() {
    let text = r#"
[simulation]
backend = "fpkmc"
dimension = 3
seed = 5
max_events = 40000

[domain]
lengths = [6.0, 6.0, 6.0]
boundaries = ["periodic", "periodic", "periodic", "periodic", "periodic", "periodic"]

[grid]
cells = [6, 6, 6]

[[species]]
name = "parent"
diameter = 0.5
diffusion = 0.3
decay_rate = 0.5
decay_products = ["child"]
count = 30

[[species]]
name = "child"
diameter = 0.5
diffusion = 0.6
count = 0

[interactions]
matrix = [[false, false], [false, false]]

[initial]
arrangement = "uniform"
"#;
    let cfg = SimConfig::parse(text).unwrap();
    let mut sim = cfg.build().unwrap();
    let mut decays = 0u64;
    for _ in 0..40_000 {
        match sim.step().unwrap() {
            Some(e) => {
                if e.kind == "decay" {
                    decays += 1;
                }
            }
            None => break,
        }
        let parents = sim
            .world
            .store
            .iter()
            .filter(|(_, p)| p.species == 0)
            .count();
        if parents == 0 {
            break;
        }
    }
    assert_eq!(decays, 30, "every parent decays exactly once");
    let children = sim
        .world
        .store
        .iter()
        .filter(|(_, p)| p.species == 1)
        .count();
    assert_eq!(children, 30);
    let st = sim.backend.fpkmc().unwrap();
    // births - deaths = net particle change: 30 born, 30 died, net 0.
    assert_eq!(st.births, 30);
    assert_eq!(st.deaths, 30);
}

#[test]
fn fpkmc_births_accumulate_at_configured_rate() {
    let text = r#"
[simulation]
backend = "fpkmc"
dimension = 3
seed = 21
max_time = 50.0

[domain]
lengths = [8.0, 8.0, 8.0]
boundaries = ["periodic", "periodic", "periodic", "periodic", "periodic", "periodic"]

[grid]
cells = [8, 8, 8]

[[species]]
name = "A"
diameter = 0.4
diffusion = 0.5
birth_rate = 2.0
count = 0

[interactions]
matrix = [[false]]
"#;
    let cfg = SimConfig::parse(text).unwrap();
    let mut sim = cfg.build().unwrap();
    let mut births = 0u64;
    let mut last_t = 0.0;
    loop {
        match sim.step().unwrap() {
            Some(e) => {
                if e.time > 50.0 {
                    break;
                }
                last_t = e.time;
                if e.kind == "birth" {
                    births += 1;
                }
            }
            None => break,
        }
    }
    assert!(last_t > 49.0);
    // Poisson(rate 2 * 50): mean 100, sd 10.
    assert!((40..=160).contains(&(births as i64)), "births {births}");
    assert_eq!(sim.world.store.len() as u64, births);
}

#[test]
fn queue_size_matches_event_driven_population() {
    let cfg = SimConfig::parse(&sedmd_config(300, 41)).unwrap();
    let mut sim = cfg.build().unwrap();
    for _ in 0..20_000 {
        sim.step().unwrap().unwrap();
    }
    let ed_count = sim
        .world
        .store
        .iter()
        .filter(|(_, p)| p.mode == Mode::EventDriven)
        .count();
    assert_eq!(sim.world.queue.len(), ed_count);
}

#[test]
fn event_times_are_non_decreasing() {
    let cfg = SimConfig::parse(&sedmd_config(200, 51)).unwrap();
    let mut sim = cfg.build().unwrap();
    let mut last = 0.0;
    let mut entries: Vec<EventLogEntry> = Vec::new();
    for _ in 0..30_000 {
        let e = sim.step().unwrap().unwrap();
        assert!(
            e.time >= last - 1e-12,
            "time regressed: {} after {}",
            e.time,
            last
        );
        last = e.time;
        entries.push(e);
    }
    // Sequence numbers dense and ordered.
    for (k, e) in entries.iter().enumerate() {
        assert_eq!(e.seq, k as u64);
    }
}
