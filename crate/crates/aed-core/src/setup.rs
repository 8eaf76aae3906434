//! Initial condition builders: cubic-lattice or uniform placement plus
//! Maxwell-Boltzmann velocities. Dense packing generation is out of scope;
//! lattice positions with random velocities cover the supported starts.

use crate::config::SimConfig;
use crate::model::{Domain, Mode, Particle, ParticleStore, SpeciesTable};
use crate::rng::SimRng;
use crate::spatial::CellGrid;
use crate::{Error, Result};

/// Cubic lattice sites covering the simulated region, in deterministic
/// row-major order.
pub fn lattice_sites(domain: &Domain, grid: &CellGrid, n: usize) -> Result<Vec<[f64; 3]>> {
    let dim = domain.dim;
    // Lattice constrained to non-external cells; find the covered box.
    let (lo, hi) = simulated_box(domain, grid);
    let mut span = [0.0; 3];
    for k in 0..dim {
        span[k] = hi[k] - lo[k];
    }
    let volume: f64 = (0..dim).map(|k| span[k]).product();
    let per_side = (n as f64 / volume).powf(1.0 / dim as f64);
    let mut counts = [1usize; 3];
    loop {
        for k in 0..dim {
            counts[k] = (span[k] * per_side).ceil() as usize;
        }
        let total: usize = (0..dim).map(|k| counts[k]).product();
        if total >= n {
            break;
        }
        // Rounding fell short; nudge the density up.
        return lattice_sites_scaled(domain, grid, n, per_side * 1.05);
    }
    let mut sites = Vec::with_capacity(n);
    let zmax = if dim == 3 { counts[2] } else { 1 };
    'fill: for iz in 0..zmax {
        for iy in 0..counts[1] {
            for ix in 0..counts[0] {
                let idx = [ix, iy, iz];
                let mut p = [0.0; 3];
                for k in 0..dim {
                    p[k] = lo[k] + (idx[k] as f64 + 0.5) * span[k] / counts[k] as f64;
                }
                sites.push(p);
                if sites.len() == n {
                    break 'fill;
                }
            }
        }
    }
    Ok(sites)
}

fn lattice_sites_scaled(
    domain: &Domain,
    grid: &CellGrid,
    n: usize,
    per_side: f64,
) -> Result<Vec<[f64; 3]>> {
    let dim = domain.dim;
    let (lo, hi) = simulated_box(domain, grid);
    let mut counts = [1usize; 3];
    for k in 0..dim {
        counts[k] = ((hi[k] - lo[k]) * per_side).ceil().max(1.0) as usize;
    }
    let total: usize = (0..dim).map(|k| counts[k]).product();
    if total < n {
        return Err(Error::Config(format!(
            "cannot place {n} particles on a lattice in the simulated region"
        )));
    }
    let mut sites = Vec::with_capacity(n);
    let zmax = if dim == 3 { counts[2] } else { 1 };
    'fill: for iz in 0..zmax {
        for iy in 0..counts[1] {
            for ix in 0..counts[0] {
                let idx = [ix, iy, iz];
                let mut p = [0.0; 3];
                for k in 0..dim {
                    p[k] = lo[k] + (idx[k] as f64 + 0.5) * (hi[k] - lo[k]) / counts[k] as f64;
                }
                sites.push(p);
                if sites.len() == n {
                    break 'fill;
                }
            }
        }
    }
    Ok(sites)
}

/// The axis-aligned box covered by non-external cells.
fn simulated_box(domain: &Domain, grid: &CellGrid) -> ([f64; 3], [f64; 3]) {
    let mut lo = [0.0; 3];
    let mut hi = domain.lengths;
    if let Some(spec) = grid.partition_spec() {
        for k in 0..domain.dim {
            lo[k] = spec.sim_lo[k] as f64 * grid.cell_size[k];
            hi[k] = spec.sim_hi[k] as f64 * grid.cell_size[k];
        }
    }
    (lo, hi)
}

/// Maxwell-Boltzmann velocity at temperature T for mass m.
pub fn maxwell_velocity(rng: &mut SimRng, dim: usize, temperature: f64, mass: f64) -> [f64; 3] {
    let sigma = (temperature / mass).sqrt();
    let mut v = [0.0; 3];
    for k in v.iter_mut().take(dim) {
        *k = sigma * rng.normal();
    }
    v
}

/// Place every configured species: explicit positions win, then lattice or
/// uniform arrangement; ballistic species get Maxwell velocities (and the
/// total momentum is zeroed when asked).
pub fn place_initial(
    cfg: &SimConfig,
    domain: &Domain,
    species: &SpeciesTable,
    grid: &CellGrid,
    store: &mut ParticleStore,
    rng: &mut SimRng,
) -> Result<()> {
    let dim = domain.dim;
    // Lattice species first (deterministic sites), then uniform ones.
    let lattice_total: usize = cfg
        .species
        .iter()
        .enumerate()
        .filter(|(_, s)| s.positions.is_empty() && cfg.initial.arrangement == "lattice")
        .map(|(_, s)| s.count)
        .sum();
    let sites = if lattice_total > 0 {
        lattice_sites(domain, grid, lattice_total)?
    } else {
        Vec::new()
    };
    let mut site_iter = 0usize;

    for (s_idx, s) in cfg.species.iter().enumerate() {
        let s_id = s_idx as u16;
        let temperature = s.temperature.unwrap_or(cfg.initial.temperature);
        let mass = species.spec(s_id).mass;
        let diffusive = species.spec(s_id).diffusion > 0.0;
        let positions: Vec<[f64; 3]> = if !s.positions.is_empty() {
            s.positions
                .iter()
                .map(|p| {
                    let mut v = [0.0; 3];
                    for k in 0..dim {
                        v[k] = p[k];
                    }
                    v
                })
                .collect()
        } else if cfg.initial.arrangement == "lattice" {
            let chunk = &sites[site_iter..site_iter + s.count];
            site_iter += s.count;
            chunk.to_vec()
        } else {
            // Uniform over non-external cells.
            let mut out = Vec::with_capacity(s.count);
            let mut guard = 0usize;
            while out.len() < s.count {
                guard += 1;
                if guard > s.count * 10_000 {
                    return Err(Error::Config(
                        "could not place particles uniformly in the simulated region".into(),
                    ));
                }
                let mut p = [0.0; 3];
                for k in 0..dim {
                    p[k] = rng.uniform() * domain.lengths[k];
                }
                if !grid.is_external(grid.locate_cell(&p)) {
                    out.push(p);
                }
            }
            out
        };
        for pos in positions {
            let vel = if diffusive {
                [0.0; 3]
            } else {
                maxwell_velocity(rng, dim, temperature, mass)
            };
            let mut particle = Particle::new(s_id, pos, vel);
            particle.mode = Mode::EventDriven;
            store.insert(particle);
        }
    }
    if sites.len() > site_iter && cfg.initial.arrangement == "lattice" {
        // Unused tail sites are fine (rounded lattice).
    }

    if cfg.initial.zero_momentum && store.len() > 1 {
        let mut p = [0.0; 3];
        let mut mass_total = 0.0;
        let mut movers = 0usize;
        for (_, part) in store.iter() {
            let m = species.spec(part.species).mass;
            if species.spec(part.species).diffusion > 0.0 {
                continue;
            }
            mass_total += m;
            movers += 1;
            for k in 0..dim {
                p[k] += m * part.vel[k];
            }
        }
        if movers > 1 && mass_total > 0.0 {
            let ids: Vec<u32> = store.ids().collect();
            for id in ids {
                let s = store.get(id).species;
                if species.spec(s).diffusion > 0.0 {
                    continue;
                }
                let part = store.get_mut(id);
                for k in 0..dim {
                    part.vel[k] -= p[k] / mass_total;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FaceSpec;

    #[test]
    fn lattice_sites_are_distinct_and_inside() {
        let domain = Domain::new(3, [10.0; 3], [FaceSpec::periodic(); 6]).unwrap();
        let grid = CellGrid::new(&domain, [10; 3]).unwrap();
        let sites = lattice_sites(&domain, &grid, 500).unwrap();
        assert_eq!(sites.len(), 500);
        for s in &sites {
            for k in 0..3 {
                assert!(s[k] > 0.0 && s[k] < 10.0);
            }
        }
        let mut min_gap = f64::INFINITY;
        for i in 0..sites.len() {
            for j in 0..i {
                let d = crate::model::overlap_distance(&domain, &sites[i], &sites[j]);
                min_gap = min_gap.min(d);
            }
        }
        assert!(min_gap > 0.9, "lattice spacing {min_gap}");
    }

    #[test]
    fn maxwell_velocities_have_target_variance() {
        let mut rng = SimRng::new(3);
        let (t, m) = (2.0, 4.0);
        let n = 60_000;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let v = maxwell_velocity(&mut rng, 3, t, m);
            sum2 += v[0] * v[0];
        }
        let var = sum2 / n as f64;
        assert!((var - t / m).abs() < 0.02 * t / m, "var {var}");
    }
}
