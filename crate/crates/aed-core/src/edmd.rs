//! Exact hard-sphere event-driven MD: ballistic propagation, binary elastic
//! collisions, cell transfers, and hard-wall reflections.

use crate::model::{Domain, Particle};
use crate::rng::SimRng;
use crate::spatial::CellGrid;
use crate::vecmath::{dot, norm_sq, Vector};
use crate::{events, Error, Result};

/// Relative overlap tolerance: pairs at d >= D_ij (1 - 1e-9) are in contact,
/// anything deeper is an invariant breach.
pub const OVERLAP_TOL: f64 = 1e-9;

/// Advance a particle along its force-free straight line to time `to`.
/// Cell membership is not touched here; transfers are explicit events.
pub fn advance_ballistic(p: &mut Particle, to: f64) -> Result<()> {
    if to < p.time - 1e-12 {
        return Err(Error::Causality {
            event: to,
            clock: p.time,
        });
    }
    let dt = to - p.time;
    if dt > 0.0 {
        for k in 0..3 {
            p.pos[k] += p.vel[k] * dt;
        }
    }
    p.time = to;
    Ok(())
}

/// Earliest positive contact time for a pair at relative position `rel`
/// (j -> i) and relative velocity `vel`, touching at distance `cutoff`.
///
/// Uses the cancellation-safe quadratic form: with b = rel . vel the contact
/// root is c / (-b + sqrt(b^2 - a c)), defined only for approaching pairs
/// (b < 0) with positive discriminant; grazing contacts (zero discriminant)
/// produce no event. Pairs already overlapping beyond tolerance fault.
pub fn predict_sphere_collision(
    rel: &Vector,
    vel: &Vector,
    cutoff: f64,
    dim: usize,
) -> Result<Option<f64>> {
    let c = norm_sq(rel, dim) - cutoff * cutoff;
    if c < -2.0 * OVERLAP_TOL * cutoff * cutoff {
        return Err(Error::fault(format!(
            "pair overlapping before prediction: d^2 - D^2 = {c:e}"
        )));
    }
    let b = dot(rel, vel, dim);
    if b >= 0.0 {
        return Ok(None); // receding or tangent
    }
    let a = norm_sq(vel, dim);
    let disc = b * b - a * c;
    if disc <= 0.0 {
        return Ok(None);
    }
    // Within-tolerance contact with approach velocity: immediate collision.
    Ok(Some((c / (-b + disc.sqrt())).max(0.0)))
}

/// First time the pair separation grows to `bound` (tether stretch): the
/// outward root of the same quadratic, always finite for bound > |rel|
/// unless the pair is mutually at rest.
pub fn predict_shell_exit(rel: &Vector, vel: &Vector, bound: f64, dim: usize) -> Option<f64> {
    let a = norm_sq(vel, dim);
    if a == 0.0 {
        return None;
    }
    let b = dot(rel, vel, dim);
    let c = norm_sq(rel, dim) - bound * bound;
    debug_assert!(c <= 2.0 * OVERLAP_TOL * bound * bound, "pair outside tether bound");
    let disc = (b * b - a * c).max(0.0);
    let sq = disc.sqrt();
    let t = if b < 0.0 { (sq - b) / a } else { (-c / (b + sq)).max(0.0) };
    Some(t)
}

/// Elastic hard-sphere momentum exchange. `normal` is the unit contact
/// normal pointing from j toward i; only the normal velocity component
/// changes, scaled by the reduced mass.
pub fn elastic_exchange(
    vi: &mut Vector,
    vj: &mut Vector,
    mi: f64,
    mj: f64,
    normal: &Vector,
    dim: usize,
) {
    let mut rel = [0.0; 3];
    for k in 0..dim {
        rel[k] = vi[k] - vj[k];
    }
    let vn = dot(&rel, normal, dim);
    let fi = 2.0 * mj / (mi + mj) * vn;
    let fj = 2.0 * mi / (mi + mj) * vn;
    for k in 0..dim {
        vi[k] -= fi * normal[k];
        vj[k] += fj * normal[k];
    }
}

/// Process a core collision: requires contact within tolerance and an
/// approaching pair (relative normal velocity into the contact).
pub fn process_elastic_collision(
    domain: &Domain,
    pi: &mut Particle,
    pj: &mut Particle,
    mi: f64,
    mj: f64,
    cutoff: f64,
) -> Result<()> {
    let dim = domain.dim;
    let rel = domain.min_image(&pi.pos, &pj.pos);
    let d = norm_sq(&rel, dim).sqrt();
    if (d - cutoff).abs() > 1e-6 * cutoff {
        return Err(Error::fault(format!(
            "collision processed away from contact: d = {d}, cutoff = {cutoff}"
        )));
    }
    let mut normal = rel;
    for k in 0..dim {
        normal[k] /= d;
    }
    let mut vrel = [0.0; 3];
    for k in 0..dim {
        vrel[k] = pi.vel[k] - pj.vel[k];
    }
    if dot(&vrel, &normal, dim) >= 0.0 {
        return Err(Error::fault("collision event on receding pair"));
    }
    elastic_exchange(&mut pi.vel, &mut pj.vel, mi, mj, &normal, dim);
    Ok(())
}

/// Process a tether stretch: the bonded pair reached full extension and must
/// be separating; the exchange reverses the normal relative velocity.
pub fn process_tether_rebound(
    domain: &Domain,
    pi: &mut Particle,
    pj: &mut Particle,
    mi: f64,
    mj: f64,
    range: f64,
) -> Result<()> {
    let dim = domain.dim;
    let rel = domain.min_image(&pi.pos, &pj.pos);
    let d = norm_sq(&rel, dim).sqrt();
    if (d - range).abs() > 1e-6 * range {
        return Err(Error::fault(format!(
            "tether rebound away from full extension: d = {d}, range = {range}"
        )));
    }
    let mut normal = rel;
    for k in 0..dim {
        normal[k] /= d;
    }
    let mut vrel = [0.0; 3];
    for k in 0..dim {
        vrel[k] = pi.vel[k] - pj.vel[k];
    }
    if dot(&vrel, &normal, dim) <= 0.0 {
        return Err(Error::fault("tether event on closing pair"));
    }
    elastic_exchange(&mut pi.vel, &mut pj.vel, mi, mj, &normal, dim);
    Ok(())
}

/// Earliest boundary event for a ballistic particle: either its centroid
/// crossing a face of its cell (transfer) or its surface touching a domain
/// wall, whichever face comes first. Qualifier encodes the face. Returns
/// None for a particle that can reach no face (zero velocity).
pub fn predict_boundary(
    grid: &CellGrid,
    domain: &Domain,
    pos: &Vector,
    vel: &Vector,
    cell: usize,
    radius: f64,
) -> Option<(f64, i32)> {
    let coords = grid.coords(cell);
    let mut best: Option<(f64, i32)> = None;
    for axis in 0..domain.dim {
        if vel[axis] == 0.0 {
            continue;
        }
        let h = grid.cell_size[axis];
        let hi_moving = vel[axis] > 0.0;
        let face = 2 * axis + hi_moving as usize;
        let edge_cell = if hi_moving {
            coords[axis] + 1 == grid.dims[axis]
        } else {
            coords[axis] == 0
        };
        let is_wall = edge_cell && domain.face(face).kind == crate::model::BoundaryKind::Wall;
        let (target, qualifier) = if is_wall {
            // Surface contact with the wall plane.
            let plane = if hi_moving { domain.lengths[axis] - radius } else { radius };
            (plane, events::qualifier_wall(face))
        } else {
            let plane = if hi_moving {
                (coords[axis] + 1) as f64 * h
            } else {
                coords[axis] as f64 * h
            };
            (plane, events::qualifier_transfer(face))
        };
        let t = ((target - pos[axis]) / vel[axis]).max(0.0);
        if best.map_or(true, |(bt, _)| t < bt) {
            best = Some((t, qualifier));
        }
    }
    best
}

/// Specular reflection off a hard wall: negate the normal velocity
/// component. Faults unless the particle surface is at the wall moving in.
pub fn process_wall_reflection(
    domain: &Domain,
    p: &mut Particle,
    radius: f64,
    face: usize,
) -> Result<()> {
    let axis = face / 2;
    let hi = face % 2 == 1;
    let plane = if hi { domain.lengths[axis] - radius } else { radius };
    if (p.pos[axis] - plane).abs() > 1e-6 * (radius + domain.lengths[axis] * 1e-6) {
        return Err(Error::fault(format!(
            "wall reflection away from contact on face {face}"
        )));
    }
    let into_wall = if hi { p.vel[axis] > 0.0 } else { p.vel[axis] < 0.0 };
    if !into_wall {
        return Err(Error::fault("wall reflection with outgoing velocity"));
    }
    p.vel[axis] = -p.vel[axis];
    // Pin to exact contact to keep the no-overlap invariant clean.
    p.pos[axis] = plane;
    Ok(())
}

/// Thermal (diffuse) wall: the outgoing velocity is resampled from the
/// wall-temperature half-space distribution — flux-weighted (Rayleigh)
/// normal component into the domain, Maxwellian tangentials.
pub fn thermal_wall_velocity(
    rng: &mut SimRng,
    dim: usize,
    face: usize,
    temperature: f64,
    mass: f64,
) -> Vector {
    let axis = face / 2;
    let hi = face % 2 == 1;
    let sigma = (temperature / mass).sqrt();
    let mut v = [0.0; 3];
    for k in 0..dim {
        if k == axis {
            let r = sigma * (-2.0 * rng.uniform_open01().ln()).sqrt();
            v[k] = if hi { -r } else { r };
        } else {
            v[k] = sigma * rng.normal();
        }
    }
    v
}
