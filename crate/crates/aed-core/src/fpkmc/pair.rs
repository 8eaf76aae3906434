//! Pair protections: nearly-colliding particles are protected together and
//! propagated by a combination of two independent walkers — the diffusive
//! center of mass and the difference (relative) coordinate.
//!
//! With D_i and D_j the single-particle diffusivities, the independent
//! split is cm = a r_i + b r_j, w = r_i - r_j with a = D_j/(D_i+D_j) and
//! b = D_i/(D_i+D_j): cov(dw, dcm) = 2(a D_i - b D_j) dt = 0, so the two
//! walkers are uncorrelated. They carry D_w = D_i + D_j and
//! D_cm = D_i D_j / (D_i + D_j), and the members recover as
//! r_i = cm + b w, r_j = cm - a w.
//!
//! The difference walker is advanced by small hops until absorbed at the
//! collision surface |w| = D_ij or at the outer shell (dissolution); the
//! generator state is saved before the walk so a canceled prediction can be
//! replayed bit-for-bit up to the cancellation time.

use crate::model::ParticleId;
use crate::rng::{RngState, SimRng};
use crate::vecmath::{norm, Vector};
use crate::{Error, Result};

use super::interval::{sample_cube_exit, CubeExit};

pub const MAX_HOPS: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairEventKind {
    /// Difference walker absorbed at the collision surface.
    Collision,
    /// Difference walker reached the outer shell: the pair separates.
    Dissolution,
    /// Center-of-mass walker left its cube first: also a dissolution, but
    /// positioned on the CM cube face.
    CmExit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HopOutcome {
    pub elapsed: f64,
    pub kind: PairEventKind,
    pub w_end: Vector,
    pub hops: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct PairGeometry {
    pub dim: usize,
    /// Initial separation vector (i minus the j image nearest i).
    pub w0: Vector,
    /// Collision surface D_ij.
    pub r_inner: f64,
    /// Dissolution shell radius.
    pub r_outer: f64,
    /// Difference walker diffusivity D_i + D_j.
    pub diff_d: f64,
    /// Hop length scale.
    pub hop: f64,
}

impl PairGeometry {
    #[inline]
    pub fn hop_dt(&self) -> f64 {
        self.hop * self.hop / (2.0 * self.dim as f64 * self.diff_d)
    }
}

/// Advance the difference walker by Gaussian hops until absorption at
/// either shell or until `stop_time` (the pre-sampled CM exit). The draw
/// sequence is a pure function of the generator state and the geometry, so
/// restoring the state replays the trajectory exactly; stopping earlier
/// yields a bitwise prefix of the same trajectory.
pub fn hop_walk(
    rng: &mut SimRng,
    geom: &PairGeometry,
    stop_time: f64,
    max_hops: u64,
) -> Result<HopOutcome> {
    let mut w = geom.w0;
    let start = norm(&w, geom.dim);
    if start <= geom.r_inner {
        return Ok(HopOutcome {
            elapsed: 0.0,
            kind: PairEventKind::Collision,
            w_end: w,
            hops: 0,
        });
    }
    let dt = geom.hop_dt();
    let sd = geom.hop / (geom.dim as f64).sqrt();
    let mut t = 0.0;
    let mut hops = 0u64;
    loop {
        // The stop check precedes the draw so a shorter replay consumes an
        // exact prefix of the original stream.
        if t + dt > stop_time {
            return Ok(HopOutcome {
                elapsed: stop_time,
                kind: PairEventKind::CmExit,
                w_end: w,
                hops,
            });
        }
        if hops >= max_hops {
            return Err(Error::Fault(format!(
                "pair hop walk exceeded {max_hops} hops (start {start:.3e}, inner {:.3e}, \
                 outer {:.3e}, hop {:.3e})",
                geom.r_inner, geom.r_outer, geom.hop
            )));
        }
        for k in 0..geom.dim {
            w[k] += sd * rng.normal();
        }
        t += dt;
        hops += 1;
        let r = norm(&w, geom.dim);
        if r <= geom.r_inner {
            // Pin onto the collision surface.
            let scale = geom.r_inner / r.max(1e-300);
            for k in 0..geom.dim {
                w[k] *= scale;
            }
            return Ok(HopOutcome {
                elapsed: t,
                kind: PairEventKind::Collision,
                w_end: w,
                hops,
            });
        }
        if r >= geom.r_outer {
            let scale = geom.r_outer / r;
            for k in 0..geom.dim {
                w[k] *= scale;
            }
            return Ok(HopOutcome {
                elapsed: t,
                kind: PairEventKind::Dissolution,
                w_end: w,
                hops,
            });
        }
    }
}

/// Which sub-event the scheduled pair event is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairScheduled {
    /// The sampled walker outcome (collision / dissolution / CM exit).
    Outcome,
    /// One member decays before the walkers resolve.
    DecayFirst(ParticleId),
}

#[derive(Clone, Debug)]
pub struct PairProtection {
    pub members: (ParticleId, ParticleId),
    /// Positions at creation (each in its own periodic image).
    pub origin_i: Vector,
    pub origin_j: Vector,
    pub geometry: PairGeometry,
    /// CM walker cube half-width and diffusivity.
    pub cm_half: f64,
    pub cm_d: f64,
    /// b = D_i / (D_i + D_j): r_i = cm + b w, r_j = cm - (1 - b) w.
    pub weight_i: f64,
    pub created_at: f64,
    /// Generator state saved before any pair sampling, for cancel/replay.
    pub saved_rng: RngState,
    /// Whether each member consumed a decay draw at creation (replay must
    /// repeat the exact draw sequence).
    draw_flags: (bool, bool),
    pub cm_exit: CubeExit,
    pub outcome: HopOutcome,
    pub scheduled: PairScheduled,
    /// Absolute time of the scheduled pair event.
    pub event_time: f64,
    /// Per-member envelope half-widths bounding every reachable core point;
    /// disjointness against other protections tests these boxes.
    pub envelope_i: f64,
    pub envelope_j: f64,
}

/// Sampling order is fixed (CM exit, decay times, hop walk) so that a
/// replay from `saved_rng` consumes the identical draw sequence.
#[allow(clippy::too_many_arguments)]
pub fn sample_pair_prediction(
    rng: &mut SimRng,
    members: (ParticleId, ParticleId),
    origin_i: Vector,
    origin_j: Vector,
    geometry: PairGeometry,
    cm_half: f64,
    cm_d: f64,
    weight_i: f64,
    decay_rates: (f64, f64),
    created_at: f64,
    envelopes: (f64, f64),
) -> Result<PairProtection> {
    let saved_rng = rng.state();
    let cm_exit = sample_cube_exit(rng, geometry.dim, &[cm_half; 3], cm_d);
    let draw_flags = (decay_rates.0 > 0.0, decay_rates.1 > 0.0);
    let decay_i = draw_flags.0.then(|| rng.exp_time(decay_rates.0));
    let decay_j = draw_flags.1.then(|| rng.exp_time(decay_rates.1));
    let outcome = hop_walk(rng, &geometry, cm_exit.elapsed, MAX_HOPS)?;

    let mut scheduled = PairScheduled::Outcome;
    let mut elapsed = outcome.elapsed;
    for (member, d) in [(members.0, decay_i), (members.1, decay_j)] {
        if let Some(dt) = d {
            if dt < elapsed {
                elapsed = dt;
                scheduled = PairScheduled::DecayFirst(member);
            }
        }
    }
    Ok(PairProtection {
        members,
        origin_i,
        origin_j,
        geometry,
        cm_half,
        cm_d,
        weight_i,
        created_at,
        saved_rng,
        draw_flags,
        cm_exit,
        outcome,
        scheduled,
        event_time: created_at + elapsed,
        envelope_i: envelopes.0,
        envelope_j: envelopes.1,
    })
}

impl PairProtection {
    /// Replay the saved draw sequence up to `elapsed` and return the
    /// difference walker's position there. The global generator is restored
    /// to the saved state and left at the end of the replayed prefix, so
    /// the draws behind the unrealized suffix return to the stream.
    pub fn replay_to(&self, rng: &mut SimRng, elapsed: f64) -> Result<HopOutcome> {
        *rng = SimRng::restore(self.saved_rng);
        let _cm = sample_cube_exit(rng, self.geometry.dim, &[self.cm_half; 3], self.cm_d);
        if self.draw_flags.0 {
            rng.uniform_open01();
        }
        if self.draw_flags.1 {
            rng.uniform_open01();
        }
        hop_walk(rng, &self.geometry, elapsed, MAX_HOPS)
    }

    /// Member displacements for a difference-walker move `dw` and a CM move
    /// `dcm`: dr_i = dcm + b dw, dr_j = dcm - (1-b) dw.
    pub fn member_displacements(&self, dw: &Vector, dcm: &Vector) -> (Vector, Vector) {
        let b = self.weight_i;
        let a = 1.0 - b;
        let mut di = [0.0; 3];
        let mut dj = [0.0; 3];
        for k in 0..self.geometry.dim {
            di[k] = dcm[k] + b * dw[k];
            dj[k] = dcm[k] - a * dw[k];
        }
        (di, dj)
    }

    pub fn other(&self, member: ParticleId) -> ParticleId {
        if member == self.members.0 {
            self.members.1
        } else {
            self.members.0
        }
    }

    pub fn is_member(&self, id: ParticleId) -> bool {
        self.members.0 == id || self.members.1 == id
    }
}
