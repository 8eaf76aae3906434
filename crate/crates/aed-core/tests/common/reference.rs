//! Brute-force O(N^2)-rescan event-driven reference for hard spheres in a
//! periodic box: after every collision, all pair times are recomputed from
//! scratch with minimum-image straight-line kinematics. Used as the oracle
//! the full engine (queue + cells + neighborhood lists) must reproduce.

use aed_core::driver::Sim;
use aed_core::vecmath::Vector;

pub struct RefEdmd {
    pub side: f64,
    pub cutoff: f64,
    pub time: f64,
    pub pos: Vec<Vector>,
    pub vel: Vec<Vector>,
}

impl RefEdmd {
    /// Copy the initial state out of a freshly built simulation (ids are
    /// dense 1..N at startup).
    pub fn from_sim(sim: &Sim) -> Self {
        let side = sim.world.domain.lengths[0];
        let mut pos = Vec::new();
        let mut vel = Vec::new();
        for (_, p) in sim.world.store.iter() {
            pos.push(p.pos);
            vel.push(p.vel);
        }
        RefEdmd {
            side,
            cutoff: 1.0,
            time: 0.0,
            pos,
            vel,
        }
    }

    fn min_image(&self, mut d: Vector) -> Vector {
        for k in 0..3 {
            if d[k] > 0.5 * self.side {
                d[k] -= self.side;
            } else if d[k] < -0.5 * self.side {
                d[k] += self.side;
            }
        }
        d
    }

    /// Earliest positive contact time for pair (i, j) from the current
    /// state, by the plain quadratic formula.
    fn pair_time(&self, i: usize, j: usize) -> Option<f64> {
        let rel = self.min_image([
            self.pos[i][0] - self.pos[j][0],
            self.pos[i][1] - self.pos[j][1],
            self.pos[i][2] - self.pos[j][2],
        ]);
        let dv = [
            self.vel[i][0] - self.vel[j][0],
            self.vel[i][1] - self.vel[j][1],
            self.vel[i][2] - self.vel[j][2],
        ];
        let b: f64 = (0..3).map(|k| rel[k] * dv[k]).sum();
        if b >= 0.0 {
            return None;
        }
        let a: f64 = (0..3).map(|k| dv[k] * dv[k]).sum();
        let c: f64 = (0..3).map(|k| rel[k] * rel[k]).sum::<f64>() - self.cutoff * self.cutoff;
        let disc = b * b - a * c;
        if disc <= 0.0 {
            return None;
        }
        // Plain quadratic root (the engine uses the rationalized form; the
        // two agree to rounding, which the tolerance absorbs).
        Some((-b - disc.sqrt()) / a)
    }

    /// Run `events` collisions, returning (absolute time, i, j) with ids in
    /// the engine's 1-based convention.
    pub fn run(&mut self, events: usize) -> Vec<(f64, u32, u32)> {
        let n = self.pos.len();
        let mut out = Vec::with_capacity(events);
        while out.len() < events {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..n {
                for j in (i + 1)..n {
                    if let Some(dt) = self.pair_time(i, j) {
                        if best.map_or(true, |(bt, _, _)| dt < bt) {
                            best = Some((dt, i, j));
                        }
                    }
                }
            }
            let (dt, i, j) = best.expect("a periodic gas always has a next collision");
            // Advance all particles and wrap.
            for p in 0..n {
                for k in 0..3 {
                    self.pos[p][k] += self.vel[p][k] * dt;
                    while self.pos[p][k] < 0.0 {
                        self.pos[p][k] += self.side;
                    }
                    while self.pos[p][k] >= self.side {
                        self.pos[p][k] -= self.side;
                    }
                }
            }
            self.time += dt;
            // Elastic exchange (equal masses): swap normal components.
            let rel = self.min_image([
                self.pos[i][0] - self.pos[j][0],
                self.pos[i][1] - self.pos[j][1],
                self.pos[i][2] - self.pos[j][2],
            ]);
            let d: f64 = (0..3).map(|k| rel[k] * rel[k]).sum::<f64>().sqrt();
            let normal = [rel[0] / d, rel[1] / d, rel[2] / d];
            let dv = [
                self.vel[i][0] - self.vel[j][0],
                self.vel[i][1] - self.vel[j][1],
                self.vel[i][2] - self.vel[j][2],
            ];
            let vn: f64 = (0..3).map(|k| dv[k] * normal[k]).sum();
            for k in 0..3 {
                self.vel[i][k] -= vn * normal[k];
                self.vel[j][k] += vn * normal[k];
            }
            out.push((self.time, (i + 1) as u32, (j + 1) as u32));
        }
        out
    }
}

/// Self-check used by the engine test binary: two spheres closing head-on
/// at distance 3, speed 2 touch at t = 1.0 and swap velocities.
pub fn self_check() {
    let mut r = RefEdmd {
        side: 100.0,
        cutoff: 1.0,
        time: 0.0,
        pos: vec![[10.0, 0.0, 0.0], [13.0, 0.0, 0.0]],
        vel: vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
    };
    let events = r.run(1);
    assert!((events[0].0 - 1.0).abs() < 1e-12);
    assert_eq!((events[0].1, events[0].2), (1, 2));
    assert_eq!(r.vel[0], [-1.0, 0.0, 0.0]);
    assert_eq!(r.vel[1], [1.0, 0.0, 0.0]);
}
