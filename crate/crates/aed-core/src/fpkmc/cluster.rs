//! Synchronous (time-driven) handling for dense clusters of diffusing
//! particles: rejection-free species-weighted hopping in the n-fold style.
//!
//! Each hop selects a species with probability proportional to
//! N_s * 2 D_s / h_s^2 and moves one uniformly chosen particle of that
//! species by a Gaussian step of per-axis scale h_s; the per-particle hop
//! rate 2 D_s / h_s^2 makes the mean-square displacement exactly 2 d D t.
//! Species decay channels race in the same rate sum. The cluster may take
//! hops freely up to the time of the next event in the queue.

use crate::model::{ParticleId, ParticleStore, SpeciesId};
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug)]
pub struct HopChannel {
    pub species: SpeciesId,
    /// Per-axis Gaussian step scale h_s.
    pub step: f64,
    /// Per-particle hop rate 2 D_s / h_s^2.
    pub hop_rate: f64,
    /// Per-particle decay rate (0 for stable species).
    pub decay_rate: f64,
}

impl HopChannel {
    pub fn new(species: SpeciesId, diffusion: f64, step: f64, decay_rate: f64) -> Self {
        HopChannel {
            species,
            step,
            hop_rate: if step > 0.0 { 2.0 * diffusion / (step * step) } else { 0.0 },
            decay_rate,
        }
    }
}

/// What stopped the hopping loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClusterStop {
    /// Reached the time bound with nothing pending.
    Bound,
    /// A hop produced an overlap; the pair reacts at the returned time.
    Overlap(ParticleId, ParticleId),
    /// A member's decay channel fired.
    Decay(ParticleId),
}

/// Advance the cluster from `from` to at most `until`. After every hop the
/// caller's `after_hop` sees the moved particle (to re-bin it and test for
/// overlaps); a reported overlap or a decay stops the loop immediately.
/// Returns the reached cluster time and the stop reason. The cluster never
/// advances past `until`.
#[allow(clippy::too_many_arguments)]
pub fn hop_until(
    rng: &mut SimRng,
    store: &mut ParticleStore,
    members: &[ParticleId],
    channels: &[HopChannel],
    dim: usize,
    from: f64,
    until: f64,
    mut after_hop: impl FnMut(&mut ParticleStore, ParticleId) -> Option<(ParticleId, ParticleId)>,
) -> (f64, ClusterStop) {
    let mut t = from;
    // Per-channel member lists (species membership is stable during a
    // hopping burst; decays stop the loop).
    let channel_members: Vec<Vec<ParticleId>> = channels
        .iter()
        .map(|ch| {
            members
                .iter()
                .copied()
                .filter(|&m| store.get(m).species == ch.species)
                .collect()
        })
        .collect();
    let hop_rates: Vec<f64> = channels
        .iter()
        .zip(&channel_members)
        .map(|(ch, ms)| ch.hop_rate * ms.len() as f64)
        .collect();
    let decay_rates: Vec<f64> = channels
        .iter()
        .zip(&channel_members)
        .map(|(ch, ms)| ch.decay_rate * ms.len() as f64)
        .collect();
    let total: f64 = hop_rates.iter().sum::<f64>() + decay_rates.iter().sum::<f64>();
    if total <= 0.0 {
        return (until, ClusterStop::Bound);
    }
    loop {
        let wait = rng.exp_time(total);
        if t + wait > until {
            return (until, ClusterStop::Bound);
        }
        t += wait;
        // Pick a channel (hop channels first, then decay channels).
        let mut pick = rng.uniform() * total;
        let mut chosen: Option<(usize, bool)> = None;
        for (c, &r) in hop_rates.iter().enumerate() {
            if pick < r {
                chosen = Some((c, false));
                break;
            }
            pick -= r;
        }
        if chosen.is_none() {
            for (c, &r) in decay_rates.iter().enumerate() {
                if pick < r {
                    chosen = Some((c, true));
                    break;
                }
                pick -= r;
            }
        }
        let (c, is_decay) = chosen.unwrap_or((channels.len() - 1, false));
        let ms = &channel_members[c];
        let member = ms[rng.index(ms.len())];
        if is_decay {
            return (t, ClusterStop::Decay(member));
        }
        let step = channels[c].step;
        {
            let p = store.get_mut(member);
            for k in 0..dim {
                p.pos[k] += step * rng.normal();
            }
            p.time = t;
        }
        if let Some((a, b)) = after_hop(store, member) {
            return (t, ClusterStop::Overlap(a, b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Particle;
    use crate::stats;

    #[test]
    fn single_species_msd_slope_is_2dd() {
        // MSD regression oracle over repeated bursts.
        let dim = 3;
        let diffusion = 0.7;
        let channels = [HopChannel::new(0, diffusion, 0.05, 0.0)];
        let mut rng = SimRng::new(101);
        let n = 2000;
        let mut store = ParticleStore::new();
        let members: Vec<ParticleId> = (0..n)
            .map(|_| store.insert(Particle::new(0, [0.0; 3], [0.0; 3])))
            .collect();
        let mut times = Vec::new();
        let mut msds = Vec::new();
        let horizon = 2.0;
        let checkpoints = 20;
        for step in 1..=checkpoints {
            let t0 = (step - 1) as f64 * horizon / checkpoints as f64;
            let t1 = step as f64 * horizon / checkpoints as f64;
            let (reached, stop) = hop_until(
                &mut rng,
                &mut store,
                &members,
                &channels,
                dim,
                t0,
                t1,
                |_, _| None,
            );
            assert_eq!(stop, ClusterStop::Bound);
            assert_eq!(reached, t1);
            let msd: f64 = members
                .iter()
                .map(|&m| {
                    let p = store.get(m);
                    p.pos.iter().map(|x| x * x).sum::<f64>()
                })
                .sum::<f64>()
                / n as f64;
            times.push(t1);
            msds.push(msd);
        }
        let slope = stats::regression_slope(&times, &msds);
        let expect = 2.0 * dim as f64 * diffusion;
        assert!(
            (slope - expect).abs() < 0.05 * expect,
            "MSD slope {slope} vs {expect}"
        );
    }

    #[test]
    fn hop_counts_follow_diffusivity_ratio() {
        // Two species, D ratio 4, equal steps: species selections 4:1.
        let channels = [
            HopChannel::new(0, 0.4, 0.05, 0.0),
            HopChannel::new(1, 0.1, 0.05, 0.0),
        ];
        let mut rng = SimRng::new(103);
        let mut store = ParticleStore::new();
        let mut members = Vec::new();
        for s in [0u16, 1] {
            for _ in 0..10 {
                members.push(store.insert(Particle::new(s, [0.0; 3], [0.0; 3])));
            }
        }
        let mut counts = [0u64; 2];
        hop_until(
            &mut rng,
            &mut store,
            &members,
            &channels,
            3,
            0.0,
            2.0,
            |store, moved| {
                counts[store.get(moved).species as usize] += 1;
                None
            },
        );
        let total = (counts[0] + counts[1]) as f64;
        let frac = counts[0] as f64 / total;
        let sigma = (0.8 * 0.2 / total).sqrt();
        assert!(
            (frac - 0.8).abs() < 3.0 * sigma,
            "species-0 fraction {frac} of {total}"
        );
    }

    #[test]
    fn cluster_never_advances_past_bound() {
        let channels = [HopChannel::new(0, 1.0, 0.1, 0.0)];
        let mut rng = SimRng::new(107);
        let mut store = ParticleStore::new();
        let members = vec![store.insert(Particle::new(0, [0.0; 3], [0.0; 3]))];
        for i in 0..200 {
            let until = 0.01 * (i + 1) as f64;
            let (t, stop) = hop_until(
                &mut rng,
                &mut store,
                &members,
                &channels,
                3,
                0.01 * i as f64,
                until,
                |_, _| None,
            );
            assert_eq!(stop, ClusterStop::Bound);
            assert!(t <= until);
            assert!(store.get(members[0]).time <= until);
        }
    }

    #[test]
    fn overlap_report_stops_the_loop() {
        let channels = [HopChannel::new(0, 1.0, 0.05, 0.0)];
        let mut rng = SimRng::new(109);
        let mut store = ParticleStore::new();
        let members = vec![
            store.insert(Particle::new(0, [0.0; 3], [0.0; 3])),
            store.insert(Particle::new(0, [1.0, 0.0, 0.0], [0.0; 3])),
        ];
        let mut hops_seen = 0;
        let (t, stop) = hop_until(
            &mut rng,
            &mut store,
            &members,
            &channels,
            3,
            0.0,
            1e6,
            |_, _| {
                hops_seen += 1;
                (hops_seen == 7).then_some((1, 2))
            },
        );
        assert_eq!(stop, ClusterStop::Overlap(1, 2));
        assert!(t < 1e6);
        assert_eq!(hops_seen, 7);
    }

    #[test]
    fn decay_channel_fires_at_exponential_rate() {
        let channels = [HopChannel::new(0, 1.0, 0.1, 2.0)];
        let mut rng = SimRng::new(113);
        let n = 4000;
        let mut waits = Vec::with_capacity(n);
        for _ in 0..n {
            let mut store = ParticleStore::new();
            let members = vec![store.insert(Particle::new(0, [0.0; 3], [0.0; 3]))];
            let (t, stop) = hop_until(
                &mut rng,
                &mut store,
                &members,
                &channels,
                3,
                0.0,
                1e9,
                |_, _| None,
            );
            assert!(matches!(stop, ClusterStop::Decay(_)));
            waits.push(t);
        }
        let (mean, _) = stats::mean_var(&waits);
        assert!((mean - 0.5).abs() < 0.03, "decay mean wait {mean}");
    }
}
