//! Episode replay buffer and uniform chunk sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::checkpoint::{Array, Checkpoint};
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::model::ChunkBatch;
use crate::tensor::Tensor;

/// One collected episode. Transition `t` takes `observations[t]` to
/// `observations[t + 1]` under `actions[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub env_seed: u64,
    pub observations: Vec<Observation>,
    pub actions: Vec<[f64; 2]>,
    /// Reward summed over the repeat block.
    pub rewards: Vec<f64>,
    /// 1 if any environment step of the block was unsafe.
    pub kappas: Vec<u8>,
    /// Number of unsafe environment steps in the block.
    pub costs: Vec<u64>,
    /// Environment steps in each block.
    pub env_steps: Vec<u64>,
}

impl Episode {
    pub fn new(env_seed: u64, first: Observation) -> Self {
        Episode {
            env_seed,
            observations: vec![first],
            actions: Vec::new(),
            rewards: Vec::new(),
            kappas: Vec::new(),
            costs: Vec::new(),
            env_steps: Vec::new(),
        }
    }

    pub fn push(&mut self, action: [f64; 2], reward: f64, cost: u64, steps: u64, next: Observation) {
        self.actions.push(action);
        self.rewards.push(reward);
        self.kappas.push(u8::from(cost > 0));
        self.costs.push(cost);
        self.env_steps.push(steps);
        self.observations.push(next);
    }

    /// Stored transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn total_cost(&self) -> u64 {
        self.costs.iter().sum()
    }

    pub fn total_env_steps(&self) -> u64 {
        self.env_steps.iter().sum()
    }

    fn is_consistent(&self) -> bool {
        let n = self.len();
        self.observations.len() == n + 1
            && [self.rewards.len(), self.kappas.len(), self.costs.len(), self.env_steps.len()].iter().all(|&l| l == n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity: usize,
    stored: usize,
}

impl ReplayBuffer {
    /// `capacity` counts transitions.
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { episodes: VecDeque::new(), capacity, stored: 0 }
    }

    pub fn push(&mut self, episode: Episode) -> Result<()> {
        if !episode.is_consistent() {
            return Err(Error::Invalid("episode arrays have inconsistent lengths".into()));
        }
        if let Some(first) = self.episodes.front() {
            if first.observations[0].shape() != episode.observations[0].shape() {
                return Err(Error::Invalid("episode image size differs from the buffer".into()));
            }
        }
        self.stored += episode.len();
        self.episodes.push_back(episode);
        while self.stored > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("non-empty");
            self.stored -= old.len();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.stored
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn episode(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    /// Picks an episode uniformly among those with at least `length`
    /// transitions, then a uniform offset inside it.
    pub fn sample_location(&self, length: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
        let eligible: Vec<usize> = (0..self.episodes.len()).filter(|&i| self.episodes[i].len() >= length).collect();
        if eligible.is_empty() {
            return Err(Error::Invalid(format!(
                "no stored episode has {length} transitions; collect longer seed episodes or shorten chunk_length"
            )));
        }
        let e = eligible[rng.random_range(0..eligible.len())];
        let offset = rng.random_range(0..=self.episodes[e].len() - length);
        Ok((e, offset))
    }

    /// `batch` chunks of `length` consecutive transitions.
    pub fn sample_chunks(&self, batch: usize, length: usize, rng: &mut impl Rng) -> Result<ChunkBatch> {
        if batch == 0 || length == 0 {
            return Err(Error::Invalid("batch and chunk length must be positive".into()));
        }
        let locations = (0..batch).map(|_| self.sample_location(length, rng)).collect::<Result<Vec<_>>>()?;
        Ok(self.gather(&locations, length))
    }

    /// Chunks at explicit `(episode, offset)` locations.
    pub fn gather(&self, locations: &[(usize, usize)], length: usize) -> ChunkBatch {
        let [c, h, w] = self.episodes[0].observations[0].shape();
        let b = locations.len();
        let mut obs = Vec::with_capacity(b * length * c * h * w);
        let mut actions = Vec::with_capacity(b * length * 2);
        let mut rewards = Vec::with_capacity(b * length);
        let mut kappas = Vec::with_capacity(b * length);
        for &(e, k) in locations {
            let ep = &self.episodes[e];
            for t in k..k + length {
                obs.extend(ep.observations[t + 1].values());
                actions.extend_from_slice(&ep.actions[t]);
                rewards.push(ep.rewards[t]);
                kappas.push(f64::from(ep.kappas[t]));
            }
        }
        ChunkBatch {
            observations: Tensor::new(vec![b, length, c, h, w], obs).expect("shape"),
            actions: Tensor::new(vec![b, length, 2], actions).expect("shape"),
            rewards: Tensor::new(vec![b, length], rewards).expect("shape"),
            kappas: Tensor::new(vec![b, length], kappas).expect("shape"),
        }
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.push_u64(format!("{prefix}/meta"), vec![self.capacity as u64, self.episodes.len() as u64])?;
        for (i, ep) in self.episodes.iter().enumerate() {
            let p = format!("{prefix}/{i}");
            let [c, h, w] = ep.observations[0].shape();
            let pixels: Vec<u8> = ep.observations.iter().flat_map(|o| o.pixels.iter().copied()).collect();
            ck.push(format!("{p}/obs"), Array::U8 { shape: vec![ep.observations.len(), c, h, w], data: pixels })?;
            ck.push_u64(format!("{p}/seed"), vec![ep.env_seed])?;
            if ep.is_empty() {
                continue;
            }
            let acts: Vec<f64> = ep.actions.iter().flatten().copied().collect();
            ck.push_f64(format!("{p}/actions"), &Tensor::new(vec![ep.len(), 2], acts)?)?;
            ck.push_f64(format!("{p}/rewards"), &Tensor::vector(ep.rewards.clone()))?;
            ck.push_u64(format!("{p}/costs"), ep.costs.clone())?;
            ck.push_u64(format!("{p}/env_steps"), ep.env_steps.clone())?;
        }
        Ok(())
    }

    pub fn load(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let meta = ck.u64(&format!("{prefix}/meta"))?;
        let [capacity, count] = meta[..] else {
            return Err(Error::Checkpoint("buffer meta must hold 2 values".into()));
        };
        let mut buf = ReplayBuffer::new(capacity as usize);
        for i in 0..count as usize {
            let p = format!("{prefix}/{i}");
            let Array::U8 { shape, data } = ck.get(&format!("{p}/obs"))? else {
                return Err(Error::Checkpoint(format!("{p}/obs must be u8")));
            };
            let [n_obs, _, h, w] = shape[..] else {
                return Err(Error::Checkpoint(format!("{p}/obs must be 4-d")));
            };
            let size = data.len() / n_obs;
            let observations = data
                .chunks(size)
                .map(|px| Observation::new(h, w, px.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let mut ep = Episode::new(ck.u64(&format!("{p}/seed"))?[0], observations[0].clone());
            if n_obs > 1 {
                let acts = ck.f64(&format!("{p}/actions"))?.data();
                let rewards = ck.f64(&format!("{p}/rewards"))?.data();
                let costs = ck.u64(&format!("{p}/costs"))?;
                let steps = ck.u64(&format!("{p}/env_steps"))?;
                for t in 0..n_obs - 1 {
                    ep.push([acts[2 * t], acts[2 * t + 1]], rewards[t], costs[t], steps[t], observations[t + 1].clone());
                }
            }
            buf.push(ep)?;
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(v: u8) -> Observation {
        Observation::new(2, 2, vec![v; 12]).unwrap()
    }

    fn episode(seed: u64, n: usize) -> Episode {
        let mut ep = Episode::new(seed, frame(0));
        for t in 0..n {
            ep.push([t as f64 / 10.0, -(seed as f64)], t as f64, (t % 3 == 0) as u64 * 2, 2, frame(t as u8 + 1));
        }
        ep
    }

    #[test]
    fn chunk_of_full_episode_starts_at_zero() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push(episode(1, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(buf.sample_location(5, &mut rng).unwrap(), (0, 0));
        }
        let c = buf.sample_chunks(3, 5, &mut rng).unwrap();
        assert_eq!(c.rewards.data()[..5], [0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c.kappas.data()[..5], [1.0, 0.0, 0.0, 1.0, 0.0]);
        // Observation t is the frame reached by action t.
        assert_eq!(c.observations.data()[0], 1.0 / 255.0);
    }

    #[test]
    fn chunks_stay_inside_one_episode() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push(episode(1, 6)).unwrap();
        buf.push(episode(2, 9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = buf.sample_chunks(200, 4, &mut rng).unwrap();
        for chunk in c.actions.data().chunks(8) {
            let seeds: Vec<f64> = chunk.iter().skip(1).step_by(2).copied().collect();
            assert!(seeds.iter().all(|&s| s == seeds[0]));
            let steps: Vec<f64> = chunk.iter().step_by(2).copied().collect();
            assert!(steps.windows(2).all(|w| (w[1] - w[0] - 0.1).abs() < 1e-12));
        }
    }

    #[test]
    fn too_long_chunks_are_an_error() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push(episode(1, 3)).unwrap();
        let err = buf.sample_chunks(1, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("seed episodes"));
    }

    #[test]
    fn capacity_drops_oldest_episodes() {
        let mut buf = ReplayBuffer::new(10);
        buf.push(episode(1, 6)).unwrap();
        buf.push(episode(2, 6)).unwrap();
        assert_eq!(buf.len(), 1);
        assert_eq!(buf.episode(0).unwrap().env_seed, 2);
        assert_eq!(buf.transitions(), 6);
    }

    #[test]
    fn inconsistent_episodes_are_rejected() {
        let mut ep = episode(1, 3);
        ep.rewards.pop();
        assert!(ReplayBuffer::new(100).push(ep).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push(episode(1, 4)).unwrap();
        buf.push(episode(7, 2)).unwrap();
        let mut ck = Checkpoint::new();
        buf.save(&mut ck, "buffer").unwrap();
        let back = Checkpoint::from_parts(&ck.manifest(), &ck.values_blob()).unwrap();
        assert_eq!(ReplayBuffer::load(&back, "buffer").unwrap(), buf);
    }
}
