use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::tensorgrad::Tensor;
use crate::SeededRng;

pub const DATASET_MAGIC: [u8; 8] = *b"IDQLDSET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// How a dataset was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    #[serde(default)]
    pub details: serde_json::Value,
    /// Undiscounted return of every complete episode.
    #[serde(default)]
    pub episode_returns: Vec<f64>,
    #[serde(default)]
    pub discounted_returns: Vec<f64>,
}

impl DatasetMeta {
    pub fn mean_return(&self) -> f64 {
        mean(&self.episode_returns)
    }

    pub fn mean_discounted_return(&self) -> f64 {
        mean(&self.discounted_returns)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Column-packed `(s, a, r, s', done)` transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    env_id: String,
    seed: u64,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<bool>,
    pub meta: DatasetMeta,
}

impl OfflineDataset {
    pub fn empty(env_id: &str, seed: u64, state_dim: usize, action_dim: usize) -> Self {
        Self {
            env_id: env_id.to_string(),
            seed,
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
            meta: DatasetMeta::default(),
        }
    }

    /// Packs externally generated transitions.
    pub fn from_transitions(
        env_id: &str,
        seed: u64,
        state_dim: usize,
        action_dim: usize,
        transitions: impl IntoIterator<Item = Transition>,
    ) -> Result<Self, EnvError> {
        let mut ds = Self::empty(env_id, seed, state_dim, action_dim);
        for t in transitions {
            ds.push(t)?;
        }
        Ok(ds)
    }

    pub(crate) fn push(&mut self, t: Transition) -> Result<(), EnvError> {
        for (got, want) in [
            (t.state.len(), self.state_dim),
            (t.action.len(), self.action_dim),
            (t.next_state.len(), self.state_dim),
        ] {
            if got != want {
                return Err(EnvError::Width { got, want });
            }
        }
        self.states.extend(&t.state);
        self.actions.extend(&t.action);
        self.rewards.push(t.reward);
        self.next_states.extend(&t.next_state);
        self.dones.push(t.done);
        Ok(())
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn dones(&self) -> &[bool] {
        &self.dones
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            state: self.state(i).to_vec(),
            action: self.action(i).to_vec(),
            reward: self.rewards[i],
            next_state: self.next_state(i).to_vec(),
            done: self.dones[i],
        }
    }

    /// All actions as an `[n × action_dim]` matrix.
    pub fn action_matrix(&self) -> Tensor {
        Tensor::matrix(self.len(), self.action_dim, self.actions.clone()).expect("packed")
    }

    pub fn state_matrix(&self) -> Tensor {
        Tensor::matrix(self.len(), self.state_dim, self.states.clone()).expect("packed")
    }

    /// A copy with every reward mapped through `transform`.
    pub fn with_reward_transform(&self, transform: RewardTransform) -> Self {
        let mut out = self.clone();
        let (scale, shift) = match transform {
            RewardTransform::Affine { scale, shift } => (scale, shift),
            RewardTransform::Standardize => {
                let m = mean(&self.rewards);
                let var = self.rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>()
                    / self.len().max(1) as f64;
                let sd = var.sqrt().max(1e-12);
                (1.0 / sd, -m / sd)
            }
        };
        for r in &mut out.rewards {
            *r = scale * *r + shift;
        }
        out
    }

    /// Header, length-prefixed JSON metadata, then packed records
    /// `s, a, r, s', done` as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EnvError> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| EnvError::Format(e.to_string()))?;
        w.write_all(&DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.env_id.len() as u32).to_le_bytes())?;
        w.write_all(self.env_id.as_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.state_dim as u32).to_le_bytes())?;
        w.write_all(&(self.action_dim as u32).to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        let mut rec = Vec::with_capacity(8 * (2 * self.state_dim + self.action_dim + 2));
        for i in 0..self.len() {
            rec.clear();
            let done = if self.dones[i] { 1.0 } else { 0.0 };
            for v in self
                .state(i)
                .iter()
                .chain(self.action(i))
                .chain([&self.rewards[i]])
                .chain(self.next_state(i))
                .chain([&done])
            {
                rec.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&rec)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, EnvError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != DATASET_MAGIC {
            return Err(EnvError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(EnvError::Format(format!("unsupported version {version}")));
        }
        let id_len = read_u32(&mut r)? as usize;
        let env_id = String::from_utf8(read_bytes(&mut r, id_len)?)
            .map_err(|e| EnvError::Format(e.to_string()))?;
        let seed = read_u64(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        let state_dim = read_u32(&mut r)? as usize;
        let action_dim = read_u32(&mut r)? as usize;
        let meta_len = read_u32(&mut r)? as usize;
        let meta = serde_json::from_slice(&read_bytes(&mut r, meta_len)?)
            .map_err(|e| EnvError::Format(e.to_string()))?;
        let mut ds = Self::empty(&env_id, seed, state_dim, action_dim);
        ds.meta = meta;
        let width = 2 * state_dim + action_dim + 2;
        let mut rec = vec![0.0; width];
        for _ in 0..count {
            for v in rec.iter_mut() {
                *v = f64::from_le_bytes(read_array(&mut r)?);
            }
            let (s, rest) = rec.split_at(state_dim);
            let (a, rest) = rest.split_at(action_dim);
            let (reward, rest) = (rest[0], &rest[1..]);
            let (s2, done) = rest.split_at(state_dim);
            let done = match done[0] {
                0.0 => false,
                1.0 => true,
                x => return Err(EnvError::Format(format!("done flag {x}"))),
            };
            ds.push(Transition {
                state: s.to_vec(),
                action: a.to_vec(),
                reward,
                next_state: s2.to_vec(),
                done,
            })?;
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EnvError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("in-memory write");
        v
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], EnvError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| EnvError::Format(format!("truncated: {e}")))?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, EnvError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, EnvError> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, EnvError> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|e| EnvError::Format(format!("truncated: {e}")))?;
    Ok(b)
}

/// Optional reward preprocessing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RewardTransform {
    /// `scale·r + shift`
    Affine { scale: f64, shift: f64 },
    /// Zero mean, unit variance over the dataset.
    Standardize,
}

/// A minibatch as row-major matrices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn gather(ds: &OfflineDataset, indices: Vec<usize>) -> Self {
        let b = indices.len();
        let (sd, ad) = (ds.state_dim, ds.action_dim);
        let mut s = Vec::with_capacity(b * sd);
        let mut a = Vec::with_capacity(b * ad);
        let mut s2 = Vec::with_capacity(b * sd);
        let mut r = Vec::with_capacity(b);
        let mut d = Vec::with_capacity(b);
        for &i in &indices {
            s.extend_from_slice(ds.state(i));
            a.extend_from_slice(ds.action(i));
            s2.extend_from_slice(ds.next_state(i));
            r.push(ds.rewards[i]);
            d.push(ds.dones[i]);
        }
        Self {
            states: Tensor::matrix(b, sd, s).expect("packed"),
            actions: Tensor::matrix(b, ad, a).expect("packed"),
            rewards: r,
            next_states: Tensor::matrix(b, sd, s2).expect("packed"),
            dones: d,
            indices,
        }
    }
}

/// Uniform sampling with replacement.
pub fn sample_batch(
    dataset: &OfflineDataset,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Batch, EnvError> {
    let n = dataset.len();
    if n == 0 {
        return Err(EnvError::EmptyDataset);
    }
    if batch_size > n {
        return Err(EnvError::BatchTooLarge {
            batch: batch_size,
            len: n,
        });
    }
    let idx = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
    Ok(Batch::gather(dataset, idx))
}

/// Offline data plus online transitions, sampled uniformly together.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    data: OfflineDataset,
    offline_len: usize,
}

impl ReplayBuffer {
    pub fn from_dataset(data: OfflineDataset) -> Self {
        let offline_len = data.len();
        Self { data, offline_len }
    }

    pub fn push(&mut self, t: Transition) -> Result<(), EnvError> {
        self.data.push(t)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn online_len(&self) -> usize {
        self.data.len() - self.offline_len
    }

    pub fn as_dataset(&self) -> &OfflineDataset {
        &self.data
    }

    pub fn sample(&self, batch_size: usize, rng: &mut SeededRng) -> Result<Batch, EnvError> {
        sample_batch(&self.data, batch_size, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn tiny() -> OfflineDataset {
        let mut ds = OfflineDataset::empty("test", 7, 2, 1);
        for i in 0..5 {
            let x = i as f64;
            ds.push(Transition {
                state: vec![x, -x],
                action: vec![0.5 * x],
                reward: x.sin(),
                next_state: vec![x + 1.0, 0.1],
                done: i == 4,
            })
            .unwrap();
        }
        ds.meta.generator = "unit test".into();
        ds.meta.episode_returns = vec![1.5];
        ds
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = tiny();
        let bytes = ds.to_bytes();
        let back = OfflineDataset::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = tiny().to_bytes();
        assert!(OfflineDataset::read_from(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(OfflineDataset::read_from(bad.as_slice()).is_err());
    }

    #[test]
    fn width_is_checked() {
        let mut ds = OfflineDataset::empty("test", 0, 2, 1);
        let t = Transition {
            state: vec![0.0],
            action: vec![0.0],
            reward: 0.0,
            next_state: vec![0.0, 0.0],
            done: false,
        };
        assert!(matches!(ds.push(t), Err(EnvError::Width { got: 1, want: 2 })));
    }

    #[test]
    fn batches() {
        let ds = tiny();
        let a = sample_batch(&ds, 5, &mut rng_from_seed(3)).unwrap();
        let b = sample_batch(&ds, 5, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.states.row(0), ds.state(a.indices[0]));
        assert!(matches!(
            sample_batch(&ds, 6, &mut rng_from_seed(0)),
            Err(EnvError::BatchTooLarge { .. })
        ));
        let empty = OfflineDataset::empty("e", 0, 1, 1);
        assert!(matches!(
            sample_batch(&empty, 1, &mut rng_from_seed(0)),
            Err(EnvError::EmptyDataset)
        ));
    }

    #[test]
    fn reward_transforms() {
        let ds = tiny();
        let t = ds.with_reward_transform(RewardTransform::Affine {
            scale: 2.0,
            shift: -1.0,
        });
        assert_eq!(t.rewards()[1], 2.0 * 1f64.sin() - 1.0);
        let s = ds.with_reward_transform(RewardTransform::Standardize);
        let m: f64 = s.rewards().iter().sum::<f64>() / 5.0;
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn replay_buffer_grows_by_one() {
        let mut rb = ReplayBuffer::from_dataset(tiny());
        rb.push(tiny().transition(0)).unwrap();
        assert_eq!((rb.len(), rb.online_len()), (6, 1));
    }
}
