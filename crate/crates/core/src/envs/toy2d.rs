use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvError, OfflineDataset, Transition};
use crate::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toy2DGenerator {
    Gaussians8,
    Moons,
    Spiral,
}

impl std::str::FromStr for Toy2DGenerator {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussians8" => Ok(Self::Gaussians8),
            "moons" => Ok(Self::Moons),
            "spiral" => Ok(Self::Spiral),
            other => Err(EnvError::UnknownGenerator(other.to_string())),
        }
    }
}

impl Toy2DGenerator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gaussians8 => "gaussians8",
            Self::Moons => "moons",
            Self::Spiral => "spiral",
        }
    }
}

pub const RING_RADIUS: f64 = 2.0;
pub const RING_STD: f64 = 0.05;
const MOONS_NOISE: f64 = 0.05;
const SPIRAL_NOISE: f64 = 0.05;
const SPIRAL_TURNS: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Toy2DDataset {
    pub points: Vec<[f64; 2]>,
    pub generator: Toy2DGenerator,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
}

impl Toy2DDataset {
    /// Centers of the eight ring modes.
    pub fn ring_modes() -> Vec<[f64; 2]> {
        (0..8)
            .map(|k| {
                let th = k as f64 * PI / 4.0;
                [RING_RADIUS * th.cos(), RING_RADIUS * th.sin()]
            })
            .collect()
    }

    /// Index of the closest ring mode and the distance in units of its std.
    pub fn nearest_ring_mode(p: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, c) in Self::ring_modes().iter().enumerate() {
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() / RING_STD;
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// The points as a one-state dataset whose actions are the points.
    pub fn to_dataset(&self) -> OfflineDataset {
        let mut ds = OfflineDataset::empty(&format!("toy2d-{}", self.generator.name()), self.seed, 1, 2);
        for p in &self.points {
            ds.push(Transition {
                state: vec![0.0],
                action: p.to_vec(),
                reward: 0.0,
                next_state: vec![0.0],
                done: true,
            })
            .expect("fixed widths");
        }
        ds.meta.generator = format!("toy2d {}", self.generator.name());
        ds.meta.details = serde_json::json!({ "params": self.params });
        ds
    }
}

/// Generates `n` points: the 8-mode ring (radius 2, σ = 0.05), two
/// interleaved half-circles, or a noisy Archimedean spiral.
pub fn make_toy2d(generator: Toy2DGenerator, n: usize, seed: u64) -> Result<Toy2DDataset, EnvError> {
    if n == 0 {
        return Err(EnvError::EmptyDataset);
    }
    let mut rng = rng_from_seed(seed);
    let mut params = BTreeMap::new();
    let points = match generator {
        Toy2DGenerator::Gaussians8 => {
            params.insert("radius".into(), RING_RADIUS);
            params.insert("std".into(), RING_STD);
            let modes = Toy2DDataset::ring_modes();
            let noise = Normal::new(0.0, RING_STD).expect("positive");
            (0..n)
                .map(|_| {
                    let c = modes[rng.random_range(0..8)];
                    [c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]
                })
                .collect()
        }
        Toy2DGenerator::Moons => {
            params.insert("noise".into(), MOONS_NOISE);
            let noise = Normal::new(0.0, MOONS_NOISE).expect("positive");
            (0..n)
                .map(|_| {
                    let t = rng.random_range(0.0..PI);
                    let (x, y) = if rng.random::<bool>() {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    [x + noise.sample(&mut rng), y + noise.sample(&mut rng)]
                })
                .collect()
        }
        Toy2DGenerator::Spiral => {
            params.insert("noise".into(), SPIRAL_NOISE);
            params.insert("turns".into(), SPIRAL_TURNS);
            let noise = Normal::new(0.0, SPIRAL_NOISE).expect("positive");
            (0..n)
                .map(|_| {
                    // sqrt spreads points evenly along the arc
                    let th = rng.random::<f64>().sqrt() * SPIRAL_TURNS * 2.0 * PI;
                    let r = th / (SPIRAL_TURNS * PI);
                    [r * th.cos() + noise.sample(&mut rng), r * th.sin() + noise.sample(&mut rng)]
                })
                .collect()
        }
    };
    Ok(Toy2DDataset {
        points,
        generator,
        seed,
        params,
    })
}
