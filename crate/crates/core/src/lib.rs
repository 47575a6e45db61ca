//! Generalized implicit Q-learning with diffusion behavior models.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensorgrad`]: a small reverse-mode autodiff tape, layers and Adam.
//! - [`losses`]: the convex critic losses (expectile, quantile, linex), their
//!   value solvers and the implicit-actor importance weights.
//! - [`oracles`]: brute-force verifiers (golden-section search, value
//!   iteration, fixed-point audits) that share no code with `losses`.
//! - [`envs`]: bandits, a gridworld, toy 2D datasets and offline datasets.
//! - [`critic`]: Q/V networks and the implicit TD training loop.
//! - [`diffusion`]: noise schedules, score networks and DDPM behavior cloning.
//! - [`extraction`]: sample-and-resample / argmax policy extraction.
//! - [`finetune`]: online finetuning with a frozen or trainable behavior model.
//! - [`experiment`]: declarative configs and the reproducible run directory.

pub mod critic;
pub mod diffusion;
pub mod envs;
pub mod experiment;
pub mod extraction;
pub mod finetune;
pub mod losses;
pub mod oracles;
pub mod tensorgrad;

/// The RNG used for every seeded stream in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Creates a deterministic RNG stream from a seed.
pub fn rng_from_seed(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
