use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::tensorgrad::{Activation, Binding, Dense, Graph, LayerNorm, ParamSet, Tensor, Var};
use crate::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreArch {
    Mlp,
    LnResnet,
}

impl std::str::FromStr for ScoreArch {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "lnresnet" => Ok(Self::LnResnet),
            other => Err(DiffusionError::Config(format!(
                "unknown architecture `{other}` (expected mlp or lnresnet)"
            ))),
        }
    }
}

impl ScoreArch {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::LnResnet => "lnresnet",
        }
    }
}

/// Shape of the noise-prediction network. The MLP variant uses `n_blocks`
/// hidden layers of width `hidden_dim` and ignores `dropout`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    pub arch: ScoreArch,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub dropout: f64,
    pub time_embed_dim: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub activation: Activation,
}

impl ScoreNetConfig {
    pub fn new(arch: ScoreArch, state_dim: usize, action_dim: usize) -> Self {
        Self {
            arch,
            hidden_dim: 256,
            n_blocks: 3,
            dropout: 0.1,
            time_embed_dim: 64,
            action_dim,
            state_dim,
            activation: Activation::Mish,
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: &str| Err(DiffusionError::Config(m.to_string()));
        if self.hidden_dim == 0 || self.action_dim == 0 || self.state_dim == 0 {
            return bad("hidden_dim, action_dim and state_dim must be positive");
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be positive");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be a positive even number");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.action_dim + self.state_dim + self.time_embed_dim
    }
}

/// Sinusoidal embedding `[sin(t·ω_k), cos(t·ω_k)]` with
/// `ω_k = 10000^(−k/half)`, k = 0..half.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let x = t as f64 * w;
        out[k] = x.sin();
        out[half + k] = x.cos();
    }
    out
}

#[derive(Clone, Debug)]
struct Block {
    norm: LayerNorm,
    up: Dense,
    down: Dense,
}

#[derive(Clone, Debug)]
pub struct ScoreNet {
    pub config: ScoreNetConfig,
    input: Dense,
    blocks: Vec<Block>,
    hidden: Vec<Dense>,
    head: Dense,
}

impl ScoreNet {
    pub fn new(config: ScoreNetConfig) -> Result<Self, DiffusionError> {
        config.validate()?;
        let h = config.hidden_dim;
        let (input, blocks, hidden) = match config.arch {
            ScoreArch::LnResnet => {
                let blocks = (0..config.n_blocks)
                    .map(|i| Block {
                        norm: LayerNorm::new(&format!("score/block{i}/ln"), h),
                        up: Dense::new(&format!("score/block{i}/up"), h, 4 * h),
                        down: Dense::new(&format!("score/block{i}/down"), 4 * h, h),
                    })
                    .collect();
                (Dense::new("score/in", config.input_dim(), h), blocks, vec![])
            }
            ScoreArch::Mlp => {
                let hidden = (1..config.n_blocks)
                    .map(|i| Dense::new(&format!("score/hidden{i}"), h, h))
                    .collect();
                (Dense::new("score/in", config.input_dim(), h), vec![], hidden)
            }
        };
        let head = Dense::new("score/head", h, config.action_dim);
        Ok(Self {
            config,
            input,
            blocks,
            hidden,
            head,
        })
    }

    /// Fresh parameters; block output layers and the head start at zero.
    pub fn init(&self, rng: &mut SeededRng) -> Result<ParamSet, DiffusionError> {
        let mut p = ParamSet::new();
        self.input.init(&mut p, rng, false)?;
        for b in &self.blocks {
            b.norm.init(&mut p)?;
            b.up.init(&mut p, rng, false)?;
            b.down.init(&mut p, rng, true)?;
        }
        for d in &self.hidden {
            d.init(&mut p, rng, false)?;
        }
        self.head.init(&mut p, rng, true)?;
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.input.num_params()
            + self
                .blocks
                .iter()
                .map(|b| b.norm.num_params() + b.up.num_params() + b.down.num_params())
                .sum::<usize>()
            + self.hidden.iter().map(Dense::num_params).sum::<usize>()
            + self.head.num_params()
    }

    /// Paths of every block's last dense layer (empty for the MLP).
    pub fn block_output_paths(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| [b.down.weight.clone(), b.down.bias.clone()])
            .collect()
    }

    /// Rows of `[a_t, s, emb(t)]`.
    pub fn build_input(
        &self,
        noised: &Tensor,
        states: &Tensor,
        steps: &[usize],
    ) -> Result<Tensor, DiffusionError> {
        let c = &self.config;
        let n = noised.rows();
        if noised.cols() != c.action_dim {
            return Err(DiffusionError::Width { got: noised.cols(), want: c.action_dim });
        }
        if states.cols() != c.state_dim {
            return Err(DiffusionError::Width { got: states.cols(), want: c.state_dim });
        }
        if states.rows() != n || steps.len() != n {
            return Err(DiffusionError::Rows {
                actions: n,
                states: states.rows(),
                steps: steps.len(),
            });
        }
        let mut data = Vec::with_capacity(n * c.input_dim());
        for r in 0..n {
            data.extend_from_slice(noised.row(r));
            data.extend_from_slice(states.row(r));
            data.extend(time_embedding(steps[r], c.time_embed_dim));
        }
        Ok(Tensor::matrix(n, c.input_dim(), data)?)
    }

    /// ε-prediction for input rows built by [`ScoreNet::build_input`].
    /// Dropout is active only when an RNG is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        binding: Binding,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<Var, DiffusionError> {
        let act = self.config.activation;
        let mut h = self.input.forward(g, params, x, binding)?;
        match self.config.arch {
            ScoreArch::LnResnet => {
                for b in &self.blocks {
                    let mut r = h;
                    if let Some(rng) = dropout_rng.as_deref_mut() {
                        r = g.dropout(r, self.config.dropout, true, rng)?;
                    }
                    r = b.norm.forward(g, params, r, binding)?;
                    r = b.up.forward(g, params, r, binding)?;
                    r = act.apply(g, r);
                    r = b.down.forward(g, params, r, binding)?;
                    h = g.add(h, r)?;
                }
                h = act.apply(g, h);
            }
            ScoreArch::Mlp => {
                h = act.apply(g, h);
                for d in &self.hidden {
                    h = d.forward(g, params, h, binding)?;
                    h = act.apply(g, h);
                }
            }
        }
        Ok(self.head.forward(g, params, h, binding)?)
    }

    /// Eval-mode prediction without recording gradients.
    pub fn predict(&self, params: &ParamSet, input: Tensor) -> Result<Tensor, DiffusionError> {
        let mut g = Graph::new();
        let x = g.input(input);
        let y = self.forward(&mut g, params, x, Binding::Frozen, None)?;
        Ok(g.value(y).clone())
    }
}
