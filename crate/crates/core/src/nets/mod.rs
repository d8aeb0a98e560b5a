//! Multi-layer perceptrons: construction, evaluation (plain and on a
//! [`Graph`]), supervised fitting and checkpoint documents.

mod fit;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{matmul_into, softplus, Graph, ParamHandle, ParamVector, Segment, Var};
use crate::error::{contract, Error, Result};

pub use fit::{fit_behavior_policy, fit_gaussian, fit_regression, FitConfig, FitReport};

/// Lower bound added to every predicted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-2;

/// How the last layer's pre-activation is turned into an output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Linear,
    /// `lower + (upper - lower) * (tanh(z) + 1) / 2`.
    Bounded { lower: f64, upper: f64 },
    /// First half of the outputs is the mean, second half
    /// `softplus(raw) + sigma_floor`.
    Gaussian { sigma_floor: f64 },
}

/// Dense tanh network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    head: Head,
    params: ParamVector,
}

/// Mean and per-dimension standard deviation of a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicyOutput {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Graph handles for a network's parameters.
#[derive(Clone, Debug)]
pub struct NetHandle {
    params: ParamHandle,
}

impl NetHandle {
    pub fn params(&self) -> &ParamHandle {
        &self.params
    }
}

fn layout(sizes: &[usize]) -> Vec<Segment> {
    sizes
        .windows(2)
        .flat_map(|w| {
            [
                Segment {
                    rows: w[0],
                    cols: w[1],
                },
                Segment { rows: 1, cols: w[1] },
            ]
        })
        .collect()
}

/// Seeded Glorot-uniform weights, zero biases.
pub fn mlp_init(sizes: &[usize], head: Head, seed: u64) -> Result<Network> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(contract(format!(
            "network needs at least two positive layer sizes, got {sizes:?}"
        )));
    }
    validate_head(head, *sizes.last().unwrap())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::new();
    for w in sizes.windows(2) {
        let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
        values.extend((0..w[0] * w[1]).map(|_| rng.random_range(-limit..limit)));
        values.extend(std::iter::repeat_n(0.0, w[1]));
    }
    let params = ParamVector::new(values, layout(sizes))?;
    Ok(Network {
        sizes: sizes.to_vec(),
        head,
        params,
    })
}

fn validate_head(head: Head, out: usize) -> Result<()> {
    match head {
        Head::Linear => Ok(()),
        Head::Bounded { lower, upper } if lower < upper => Ok(()),
        Head::Bounded { lower, upper } => Err(contract(format!(
            "bounded head needs lower < upper, got [{lower}, {upper}]"
        ))),
        Head::Gaussian { sigma_floor } if sigma_floor > 0.0 && out % 2 == 0 => Ok(()),
        Head::Gaussian { .. } => Err(contract(
            "gaussian head needs a positive sigma floor and an even output width",
        )),
    }
}

impl Network {
    pub fn from_parts(sizes: Vec<usize>, head: Head, params: ParamVector) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(contract(format!("invalid layer sizes {sizes:?}")));
        }
        validate_head(head, *sizes.last().unwrap())?;
        if params.layout() != layout(&sizes).as_slice() {
            return Err(contract("parameter layout does not match layer sizes"));
        }
        Ok(Network {
            sizes,
            head,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    /// Width of the final layer (twice the action dimension for gaussian heads).
    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Evaluates `rows` inputs stored row-major in `inputs`.
    pub fn forward_rows(&self, inputs: &[f64], rows: usize) -> Result<Vec<f64>> {
        let n_in = self.input_dim();
        if inputs.len() != rows * n_in {
            return Err(contract(format!(
                "network expects {n_in} inputs per row, got {} values for {rows} rows",
                inputs.len()
            )));
        }
        let mut x = inputs.to_vec();
        for l in 0..self.layers() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let w = self.params.segment(2 * l);
            let b = self.params.segment(2 * l + 1);
            let mut y = vec![0.0; rows * o];
            matmul_into(&x, w, &mut y, rows, i, o);
            for r in 0..rows {
                for (yj, bj) in y[r * o..(r + 1) * o].iter_mut().zip(b) {
                    *yj += bj;
                }
            }
            if l + 1 < self.layers() {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            x = y;
        }
        let out = self.output_dim();
        match self.head {
            Head::Linear => {}
            Head::Bounded { lower, upper } => {
                let half = 0.5 * (upper - lower);
                x.iter_mut()
                    .for_each(|v| *v = lower + half * (v.tanh() + 1.0));
            }
            Head::Gaussian { sigma_floor } => {
                let d = out / 2;
                for r in 0..rows {
                    for v in &mut x[r * out + d..(r + 1) * out] {
                        *v = softplus(*v) + sigma_floor;
                    }
                }
            }
        }
        Ok(x)
    }

    /// Output for one input. Gaussian heads return `[mean.., sigma..]`.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_rows(input, 1)
    }

    pub fn gaussian(&self, input: &[f64]) -> Result<GaussianPolicyOutput> {
        if !matches!(self.head, Head::Gaussian { .. }) {
            return Err(contract("gaussian() called on a non-gaussian network"));
        }
        let out = self.forward(input)?;
        let d = out.len() / 2;
        Ok(GaussianPolicyOutput {
            mean: out[..d].to_vec(),
            sigma: out[d..].to_vec(),
        })
    }

    /// Registers the parameters on `g`. Frozen networks still pass
    /// gradients to their inputs.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> NetHandle {
        NetHandle {
            params: g.params(&self.params, trainable),
        }
    }

    fn graph_pre_head(&self, g: &mut Graph, h: &NetHandle, input: Var) -> Var {
        assert_eq!(g.shape(input).cols, self.input_dim(), "network input width");
        let mut x = input;
        for l in 0..self.layers() {
            let z = g.matmul(x, h.params.var(2 * l));
            let z = g.add(z, h.params.var(2 * l + 1));
            x = if l + 1 < self.layers() { g.tanh(z) } else { z };
        }
        x
    }

    /// Graph forward for linear and bounded heads; `input` is `[rows, in]`.
    pub fn graph_forward(&self, g: &mut Graph, h: &NetHandle, input: Var) -> Var {
        let z = self.graph_pre_head(g, h, input);
        match self.head {
            Head::Linear => z,
            Head::Bounded { lower, upper } => {
                let t = g.tanh(z);
                let half = 0.5 * (upper - lower);
                let s = g.scale(t, half);
                g.add_scalar(s, lower + half)
            }
            Head::Gaussian { .. } => panic!("graph_forward on gaussian head; use graph_gaussian"),
        }
    }

    /// Graph forward for gaussian heads, returning `(mean, sigma)`.
    pub fn graph_gaussian(&self, g: &mut Graph, h: &NetHandle, input: Var) -> (Var, Var) {
        let Head::Gaussian { sigma_floor } = self.head else {
            panic!("graph_gaussian on non-gaussian head");
        };
        let z = self.graph_pre_head(g, h, input);
        let d = self.output_dim() / 2;
        let mean = g.slice_cols(z, 0, d);
        let raw = g.slice_cols(z, d, d);
        let sp = g.softplus(raw);
        let sigma = g.add_scalar(sp, sigma_floor);
        (mean, sigma)
    }

    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument {
            format_version: NetworkDocument::VERSION,
            sizes: self.sizes.clone(),
            head: self.head,
            params: self.params.values().to_vec(),
        }
    }

    pub fn from_document(doc: NetworkDocument) -> Result<Self> {
        if doc.format_version != NetworkDocument::VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {})",
                doc.format_version,
                NetworkDocument::VERSION
            )));
        }
        let params = ParamVector::new(doc.params, layout(&doc.sizes))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Network::from_parts(doc.sizes, doc.head, params)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: NetworkDocument =
            serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Network::from_document(doc)
    }
}

/// Versioned checkpoint document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    pub format_version: u32,
    pub sizes: Vec<usize>,
    pub head: Head,
    pub params: Vec<f64>,
}

impl NetworkDocument {
    pub const VERSION: u32 = 1;
}
