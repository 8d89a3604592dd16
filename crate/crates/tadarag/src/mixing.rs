//! Token-level likelihood mixing.
//!
//! A three-layer MLP (widths [2d, d, d/2, 1], ReLU hidden activations,
//! sigmoid output) reads the concatenated graph-free and graph-conditioned
//! hidden states of a response token and produces a weight ω in (0,1). The
//! mixed log-likelihood is the convex combination
//! `ω * l_graph + (1 - ω) * l_base`, which stays between its endpoints.
//! The final layer starts at zero so training begins from the unbiased
//! mixture ω = 0.5.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::tensor_ops::dot;
use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::lm::{LanguageModel, LmError, Reduction};

const HIDDEN_INIT_STD: f32 = 0.05;

/// Mixing-network parameter handles inside a shared parameter store; the
/// parameters live under the "mix." name prefix so checkpoints carry them
/// next to the language model.
#[derive(Debug, Clone)]
pub struct MixNet {
    input_dim: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

/// Tape leaves for one forward pass.
pub struct MixBinding {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    w3: Var,
    b3: Var,
}

/// Per-token mixing record (Eq-4 endpoint values and the mixture).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenMixRecord {
    pub omega: f32,
    pub l_base: f32,
    pub l_graph: f32,
    pub l_mix: f32,
}

impl MixNet {
    /// Registers fresh mixing parameters for hidden width `embed_dim`.
    pub fn register(
        store: &mut ParamStore,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self, AutodiffError> {
        let d = embed_dim;
        let h1 = d.max(1);
        let h2 = (d / 2).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = store.register(
            "mix.layer1.weight",
            Tensor::randn(vec![2 * d, h1], HIDDEN_INIT_STD, &mut rng),
        )?;
        let b1 = store.register("mix.layer1.bias", Tensor::zeros(vec![h1]))?;
        let w2 = store.register(
            "mix.layer2.weight",
            Tensor::randn(vec![h1, h2], HIDDEN_INIT_STD, &mut rng),
        )?;
        let b2 = store.register("mix.layer2.bias", Tensor::zeros(vec![h2]))?;
        // zero final layer: every token starts at omega = 0.5
        let w3 = store.register("mix.layer3.weight", Tensor::zeros(vec![h2, 1]))?;
        let b3 = store.register("mix.layer3.bias", Tensor::zeros(vec![1]))?;
        Ok(MixNet {
            input_dim: 2 * d,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }

    /// Resolves existing "mix." parameters (checkpoint load).
    pub fn from_store(store: &ParamStore) -> Option<Self> {
        let w1 = store.index_of("mix.layer1.weight")?;
        let input_dim = store.get(w1).tensor().shape()[0];
        Some(MixNet {
            input_dim,
            w1,
            b1: store.index_of("mix.layer1.bias")?,
            w2: store.index_of("mix.layer2.weight")?,
            b2: store.index_of("mix.layer2.bias")?,
            w3: store.index_of("mix.layer3.weight")?,
            b3: store.index_of("mix.layer3.bias")?,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.input_dim / 2
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> MixBinding {
        MixBinding {
            w1: tape.param(store, self.w1),
            b1: tape.param(store, self.b1),
            w2: tape.param(store, self.w2),
            b2: tape.param(store, self.b2),
            w3: tape.param(store, self.w3),
            b3: tape.param(store, self.b3),
        }
    }

    /// ω for each row of paired hidden states: sigmoid(MLP(concat(h_base,
    /// h_graph))), differentiable end to end. Shapes [K,d] + [K,d] -> [K].
    pub fn weights_on_tape(
        &self,
        tape: &mut Tape,
        b: &MixBinding,
        h_base: Var,
        h_graph: Var,
    ) -> Result<Var, AutodiffError> {
        let cat = tape.concat_cols(h_base, h_graph)?;
        if tape.shape(cat)[1] != self.input_dim {
            return Err(AutodiffError::Dimension {
                op: "mix_weight",
                lhs: tape.shape(cat).to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        let z1 = tape.matmul(cat, b.w1)?;
        let z1 = tape.add_row_bias(z1, b.b1)?;
        let a1 = tape.relu(z1);
        let z2 = tape.matmul(a1, b.w2)?;
        let z2 = tape.add_row_bias(z2, b.b2)?;
        let a2 = tape.relu(z2);
        let z3 = tape.matmul(a2, b.w3)?;
        let z3 = tape.add_row_bias(z3, b.b3)?;
        let out = tape.sigmoid(z3);
        let k = tape.shape(out)[0];
        tape.reshape(out, vec![k])
    }

    /// Plain single-pair ω without a tape.
    pub fn weight(
        &self,
        store: &ParamStore,
        h_base: &[f32],
        h_graph: &[f32],
    ) -> Result<f32, AutodiffError> {
        let d = self.embed_dim();
        if h_base.len() != d || h_graph.len() != d {
            return Err(AutodiffError::Dimension {
                op: "mix_weight",
                lhs: vec![h_base.len()],
                rhs: vec![h_graph.len()],
            });
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, store);
        let mut cat = h_base.to_vec();
        cat.extend_from_slice(h_graph);
        let x = tape.leaf(&Tensor::from_vec(vec![1, 2 * d], cat)?);
        let hb = tape.slice_cols(x, 0, d)?;
        let hg = tape.slice_cols(x, d, 2 * d)?;
        let w = self.weights_on_tape(&mut tape, &b, hb, hg)?;
        Ok(tape.value(w)[0])
    }
}

/// Eq-4 mixture on the tape: `ω * l_graph + (1 - ω) * l_base`, all [K].
pub fn mix_on_tape(
    tape: &mut Tape,
    omega: Var,
    l_base: Var,
    l_graph: Var,
) -> Result<Var, AutodiffError> {
    let graph_side = tape.mul(omega, l_graph)?;
    let inv = tape.affine(omega, -1.0, 1.0);
    let base_side = tape.mul(inv, l_base)?;
    tape.add(graph_side, base_side)
}

/// Plain Eq-4 value; ω must lie in [0,1].
pub fn mix_loglik(omega: f32, l_base: f32, l_graph: f32) -> Result<f32, AutodiffError> {
    if !(0.0..=1.0).contains(&omega) || !omega.is_finite() {
        return Err(AutodiffError::Contract(format!(
            "mixing weight {omega} outside [0, 1]"
        )));
    }
    Ok(omega * l_graph + (1.0 - omega) * l_base)
}

/// Conditional log-likelihood of a single token given a context that may
/// carry a delimiter-wrapped graph segment (Eqs 2-3): the context is
/// `x ++ graph_segment ++ y_prefix` and the returned value is the
/// log-probability of `y_token` at the next position.
pub fn token_loglik(
    model: &LanguageModel,
    x_ids: &[u32],
    graph_segment: Option<&[u32]>,
    y_prefix: &[u32],
    y_token: u32,
) -> Result<f32, LmError> {
    let mut ctx = x_ids.to_vec();
    if let Some(g) = graph_segment {
        ctx.extend_from_slice(g);
    }
    ctx.extend_from_slice(y_prefix);
    model.sequence_logprob(&ctx, &[y_token], Reduction::Sum)
}

impl TokenMixRecord {
    pub fn new(omega: f32, l_base: f32, l_graph: f32) -> Result<Self, AutodiffError> {
        let l_mix = mix_loglik(omega, l_base, l_graph)?;
        Ok(TokenMixRecord {
            omega,
            l_base,
            l_graph,
            l_mix,
        })
    }

    /// Convexity: the mixture lies between its endpoints.
    pub fn within_bounds(&self) -> bool {
        let lo = self.l_base.min(self.l_graph);
        let hi = self.l_base.max(self.l_graph);
        lo <= self.l_mix && self.l_mix <= hi
    }
}
