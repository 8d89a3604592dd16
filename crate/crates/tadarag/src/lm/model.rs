use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};

use super::vocab::Vocabulary;
use super::{LmConfig, LmError};

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct LmParamIds {
    embed: usize,
    pos: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

/// Pre-LN decoder-only transformer over the byte-level vocabulary.
///
/// The parameter store may hold additional parameter groups (the mixing
/// network registers under the "mix." prefix); the model resolves its own
/// parameters by name so shared checkpoints load cleanly.
pub struct LanguageModel {
    cfg: LmConfig,
    vocab: Vocabulary,
    store: ParamStore,
    ids: LmParamIds,
}

/// Tape leaves for one forward pass; create one per tape via
/// [`LanguageModel::bind`].
pub struct TapeBinding {
    embed: Var,
    pos: Var,
    layers: Vec<LayerBinding>,
    lnf_g: Var,
    lnf_b: Var,
    head_w: Var,
    head_b: Var,
}

struct LayerBinding {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl LanguageModel {
    /// Fresh model with seed-deterministic initialization. Reserved-token
    /// embeddings start at the mean of the byte-token embeddings so the
    /// learnable delimiters begin as typical rows rather than cold outliers.
    pub fn new(cfg: LmConfig) -> Result<Self, LmError> {
        cfg.validate()?;
        let vocab = Vocabulary::new();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.embed_dim;
        let v = cfg.vocab_size;

        let reg = |store: &mut ParamStore, name: String, t: Tensor| -> Result<usize, LmError> {
            Ok(store.register(&name, t)?)
        };

        let mut embed_t = Tensor::randn(vec![v, d], INIT_STD, &mut rng);
        {
            // mean-init the 5 reserved rows from the 256 byte rows
            let data = embed_t.data_mut();
            let mut mean = vec![0.0f64; d];
            for r in 0..256 {
                for c in 0..d {
                    mean[c] += data[r * d + c] as f64;
                }
            }
            for m in mean.iter_mut() {
                *m /= 256.0;
            }
            for r in 256..v {
                for c in 0..d {
                    data[r * d + c] = mean[c] as f32;
                }
            }
        }
        let embed = reg(&mut store, "lm.embed".into(), embed_t)?;
        let pos = reg(
            &mut store,
            "lm.pos".into(),
            Tensor::randn(vec![cfg.context_len, d], INIT_STD, &mut rng),
        )?;

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = |s: &str| format!("lm.l{l}.{s}");
            layers.push(LayerIds {
                ln1_g: reg(&mut store, p("ln1.g"), ones(d))?,
                ln1_b: reg(&mut store, p("ln1.b"), Tensor::zeros(vec![d]))?,
                wq: reg(&mut store, p("attn.wq"), Tensor::randn(vec![d, d], INIT_STD, &mut rng))?,
                bq: reg(&mut store, p("attn.bq"), Tensor::zeros(vec![d]))?,
                wk: reg(&mut store, p("attn.wk"), Tensor::randn(vec![d, d], INIT_STD, &mut rng))?,
                bk: reg(&mut store, p("attn.bk"), Tensor::zeros(vec![d]))?,
                wv: reg(&mut store, p("attn.wv"), Tensor::randn(vec![d, d], INIT_STD, &mut rng))?,
                bv: reg(&mut store, p("attn.bv"), Tensor::zeros(vec![d]))?,
                wo: reg(&mut store, p("attn.wo"), Tensor::randn(vec![d, d], INIT_STD, &mut rng))?,
                bo: reg(&mut store, p("attn.bo"), Tensor::zeros(vec![d]))?,
                ln2_g: reg(&mut store, p("ln2.g"), ones(d))?,
                ln2_b: reg(&mut store, p("ln2.b"), Tensor::zeros(vec![d]))?,
                w1: reg(&mut store, p("mlp.w1"), Tensor::randn(vec![d, 4 * d], INIT_STD, &mut rng))?,
                b1: reg(&mut store, p("mlp.b1"), Tensor::zeros(vec![4 * d]))?,
                w2: reg(&mut store, p("mlp.w2"), Tensor::randn(vec![4 * d, d], INIT_STD, &mut rng))?,
                b2: reg(&mut store, p("mlp.b2"), Tensor::zeros(vec![d]))?,
            });
        }
        let lnf_g = reg(&mut store, "lm.ln_f.g".into(), ones(d))?;
        let lnf_b = reg(&mut store, "lm.ln_f.b".into(), Tensor::zeros(vec![d]))?;
        let head_w = reg(
            &mut store,
            "lm.head.w".into(),
            Tensor::randn(vec![d, v], INIT_STD, &mut rng),
        )?;
        let head_b = reg(&mut store, "lm.head.b".into(), Tensor::zeros(vec![v]))?;

        Ok(LanguageModel {
            cfg,
            vocab,
            store,
            ids: LmParamIds {
                embed,
                pos,
                layers,
                lnf_g,
                lnf_b,
                head_w,
                head_b,
            },
        })
    }

    /// Rebuilds a model around an existing parameter store (checkpoint
    /// load); parameters are resolved by name.
    pub fn from_store(cfg: LmConfig, vocab: Vocabulary, store: ParamStore) -> Result<Self, LmError> {
        cfg.validate()?;
        let find = |name: &str| -> Result<usize, LmError> {
            store
                .index_of(name)
                .ok_or_else(|| LmError::Format(format!("missing parameter {name:?}")))
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = |s: &str| format!("lm.l{l}.{s}");
            layers.push(LayerIds {
                ln1_g: find(&p("ln1.g"))?,
                ln1_b: find(&p("ln1.b"))?,
                wq: find(&p("attn.wq"))?,
                bq: find(&p("attn.bq"))?,
                wk: find(&p("attn.wk"))?,
                bk: find(&p("attn.bk"))?,
                wv: find(&p("attn.wv"))?,
                bv: find(&p("attn.bv"))?,
                wo: find(&p("attn.wo"))?,
                bo: find(&p("attn.bo"))?,
                ln2_g: find(&p("ln2.g"))?,
                ln2_b: find(&p("ln2.b"))?,
                w1: find(&p("mlp.w1"))?,
                b1: find(&p("mlp.b1"))?,
                w2: find(&p("mlp.w2"))?,
                b2: find(&p("mlp.b2"))?,
            });
        }
        let ids = LmParamIds {
            embed: find("lm.embed")?,
            pos: find("lm.pos")?,
            layers,
            lnf_g: find("lm.ln_f.g")?,
            lnf_b: find("lm.ln_f.b")?,
            head_w: find("lm.head.w")?,
            head_b: find("lm.head.b")?,
        };
        Ok(LanguageModel {
            cfg,
            vocab,
            store,
            ids,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.vocab.encode(text)
    }

    pub fn decode_text(&self, ids: &[u32]) -> String {
        self.vocab.decode(ids)
    }

    /// Registers every model parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> TapeBinding {
        let pv = |tape: &mut Tape, idx: usize| tape.param(&self.store, idx);
        TapeBinding {
            embed: pv(tape, self.ids.embed),
            pos: pv(tape, self.ids.pos),
            layers: self
                .ids
                .layers
                .iter()
                .map(|l| LayerBinding {
                    ln1_g: pv(tape, l.ln1_g),
                    ln1_b: pv(tape, l.ln1_b),
                    wq: pv(tape, l.wq),
                    bq: pv(tape, l.bq),
                    wk: pv(tape, l.wk),
                    bk: pv(tape, l.bk),
                    wv: pv(tape, l.wv),
                    bv: pv(tape, l.bv),
                    wo: pv(tape, l.wo),
                    bo: pv(tape, l.bo),
                    ln2_g: pv(tape, l.ln2_g),
                    ln2_b: pv(tape, l.ln2_b),
                    w1: pv(tape, l.w1),
                    b1: pv(tape, l.b1),
                    w2: pv(tape, l.w2),
                    b2: pv(tape, l.b2),
                })
                .collect(),
            lnf_g: pv(tape, self.ids.lnf_g),
            lnf_b: pv(tape, self.ids.lnf_b),
            head_w: pv(tape, self.ids.head_w),
            head_b: pv(tape, self.ids.head_b),
        }
    }

    /// Causal hidden states for a token prefix, recorded on the tape:
    /// position j depends only on tokens at positions <= j. Returns the
    /// final-layer-norm output, shape [len, embed_dim].
    pub fn hidden_on_tape(
        &self,
        tape: &mut Tape,
        b: &TapeBinding,
        ids: &[u32],
    ) -> Result<Var, LmError> {
        let len = ids.len();
        if len == 0 {
            return Err(LmError::Parameter("empty prefix".into()));
        }
        if len > self.cfg.context_len {
            return Err(LmError::ContextLength {
                len,
                max: self.cfg.context_len,
            });
        }
        let d = self.cfg.embed_dim;
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = tape.gather_rows(b.embed, &rows)?;
        let pos_rows: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(b.pos, &pos_rows)?;
        let mut x = tape.add(tok, pos)?;

        for layer in &b.layers {
            let n1 = tape.layer_norm(x, layer.ln1_g, layer.ln1_b)?;
            let q0 = tape.matmul(n1, layer.wq)?;
            let q = tape.add_row_bias(q0, layer.bq)?;
            let k0 = tape.matmul(n1, layer.wk)?;
            let k = tape.add_row_bias(k0, layer.bk)?;
            let v0 = tape.matmul(n1, layer.wv)?;
            let v = tape.add_row_bias(v0, layer.bv)?;

            let mut ctx: Option<Var> = None;
            for h in 0..heads {
                let (s, e) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.affine(scores, scale, 0.0);
                let probs = tape.causal_softmax(scaled)?;
                let ctx_h = tape.causal_attend(probs, vh)?;
                ctx = Some(match ctx {
                    None => ctx_h,
                    Some(acc) => tape.concat_cols(acc, ctx_h)?,
                });
            }
            let ctx = ctx.expect("num_heads >= 1");
            let proj0 = tape.matmul(ctx, layer.wo)?;
            let proj = tape.add_row_bias(proj0, layer.bo)?;
            x = tape.add(x, proj)?;

            let n2 = tape.layer_norm(x, layer.ln2_g, layer.ln2_b)?;
            let m0 = tape.matmul(n2, layer.w1)?;
            let m1 = tape.add_row_bias(m0, layer.b1)?;
            let act = tape.relu(m1);
            let m2 = tape.matmul(act, layer.w2)?;
            let m3 = tape.add_row_bias(m2, layer.b2)?;
            x = tape.add(x, m3)?;
        }
        Ok(tape.layer_norm(x, b.lnf_g, b.lnf_b)?)
    }

    /// Log-probabilities over the vocabulary for selected hidden-state rows:
    /// gather -> lm head -> log-softmax. Shape [rows.len(), vocab_size].
    pub fn logprob_rows_on_tape(
        &self,
        tape: &mut Tape,
        b: &TapeBinding,
        hidden: Var,
        rows: &[usize],
    ) -> Result<Var, LmError> {
        let picked = tape.gather_rows(hidden, rows)?;
        let logits0 = tape.matmul(picked, b.head_w)?;
        let logits = tape.add_row_bias(logits0, b.head_b)?;
        Ok(tape.row_log_softmax(logits)?)
    }

    /// Causal hidden states without gradient bookkeeping exposed to the
    /// caller; one vector of width embed_dim per position.
    pub fn forward_hidden(&self, ids: &[u32]) -> Result<Vec<Vec<f32>>, LmError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let h = self.hidden_on_tape(&mut tape, &b, ids)?;
        let d = self.cfg.embed_dim;
        Ok(tape
            .value(h)
            .chunks(d)
            .map(|c| c.to_vec())
            .collect())
    }

    /// f(h): log-distribution over the vocabulary for one hidden vector.
    pub fn vocab_logprobs(&self, hidden: &[f32]) -> Result<Vec<f32>, LmError> {
        let d = self.cfg.embed_dim;
        if hidden.len() != d {
            return Err(LmError::Parameter(format!(
                "hidden width {} does not match embed_dim {}",
                hidden.len(),
                d
            )));
        }
        let v = self.cfg.vocab_size;
        let w = self.store.get(self.ids.head_w).tensor().data();
        let bias = self.store.get(self.ids.head_b).tensor().data();
        let wt = crate::autodiff::tensor_ops::transpose(w, d, v);
        let mut logits = vec![0.0f32; v];
        for (o, l) in logits.iter_mut().enumerate() {
            *l = crate::autodiff::tensor_ops::dot(hidden, &wt[o * d..(o + 1) * d]) + bias[o];
        }
        Ok(log_softmax_slice(&logits))
    }

    pub(crate) fn param_data(&self, name: &str) -> &[f32] {
        self.store
            .by_name(name)
            .expect("model parameter present")
            .tensor()
            .data()
    }
}

pub(crate) fn log_softmax_slice(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f64;
    for &l in logits {
        z += ((l - m) as f64).exp();
    }
    let lz = z.ln();
    logits
        .iter()
        .map(|&l| ((l - m) as f64 - lz) as f32)
        .collect()
}

fn ones(d: usize) -> Tensor {
    Tensor::from_vec(vec![d], vec![1.0; d]).expect("nonzero length")
}
