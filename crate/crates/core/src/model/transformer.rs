use super::params::{Attention, Linear, Norm};
use super::schedule::positional_encoding;
use super::ModelParams;
use crate::distributions::{predictive_distribution, softmax_distribution, DirichletParams, EmotionDistribution};
use crate::error::{Error, Result};
use crate::fusion::{fuse_rows, FusionVars};
use crate::numerics::{Graph, RngStream, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Training-time dropout: a rate and the stream the masks are drawn from.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut RngStream,
}

fn dropout(g: &mut Graph, x: Var, ctx: &mut Option<Dropout<'_>>) -> Var {
    let Some(d) = ctx.as_mut() else { return x };
    if d.rate == 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - d.rate);
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n).map(|_| if d.rng.uniform() < d.rate { 0.0 } else { keep }).collect();
    let m = g.constant(Tensor::new(shape, mask));
    g.mul(x, m)
}

/// Model parameters registered on a graph.
pub struct BoundModel<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl<'p> BoundModel<'p> {
    /// With `trainable` the parameters become differentiable leaves;
    /// otherwise they are constants and no gradient bookkeeping is done.
    pub fn bind(params: &'p ModelParams, g: &mut Graph, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundModel { params, vars }
    }

    /// Uses `vars`, already on the graph in layout order, as the
    /// parameters; only the shapes of `params` are read.
    pub fn rebind(params: &'p ModelParams, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), params.tensors().len(), "one var per parameter tensor");
        BoundModel { params, vars: vars.to_vec() }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Var {
        let y = g.matmul(x, self.v(l.w));
        g.add_row(y, self.v(l.b))
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Var {
        g.layer_norm(x, self.v(n.gain), self.v(n.bias), LAYER_NORM_EPS)
    }

    /// Multi-head attention where query row `i` sees key rows `0..=i`.
    fn attention(&self, g: &mut Graph, query: Var, memory: Var, a: &Attention) -> Var {
        let cfg = self.params.config();
        let dh = cfg.head_dim();
        let q = self.linear(g, query, a.q);
        let k = self.linear(g, memory, a.k);
        let v = self.linear(g, memory, a.v);
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..cfg.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_nt(qh, kh);
                let scores = g.scale(scores, scale);
                let weights = g.causal_softmax(scores);
                g.matmul(weights, vh)
            })
            .collect();
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.linear(g, joined, a.out)
    }

    fn feedforward(&self, g: &mut Graph, x: Var, ff1: Linear, ff2: Linear, drop: &mut Option<Dropout<'_>>) -> Var {
        let h = self.linear(g, x, ff1);
        let h = g.relu(h);
        let h = dropout(g, h, drop);
        self.linear(g, h, ff2)
    }

    fn residual(&self, g: &mut Graph, x: Var, sub: Var, n: Norm, drop: &mut Option<Dropout<'_>>) -> Var {
        let sub = dropout(g, sub, drop);
        let s = g.add(x, sub);
        self.norm(g, s, n)
    }

    fn add_positions(&self, g: &mut Graph, x: Var) -> Var {
        let (n, d) = g.value(x).dims2();
        let rows: Vec<Vec<f64>> = (0..n).map(|p| positional_encoding(p, d)).collect();
        let pe = g.constant(Tensor::from_rows(&rows));
        g.add(x, pe)
    }

    /// Fuses `N x Q` audio and text features and runs the encoder stack.
    pub fn encode(&self, g: &mut Graph, audio: &Tensor, text: &Tensor, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
        let cfg = self.params.config();
        for (name, t) in [("audio", audio), ("text", text)] {
            if t.cols() != cfg.feature_dim {
                return Err(Error::Usage(format!(
                    "{name} features have width {}, model expects {}",
                    t.cols(),
                    cfg.feature_dim
                )));
            }
        }
        if audio.rows() != text.rows() || audio.rows() == 0 {
            return Err(Error::Usage(format!(
                "audio has {} rows and text {}; need equal, non-zero lengths",
                audio.rows(),
                text.rows()
            )));
        }
        let layout = self.params.layout();
        let f = layout.fusion;
        let fv = FusionVars {
            u1: self.v(f.u1),
            u2: self.v(f.u2),
            p: self.v(f.p),
            b: self.v(f.b),
            v1: self.v(f.v1),
            v2: self.v(f.v2),
        };
        let a = g.constant(audio.clone());
        let t = g.constant(text.clone());
        let fused = fuse_rows(g, a, t, &fv);
        let x = self.linear(g, fused, layout.encoder_in);
        let mut x = self.add_positions(g, x);
        x = dropout(g, x, drop);
        for block in &layout.encoder {
            let a = self.attention(g, x, x, &block.attn);
            x = self.residual(g, x, a, block.norm1, drop);
            let f = self.feedforward(g, x, block.ff1, block.ff2, drop);
            x = self.residual(g, x, f, block.norm2, drop);
        }
        Ok(x)
    }

    /// Decoder over `history.rows() + 1` steps: the begin-of-dialogue vector
    /// followed by the embedded previous distributions. Returns logits,
    /// one row per step.
    pub fn decode(&self, g: &mut Graph, memory: Var, history: &Tensor, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
        let cfg = self.params.config();
        let layout = self.params.layout();
        let steps = history.rows() + 1;
        if history.cols() != cfg.classes {
            return Err(Error::Usage(format!(
                "history rows have {} classes, model expects {}",
                history.cols(),
                cfg.classes
            )));
        }
        if steps > g.value(memory).rows() {
            return Err(Error::Usage(format!(
                "decoder asked for {steps} steps over {} encoded utterances",
                g.value(memory).rows()
            )));
        }
        let begin = self.v(layout.begin);
        let y = if history.rows() == 0 {
            begin
        } else {
            let h = g.constant(history.clone());
            let e = self.linear(g, h, layout.decoder_in);
            g.concat_rows(&[begin, e])
        };
        let y = self.add_positions(g, y);
        let mut y = dropout(g, y, drop);
        for block in &layout.decoder {
            let a = self.attention(g, y, y, &block.self_attn);
            y = self.residual(g, y, a, block.norm1, drop);
            let c = self.attention(g, y, memory, &block.cross_attn);
            y = self.residual(g, y, c, block.norm2, drop);
            let f = self.feedforward(g, y, block.ff1, block.ff2, drop);
            y = self.residual(g, y, f, block.norm3, drop);
        }
        Ok(self.linear(g, y, layout.head))
    }

    /// Full teacher-style pass: `history` holds the distributions fed to
    /// steps `2..=N` (`N - 1` rows). Returns `N x K` logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        audio: &Tensor,
        text: &Tensor,
        history: &Tensor,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        if history.rows() + 1 != audio.rows() {
            return Err(Error::Usage(format!(
                "history has {} rows for a {}-utterance dialogue (expected {})",
                history.rows(),
                audio.rows(),
                audio.rows().saturating_sub(1)
            )));
        }
        let memory = self.encode(g, audio, text, drop)?;
        self.decode(g, memory, history, drop)
    }
}

/// Free-running output for one dialogue.
#[derive(Clone, Debug, PartialEq)]
pub struct DialoguePrediction {
    pub logits: Vec<Vec<f64>>,
    pub distributions: Vec<EmotionDistribution>,
    /// Concentration parameters, present for Dirichlet-trained models.
    pub alphas: Option<Vec<DirichletParams>>,
}

/// Auto-regressive decoding: step `n` consumes the model's own distribution
/// from step `n - 1`.
pub fn predict_dialogue(
    params: &ModelParams,
    audio: &Tensor,
    text: &Tensor,
    dirichlet: bool,
) -> Result<DialoguePrediction> {
    let k = params.config().classes;
    let mut g = Graph::new();
    let model = BoundModel::bind(params, &mut g, false);
    let memory = model.encode(&mut g, audio, text, &mut None)?;
    let n = audio.rows();
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    let mut distributions = Vec::with_capacity(n);
    let mut alphas = dirichlet.then(Vec::new);
    for step in 0..n {
        let h = Tensor::new(vec![step, k], history.concat());
        let out = model.decode(&mut g, memory, &h, &mut None)?;
        let z = g.value(out).row(step).to_vec();
        let dist = match alphas.as_mut() {
            Some(list) => {
                let alpha = DirichletParams::from_logits(&z)?;
                let d = predictive_distribution(&alpha);
                list.push(alpha);
                d
            }
            None => softmax_distribution(&z)?,
        };
        history.push(dist.probs().to_vec());
        logits.push(z);
        distributions.push(dist);
    }
    Ok(DialoguePrediction { logits, distributions, alphas })
}
