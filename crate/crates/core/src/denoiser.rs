//! The conditional noise predictor: a graph convolution over the road graph
//! feeding a two-level UNet with cross-attention on the encoded prompt.

use rand::Rng;
use serde::{Deserialize, Serialize};
use ttg_tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::diffusion::{sample, NoisePredictor, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::nn::{raw_param, Conv1x1, Conv3x3, GroupNorm, Linear};
use crate::road::{NormalizedAdjacency, CHANNELS};
use crate::text::{tokenize, ContextEmbedding, EncoderConfig, TextEncoder, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcnMode {
    /// the UNet sees only the graph features
    Replace,
    /// the UNet sees `[x_t, f(x_t)]` on 6 channels
    Concat,
}

impl std::str::FromStr for GcnMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "replace" => Ok(GcnMode::Replace),
            "concat" => Ok(GcnMode::Concat),
            other => Err(format!("unknown gcn mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_side: usize,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub gcn_mode: GcnMode,
    pub widths: [usize; 2],
    pub groups: usize,
    pub time_base: usize,
    pub time_dim: usize,
    /// learned per-pixel bias after the input conv
    pub pos_embed: bool,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn desk(grid_side: usize) -> Self {
        Self {
            grid_side,
            gcn_layers: 2,
            gcn_hidden: 16,
            gcn_mode: GcnMode::Replace,
            widths: [32, 64],
            groups: 8,
            time_base: 32,
            time_dim: 64,
            pos_embed: true,
            encoder: EncoderConfig::default(),
        }
    }

    /// 4x4 grid with tiny widths, for gradient checks.
    pub fn toy() -> Self {
        Self {
            grid_side: 4,
            gcn_layers: 2,
            gcn_hidden: 5,
            gcn_mode: GcnMode::Replace,
            widths: [4, 8],
            groups: 2,
            time_base: 8,
            time_dim: 6,
            pos_embed: true,
            encoder: EncoderConfig {
                vocab_size: 96,
                l_max: 8,
                d_ctx: 6,
                heads: 2,
                blocks: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 2 || self.grid_side % 2 != 0 {
            return Err(invalid("grid side must be even"));
        }
        if self.gcn_layers > 3 {
            return Err(invalid("gcn_layers must be in 0..=3"));
        }
        if self.widths.iter().any(|w| *w == 0 || w % self.groups != 0) {
            return Err(invalid("widths must be positive multiples of the group count"));
        }
        if self.time_base == 0 || self.time_base % 2 != 0 {
            return Err(invalid("time_base must be even"));
        }
        Ok(())
    }

    pub fn n_padded(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn numel(&self) -> usize {
        CHANNELS * self.n_padded()
    }

    fn unet_in(&self) -> usize {
        match self.gcn_mode {
            GcnMode::Replace => CHANNELS,
            GcnMode::Concat => 2 * CHANNELS,
        }
    }
}

/// Graph convolution stack; empty means identity.
#[derive(Debug, Clone)]
pub struct Gcn {
    weights: Vec<ParamId>,
}

impl Gcn {
    pub fn new<R: Rng>(store: &mut ParamStore, layers: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let dims: Vec<usize> = match layers {
            0 => vec![],
            1 => vec![CHANNELS, CHANNELS],
            k => {
                let mut d = vec![CHANNELS];
                d.extend(std::iter::repeat(hidden).take(k - 1));
                d.push(CHANNELS);
                d
            }
        };
        let weights = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| raw_param(store, &format!("gcn.w{i}"), &[w[0], w[1]], 1.0 / (w[0] as f64).sqrt(), rng))
            .collect::<Result<_>>()?;
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[ParamId] {
        &self.weights
    }

    pub fn forward(&self, tape: &mut Tape, nodes: Var, a_hat: Var) -> Result<Var> {
        let ws: Vec<Var> = self.weights.iter().map(|w| tape.param(*w)).collect();
        gcn_forward(tape, nodes, a_hat, &ws)
    }
}

/// `sigmoid(A ... relu(A X W_0) ... W_last)`; identity for no weights.
pub fn gcn_forward(tape: &mut Tape, nodes: Var, a_hat: Var, weights: &[Var]) -> Result<Var> {
    let mut h = nodes;
    for (i, w) in weights.iter().enumerate() {
        let hw = tape.matmul(h, *w)?;
        let z = tape.matmul(a_hat, hw)?;
        h = if i + 1 == weights.len() {
            tape.sigmoid(z)
        } else {
            tape.relu(z)
        };
    }
    Ok(h)
}

/// `softmax(Q K^T / sqrt(d), mask) V`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &[bool]) -> Result<Var> {
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let a = tape.softmax(scores, Some(mask))?;
    Ok(tape.matmul(a, v)?)
}

/// Queries from spatial features, keys and values from the prompt context.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl CrossAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        groups: usize,
        d_ctx: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups)?,
            q: Linear::new(store, &format!("{name}.q"), channels, channels, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_ctx, channels, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_ctx, channels, false, rng)?,
            o: Linear::new(store, &format!("{name}.o"), channels, channels, true, rng)?,
        })
    }

    /// Residual attention over `x[c, h, w]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, ctx: Var, mask: &[bool]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let h = self.norm.forward(tape, x)?;
        let h = tape.reshape(h, &[c, hw])?;
        let feats = tape.transpose(h)?;
        let out = self.attend_rows(tape, feats, ctx, mask)?;
        let out = tape.transpose(out)?;
        let out = tape.reshape(out, &shape)?;
        Ok(tape.add(x, out)?)
    }

    /// Projected attention of feature rows `[L_f, c]` over the context.
    pub fn attend_rows(&self, tape: &mut Tape, feats: Var, ctx: Var, mask: &[bool]) -> Result<Var> {
        let q = self.q.forward(tape, feats)?;
        let k = self.k.forward(tape, ctx)?;
        let v = self.v.forward(tape, ctx)?;
        let a = attend(tape, q, k, v, mask)?;
        self.o.forward(tape, a)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3x3,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv3x3,
    skip: Option<Conv1x1>,
}

impl ResBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_in, cfg.groups)?,
            conv1: Conv3x3::new(store, &format!("{name}.conv1"), c_in, c_out, 1, rng)?,
            temb: Linear::new(store, &format!("{name}.temb"), cfg.time_dim, c_out, true, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out, cfg.groups)?,
            conv2: Conv3x3::new(store, &format!("{name}.conv2"), c_out, c_out, 1, rng)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv1x1::new(store, &format!("{name}.skip"), c_in, c_out, rng)?)
            },
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, h)?;
        let e = self.temb.forward(tape, temb)?;
        let c = tape.shape(e)[1];
        let e = tape.reshape(e, &[c])?;
        let h = tape.add_col(h, e)?;
        let h = self.norm2.forward(tape, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, h)?;
        let s = match &self.skip {
            Some(skip) => skip.forward(tape, x)?,
            None => x,
        };
        Ok(tape.add(s, h)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<(ResBlock, CrossAttention)>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_first: usize,
        c: usize,
        n: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let c_in = if i == 0 { c_first } else { c };
            blocks.push((
                ResBlock::new(store, &format!("{name}.res{i}"), c_in, c, cfg, rng)?,
                CrossAttention::new(store, &format!("{name}.attn{i}"), c, cfg.groups, cfg.encoder.d_ctx, rng)?,
            ));
        }
        Ok(Self { blocks })
    }

    fn forward(&self, tape: &mut Tape, mut x: Var, temb: Var, ctx: Var, mask: &[bool]) -> Result<Var> {
        for (res, attn) in &self.blocks {
            x = res.forward(tape, x, temb)?;
            x = attn.forward(tape, x, ctx, mask)?;
        }
        Ok(x)
    }
}

/// Sinusoidal features of `t`, shape `[1, base]`.
pub fn timestep_features(t: usize, base: usize) -> Tensor {
    let half = base / 2;
    let mut v = vec![0.0; base];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new([1, base], v).expect("shape matches")
}

#[derive(Debug, Clone)]
pub struct UNet {
    t1: Linear,
    t2: Linear,
    conv_in: Conv3x3,
    pos: Option<ParamId>,
    down1: Stage,
    downsample: Conv3x3,
    down2: Stage,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid2: ResBlock,
    up2: Stage,
    upconv: Conv3x3,
    up1: Stage,
    norm_out: GroupNorm,
    conv_out: Conv3x3,
    time_base: usize,
}

impl UNet {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let [c1, c2] = cfg.widths;
        let side = cfg.grid_side;
        Ok(Self {
            t1: Linear::new(store, "unet.time1", cfg.time_base, cfg.time_dim, true, rng)?,
            t2: Linear::new(store, "unet.time2", cfg.time_dim, cfg.time_dim, true, rng)?,
            conv_in: Conv3x3::new(store, "unet.conv_in", cfg.unet_in(), c1, 1, rng)?,
            pos: if cfg.pos_embed {
                Some(raw_param(store, "unet.pos", &[c1, side, side], 0.0, rng)?)
            } else {
                None
            },
            down1: Stage::new(store, "unet.down1", c1, c1, 2, cfg, rng)?,
            downsample: Conv3x3::new(store, "unet.downsample", c1, c2, 2, rng)?,
            down2: Stage::new(store, "unet.down2", c2, c2, 2, cfg, rng)?,
            mid1: ResBlock::new(store, "unet.mid1", c2, c2, cfg, rng)?,
            mid_attn: CrossAttention::new(store, "unet.mid_attn", c2, cfg.groups, cfg.encoder.d_ctx, rng)?,
            mid2: ResBlock::new(store, "unet.mid2", c2, c2, cfg, rng)?,
            up2: Stage::new(store, "unet.up2", 2 * c2, c2, 2, cfg, rng)?,
            upconv: Conv3x3::new(store, "unet.upconv", c2, c1, 1, rng)?,
            up1: Stage::new(store, "unet.up1", 2 * c1, c1, 2, cfg, rng)?,
            norm_out: GroupNorm::new(store, "unet.norm_out", c1, cfg.groups)?,
            conv_out: Conv3x3::zeros(store, "unet.conv_out", c1, CHANNELS, rng)?,
            time_base: cfg.time_base,
        })
    }

    pub fn time_embedding(&self, tape: &mut Tape, t: usize) -> Result<Var> {
        let f = tape.constant(timestep_features(t, self.time_base));
        let h = self.t1.forward(tape, f)?;
        let h = tape.silu(h);
        let h = self.t2.forward(tape, h)?;
        Ok(tape.silu(h))
    }

    /// `x[c_in, H, W]` to a noise estimate `[3, H, W]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, t: usize, ctx: Var, mask: &[bool]) -> Result<Var> {
        let temb = self.time_embedding(tape, t)?;
        let mut h = self.conv_in.forward(tape, x)?;
        if let Some(pos) = self.pos {
            let p = tape.param(pos);
            h = tape.add(h, p)?;
        }
        let s1 = self.down1.forward(tape, h, temb, ctx, mask)?;
        let h = self.downsample.forward(tape, s1)?;
        let s2 = self.down2.forward(tape, h, temb, ctx, mask)?;
        let h = self.mid1.forward(tape, s2, temb)?;
        let h = self.mid_attn.forward(tape, h, ctx, mask)?;
        let h = self.mid2.forward(tape, h, temb)?;
        let h = tape.concat(&[h, s2])?;
        let h = self.up2.forward(tape, h, temb, ctx, mask)?;
        let h = tape.upsample2x(h)?;
        let h = self.upconv.forward(tape, h)?;
        let h = tape.concat(&[h, s1])?;
        let h = self.up1.forward(tape, h, temb, ctx, mask)?;
        let h = self.norm_out.forward(tape, h)?;
        let h = tape.silu(h);
        self.conv_out.forward(tape, h)
    }
}

/// Structure of the full noise predictor; weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: ModelConfig,
    pub encoder: TextEncoder,
    pub gcn: Gcn,
    pub unet: UNet,
}

impl Denoiser {
    pub fn new<R: Rng>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = TextEncoder::new(store, config.encoder, rng)?;
        let gcn = Gcn::new(store, config.gcn_layers, config.gcn_hidden, rng)?;
        let unet = UNet::new(store, &config, rng)?;
        Ok(Self {
            config,
            encoder,
            gcn,
            unet,
        })
    }

    /// Graph features of a grid `x[3, H, W]`, returned in grid layout.
    pub fn graph_features(&self, tape: &mut Tape, x: Var, a_hat: Var) -> Result<Var> {
        let n = self.config.n_padded();
        let side = self.config.grid_side;
        if self.gcn.weights.is_empty() {
            return Ok(x);
        }
        let flat = tape.reshape(x, &[CHANNELS, n])?;
        let nodes = tape.transpose(flat)?;
        let f = self.gcn.forward(tape, nodes, a_hat)?;
        let f = tape.transpose(f)?;
        Ok(tape.reshape(f, &[CHANNELS, side, side])?)
    }

    /// Noise estimate for `x_t` given an already encoded context.
    pub fn predict_noise(&self, tape: &mut Tape, x: Var, t: usize, ctx: Var, mask: &[bool], a_hat: Var) -> Result<Var> {
        if !tape.value(x).is_finite() {
            return Err(invalid("non-finite denoiser input"));
        }
        let f = self.graph_features(tape, x, a_hat)?;
        let input = match self.config.gcn_mode {
            GcnMode::Replace => f,
            GcnMode::Concat => tape.concat(&[x, f])?,
        };
        self.unet.forward(tape, input, t, ctx, mask)
    }

    /// Encoder plus [`predict_noise`](Self::predict_noise) on one tape.
    pub fn forward(&self, tape: &mut Tape, x: Var, t: usize, tokens: &TokenSequence, a_hat: Var) -> Result<Var> {
        let ctx = self.encoder.forward(tape, tokens)?;
        self.predict_noise(tape, x, t, ctx, &tokens.mask, a_hat)
    }
}

/// Trained weights with everything needed to turn a prompt into a grid.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Denoiser,
    pub store: ParamStore,
    pub a_hat: Tensor,
    pub schedule: NoiseSchedule,
    pub vocab: Vocabulary,
}

impl Model {
    pub fn new<R: Rng>(
        config: ModelConfig,
        a_hat: &NormalizedAdjacency,
        schedule: NoiseSchedule,
        vocab: Vocabulary,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Denoiser::new(&mut store, config, rng)?;
        Self::from_parts(net, store, a_hat, schedule, vocab)
    }

    pub fn from_parts(
        net: Denoiser,
        store: ParamStore,
        a_hat: &NormalizedAdjacency,
        schedule: NoiseSchedule,
        vocab: Vocabulary,
    ) -> Result<Self> {
        let n = net.config.n_padded();
        if a_hat.n_padded() != n {
            return Err(invalid(format!(
                "adjacency has {} nodes but the grid has {n}",
                a_hat.n_padded()
            )));
        }
        if vocab.size > net.config.encoder.vocab_size {
            return Err(invalid("vocabulary larger than the embedding table"));
        }
        Ok(Self {
            a_hat: Tensor::new([n, n], a_hat.entries().to_vec())?,
            net,
            store,
            schedule,
            vocab,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        tokenize(text, &self.vocab, self.net.config.encoder.l_max)
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Result<ContextEmbedding> {
        self.net.encoder.encode(&self.store, tokens)
    }

    /// One noise prediction without recording gradients.
    pub fn predict(&self, x_t: &[f64], t: usize, ctx: &ContextEmbedding) -> Result<Vec<f64>> {
        let side = self.net.config.grid_side;
        let mut tape = Tape::with_params(&self.store);
        let x = tape.constant(Tensor::new([CHANNELS, side, side], x_t.to_vec())?);
        let c = tape.constant(ctx.values.clone());
        let a = tape.constant(self.a_hat.clone());
        let out = self.net.predict_noise(&mut tape, x, t, c, &ctx.mask, a)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Ancestral sample for an encoded prompt, grid layout `[3, H, W]`.
    pub fn sample_grid(&self, ctx: &ContextEmbedding, seed: u64) -> Result<Vec<f64>> {
        let predictor = Conditioned { model: self, ctx };
        sample(&predictor, self.net.config.numel(), &self.schedule, seed)
    }
}

/// A model bound to one prompt.
pub struct Conditioned<'a> {
    pub model: &'a Model,
    pub ctx: &'a ContextEmbedding,
}

impl NoisePredictor for Conditioned<'_> {
    fn predict(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self.model.predict(x_t, t, self.ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_linear_schedule;
    use crate::road::{build_normalized_adjacency, AdjacencyMatrix, Road, RoadGraph};
    use ttg_tensor::rng::stream;

    fn path_graph(n: usize) -> RoadGraph {
        RoadGraph {
            roads: (0..n)
                .map(|i| Road {
                    road_id: i,
                    name: format!("r{i}"),
                    length_m: 100.0,
                    polyline: vec![[0.0, 0.0], [1.0, 0.0]],
                })
                .collect(),
            edges: (1..n).map(|i| [i - 1, i]).collect(),
        }
    }

    fn toy_model(cfg: ModelConfig) -> Model {
        let g = path_graph(cfg.n_padded() - 2);
        let a = build_normalized_adjacency(&AdjacencyMatrix::from_graph(&g).unwrap(), cfg.n_padded()).unwrap();
        let s = make_linear_schedule(10, 0.00085, 0.012).unwrap();
        Model::new(cfg, &a, s, Vocabulary::closed(), &mut stream(1, 0)).unwrap()
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let m = toy_model(ModelConfig::toy());
        let tokens = m.tokenize("Monday, 08:00.").unwrap();
        let ctx = m.encode(&tokens).unwrap();
        let x: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin()).collect();
        assert!(m.predict(&x, 3, &ctx).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        for side in [8, 36] {
            let cfg = ModelConfig {
                grid_side: side,
                widths: [8, 16],
                groups: 4,
                ..ModelConfig::desk(side)
            };
            let m = toy_model(cfg);
            let ctx = m.encode(&m.tokenize("Sunday, 23:56.").unwrap()).unwrap();
            let x = vec![0.1; cfg.numel()];
            assert_eq!(m.predict(&x, 5, &ctx).unwrap().len(), 3 * side * side);
        }
    }

    #[test]
    fn timestep_features_are_distinct() {
        let base = 32;
        let all: Vec<Tensor> = (1..=1000).map(|t| timestep_features(t, base)).collect();
        for i in 0..all.len() {
            for j in (i + 1)..all.len().min(i + 50) {
                assert!(all[i].max_abs_diff(&all[j]) > 1e-6);
            }
        }
        assert_eq!(timestep_features(7, base), timestep_features(7, base));
    }

    #[test]
    fn rejects_odd_grid_and_deep_gcn() {
        let mut cfg = ModelConfig::toy();
        cfg.grid_side = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.gcn_layers = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_parses() {
        assert_eq!("replace".parse::<GcnMode>().unwrap(), GcnMode::Replace);
        assert_eq!("concat".parse::<GcnMode>().unwrap(), GcnMode::Concat);
        assert!("both".parse::<GcnMode>().is_err());
    }
}
