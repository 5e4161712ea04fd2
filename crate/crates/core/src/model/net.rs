use super::config::{ModelConfig, POOL_SIZE, STAGES};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, CrossAttention, Linear, TokenMixer, TransformerBlock, LATENT_INIT_STD};
use crate::tensor::{rng, Graph, ParamId, ParamStore, Tensor, Var};

/// Depthwise-separable residual block: `x + gelu(pw(gelu(dw(x))))`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub dw: Conv2d,
    pub pw: Conv2d,
}

/// One feature-branch stage: a strided 3x3 conv followed by residual blocks.
#[derive(Clone, Debug)]
pub struct FeatureStage {
    pub stem: Conv2d,
    pub blocks: Vec<ConvBlock>,
}

impl FeatureStage {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.stem.forward(g, store, x)?;
        let mut x = g.gelu(h);
        for b in &self.blocks {
            let h = b.dw.forward(g, store, x)?;
            let h = g.gelu(h);
            let h = b.pw.forward(g, store, h)?;
            let h = g.gelu(h);
            x = g.add(x, h)?;
        }
        Ok(x)
    }
}

/// Feature-to-latent cross-attention `g_i`.
#[derive(Clone, Debug)]
pub struct X2Z {
    pub dwc: Conv2d,
    pub attn: CrossAttention,
}

impl X2Z {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, x: Var) -> Result<Var> {
        let h = self.dwc.forward(g, store, x)?;
        let p = g.adaptive_avg_pool(h, POOL_SIZE)?;
        let tokens = nn::to_tokens(g, p)?;
        self.attn.forward(g, store, z, tokens)
    }
}

/// Latent-to-feature cross-attention `h_i`.
#[derive(Clone, Debug)]
pub struct Z2X {
    pub attn: CrossAttention,
}

impl Z2X {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_tilde: Var, z: Var) -> Result<Var> {
        let s = g.shape(x_tilde).to_vec();
        if s.len() != 4 || s[1] != self.attn.dim {
            return Err(Error::shape(format!("z2x expects [B, {}, H, W], got {s:?}", self.attn.dim)));
        }
        let q = nn::to_tokens(g, x_tilde)?;
        let out = self.attn.forward(g, store, q, z)?;
        nn::from_tokens(g, out, s[2], s[3])
    }
}

/// One classification-branch stage: X2Z, self-attention blocks, mixer.
#[derive(Clone, Debug)]
pub struct ClassStage {
    pub x2z: X2Z,
    pub blocks: Vec<TransformerBlock>,
    /// `None` for the last stage, whose mixer is the identity.
    pub mixer: Option<TokenMixer>,
}

impl ClassStage {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z_prev: Var, x_prev: Var) -> Result<Var> {
        let mut z = self.x2z.forward(g, store, z_prev, x_prev)?;
        for b in &self.blocks {
            z = b.forward(g, store, z)?;
        }
        match &self.mixer {
            Some(m) => m.forward(g, store, z),
            None => Ok(z),
        }
    }
}

/// Layer wiring of a Dynamic Perceiver. Parameters live in a separate
/// [`ParamStore`] so that optimisers and gradient checks can own them.
#[derive(Clone, Debug)]
pub struct DynPerceiver {
    pub config: ModelConfig,
    /// `Z_0`, shape `[L0, D0]`.
    pub latent: ParamId,
    pub features: Vec<FeatureStage>,
    pub class_stages: Vec<ClassStage>,
    pub z2x: Vec<Z2X>,
    pub heads: Vec<Linear>,
    /// `fkt[k]` maps exit `k+1` logits into the input of exit `k+2`.
    pub fkt: Vec<Linear>,
}

/// Results of a full forward pass. Vars index into the graph that ran it.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Logits per exit, `None` for disabled exits.
    pub logits: [Option<Var>; 4],
    /// Token-pooled `Z_3` and `Z_4`.
    pub pooled_latent: [Option<Var>; 2],
    /// Globally pooled `X_4`.
    pub pooled_feature: Option<Var>,
}

impl ForwardOutputs {
    pub fn logits_tensor(&self, g: &Graph, k: usize) -> Option<Tensor> {
        self.logits[k - 1].map(|v| g.tensor(v))
    }
}

impl DynPerceiver {
    /// Build the network and its parameters, initialised deterministically
    /// from `seed` and each parameter's path.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let c = config;
        let mut s = ParamStore::new();
        let (l0, d0) = (c.latent.tokens, c.latent_width(0));
        let z0 = rng::truncated_normal(&mut rng::stream(seed, "latent"), l0 * d0, LATENT_INIT_STD);
        let latent = s.register("latent", Tensor::new(vec![l0, d0], z0)?, false)?;

        let mut features = Vec::new();
        let mut class_stages = Vec::new();
        let mut z2x = Vec::new();
        for i in 1..=STAGES {
            let st = &c.stages[i - 1];
            let (cin, cout) = (c.feature_channels(i - 1), c.channels(i));
            let p = format!("stage{i}.feature");
            let stem = Conv2d::new(&mut s, &format!("{p}.stem"), cin, cout, 3, st.stride, 1, 1, seed)?;
            let blocks = (0..st.conv_blocks)
                .map(|j| {
                    Ok(ConvBlock {
                        dw: Conv2d::depthwise(&mut s, &format!("{p}.block{j}.dw"), cout, 3, seed)?,
                        pw: Conv2d::new(&mut s, &format!("{p}.block{j}.pw"), cout, cout, 1, 1, 0, 1, seed)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            features.push(FeatureStage { stem, blocks });

            let dz = c.latent_width(i - 1);
            let p = format!("stage{i}.class");
            let x2z = X2Z {
                dwc: Conv2d::depthwise(&mut s, &format!("{p}.x2z.dwc"), cin, 3, seed)?,
                attn: CrossAttention::new(&mut s, &format!("{p}.x2z.attn"), dz, cin, Some(POOL_SIZE), seed)?,
            };
            let blocks = (0..st.sa_blocks)
                .map(|j| TransformerBlock::new(&mut s, &format!("{p}.sa{j}"), dz, c.heads(i), st.widening, seed))
                .collect::<Result<Vec<_>>>()?;
            let mixer = if i < STAGES {
                Some(TokenMixer::new(
                    &mut s,
                    &format!("{p}.mixer"),
                    (c.tokens(i - 1), c.tokens(i)),
                    (dz, c.latent_width(i)),
                    seed,
                )?)
            } else {
                None
            };
            class_stages.push(ClassStage { x2z, blocks, mixer });

            z2x.push(Z2X {
                attn: CrossAttention::new(&mut s, &format!("stage{i}.z2x"), cout, c.latent_width(i), None, seed)?,
            });
        }

        let k = c.num_classes;
        let slot = if c.fkt { k } else { 0 };
        let (d4, c4) = (c.latent_width(4), c.channels(4));
        let widths = [c.latent_width(3), d4 + slot, c4 + slot, c4 + d4 + slot];
        let heads = widths
            .iter()
            .enumerate()
            .map(|(j, &w)| Linear::new(&mut s, &format!("exit{}.head", j + 1), w, k, true, seed))
            .collect::<Result<Vec<_>>>()?;
        let fkt = if c.fkt {
            (1..STAGES)
                .map(|j| Linear::new(&mut s, &format!("fkt{}to{}", j, j + 1), k, k, true, seed))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let net = DynPerceiver { config: c.clone(), latent, features, class_stages, z2x, heads, fkt };
        Ok((net, s))
    }

    /// Begin a staged execution on `image` (`[B, C, H, W]`).
    pub fn start<'a>(&'a self, store: &'a ParamStore, g: &'a mut Graph, image: Var) -> Result<Execution<'a>> {
        let im = self.config.image;
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1..] != [im.channels, im.height, im.width] {
            return Err(Error::shape(format!(
                "image must be [B, {}, {}, {}], got {s:?}",
                im.channels, im.height, im.width
            )));
        }
        g.tag(image, "X0");
        let z = g.param(store, self.latent);
        let z0 = g.broadcast_to(z, &[s[0], self.config.tokens(0), self.config.latent_width(0)])?;
        g.tag(z0, "Z0");
        let mut exe = Execution {
            net: self,
            store,
            g,
            x: [None; 5],
            z: [None; 5],
            logits: [None; 4],
            pooled_z: [None; 2],
            pooled_x4: None,
        };
        exe.x[0] = Some(image);
        exe.z[0] = Some(z0);
        Ok(exe)
    }

    /// Run both branches through all stages and every needed exit, in the
    /// same order as early-exit inference.
    pub fn forward(&self, store: &ParamStore, g: &mut Graph, image: Var) -> Result<ForwardOutputs> {
        let mut exe = self.start(store, g, image)?;
        exe.run_to_end()?;
        Ok(exe.outputs())
    }
}

/// Incremental forward pass over one graph. Each method advances the
/// schedule by one unit and reads only the values it is defined on.
pub struct Execution<'a> {
    net: &'a DynPerceiver,
    store: &'a ParamStore,
    g: &'a mut Graph,
    x: [Option<Var>; 5],
    z: [Option<Var>; 5],
    logits: [Option<Var>; 4],
    pooled_z: [Option<Var>; 2],
    pooled_x4: Option<Var>,
}

impl<'a> Execution<'a> {
    pub fn graph(&mut self) -> &mut Graph {
        self.g
    }

    pub fn graph_ref(&self) -> &Graph {
        self.g
    }

    /// `X_i` if computed.
    pub fn feature(&self, i: usize) -> Option<Var> {
        self.x[i]
    }

    /// `Z_i` if computed.
    pub fn latent(&self, i: usize) -> Option<Var> {
        self.z[i]
    }

    pub fn logits(&self, k: usize) -> Option<Var> {
        self.logits[k - 1]
    }

    fn need(slot: Option<Var>, what: &str) -> Result<Var> {
        slot.ok_or_else(|| Error::contract(format!("{what} has not been computed yet")))
    }

    /// `Z_i = psi_i(f_i^att(g_i(Z_{i-1}, X_{i-1})))`.
    pub fn classification_stage(&mut self, i: usize) -> Result<Var> {
        let z_prev = Self::need(self.z[i - 1], &format!("Z{}", i - 1))?;
        let x_prev = Self::need(self.x[i - 1], &format!("X{}", i - 1))?;
        let z = self.net.class_stages[i - 1].forward(self.g, self.store, z_prev, x_prev)?;
        self.g.check_finite(z, &format!("stage{i}.class"))?;
        self.g.tag(z, format!("Z{i}"));
        self.z[i] = Some(z);
        Ok(z)
    }

    /// `X_i = h_i(f_i^conv(X_{i-1}), Z_i)`.
    pub fn feature_stage(&mut self, i: usize) -> Result<Var> {
        let x_prev = Self::need(self.x[i - 1], &format!("X{}", i - 1))?;
        let z = Self::need(self.z[i], &format!("Z{i}"))?;
        let xt = self.net.features[i - 1].forward(self.g, self.store, x_prev)?;
        self.g.check_finite(xt, &format!("stage{i}.feature"))?;
        let x = self.net.z2x[i - 1].forward(self.g, self.store, xt, z)?;
        self.g.check_finite(x, &format!("stage{i}.z2x"))?;
        self.g.tag(x, format!("X{i}"));
        self.x[i] = Some(x);
        Ok(x)
    }

    fn pooled_latent(&mut self, i: usize) -> Result<Var> {
        let slot = i - 3;
        if let Some(p) = self.pooled_z[slot] {
            return Ok(p);
        }
        let z = Self::need(self.z[i], &format!("Z{i}"))?;
        let p = self.g.mean_axis(z, 1)?;
        self.pooled_z[slot] = Some(p);
        Ok(p)
    }

    fn pooled_feature(&mut self) -> Result<Var> {
        if let Some(p) = self.pooled_x4 {
            return Ok(p);
        }
        let x = Self::need(self.x[4], "X4")?;
        let p = nn::global_avg_pool(self.g, x)?;
        self.pooled_x4 = Some(p);
        Ok(p)
    }

    /// `concat(pooled, fkt(prev_logits))` for exit `k`; exit 1, and every
    /// exit when FKT is off, passes `pooled` through.
    pub fn fkt_augment(&mut self, k: usize, pooled: Var) -> Result<Var> {
        if k == 1 || !self.net.config.fkt {
            return Ok(pooled);
        }
        let prev = self.logits[k - 2]
            .ok_or_else(|| Error::contract(format!("exit {k} needs the logits of exit {}", k - 1)))?;
        let t = self.net.fkt[k - 2].forward(self.g, self.store, prev)?;
        self.g.concat_last(&[pooled, t])
    }

    /// Evaluate head `k` on the values available now.
    pub fn exit(&mut self, k: usize) -> Result<Var> {
        if let Some(l) = self.logits[k - 1] {
            return Ok(l);
        }
        let pooled = match k {
            1 => self.pooled_latent(3)?,
            2 => self.pooled_latent(4)?,
            3 => self.pooled_feature()?,
            4 => {
                let f = self.pooled_feature()?;
                let z = self.pooled_latent(4)?;
                self.g.concat_last(&[f, z])?
            }
            _ => return Err(Error::contract(format!("no exit {k}"))),
        };
        let input = self.fkt_augment(k, pooled)?;
        let logits = self.net.heads[k - 1].forward(self.g, self.store, input)?;
        self.g.check_finite(logits, &format!("exit{k}.head"))?;
        self.g.tag(logits, format!("exit{k}"));
        self.logits[k - 1] = Some(logits);
        Ok(logits)
    }

    /// Run the schedule up to and including exit `k`, skipping work already
    /// done. Heads that no enabled exit needs are not evaluated, in which
    /// case `None` is returned.
    pub fn advance_to_exit(&mut self, k: usize) -> Result<Option<Var>> {
        if !(1..=4).contains(&k) {
            return Err(Error::contract(format!("no exit {k}")));
        }
        for step in SCHEDULE {
            match step {
                Step::Class(i) if self.z[i].is_none() => {
                    self.classification_stage(i)?;
                }
                Step::Feature(i) if self.x[i].is_none() => {
                    self.feature_stage(i)?;
                }
                Step::Exit(j) if self.net.config.head_needed(j) => {
                    let l = self.exit(j)?;
                    if j == k {
                        return Ok(Some(l));
                    }
                }
                Step::Exit(j) if j == k => return Ok(None),
                _ => {}
            }
        }
        unreachable!("every exit appears in the schedule")
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        for k in 1..=4 {
            self.advance_to_exit(k)?;
        }
        Ok(())
    }

    pub fn outputs(&self) -> ForwardOutputs {
        let cfg = &self.net.config;
        ForwardOutputs {
            logits: std::array::from_fn(|j| if cfg.exits[j] { self.logits[j] } else { None }),
            pooled_latent: self.pooled_z,
            pooled_feature: self.pooled_x4,
        }
    }
}

#[derive(Clone, Copy)]
enum Step {
    Class(usize),
    Feature(usize),
    Exit(usize),
}

/// Early-exit order: a classification stage always runs before the feature
/// stage it feeds, and each exit fires as soon as its inputs exist.
const SCHEDULE: [Step; 12] = [
    Step::Class(1),
    Step::Feature(1),
    Step::Class(2),
    Step::Feature(2),
    Step::Class(3),
    Step::Exit(1),
    Step::Feature(3),
    Step::Class(4),
    Step::Exit(2),
    Step::Feature(4),
    Step::Exit(3),
    Step::Exit(4),
];
