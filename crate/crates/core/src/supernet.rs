//! The weight-sharing supernet: maximal parameters plus elastic execution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, SubnetConfig, MAX_KERNEL};
use crate::autograd::{Tape, Var};
use crate::elastic::{transform_keys, SupernetSource};
use crate::error::{Error, Result};
use crate::exec::{self, ForwardOutput};
use crate::layers::{init_conv, init_linear};
use crate::params::{ParamKind, ParamStore};
use crate::plan::{self, BlockPlan, ExitKind, MbPlan, NetPlan};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupernetOptions {
    /// One pair of kernel transformation matrices per elastic block instead
    /// of a single pair shared by all blocks.
    #[serde(default)]
    pub per_block_transforms: bool,
}

#[derive(Clone, Debug)]
pub struct Supernet {
    pub arch: ArchSpec,
    pub options: SupernetOptions,
    pub store: ParamStore,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, key: String, shape: &[usize]) -> Result<()> {
        let t = init_conv(shape, self.rng);
        self.store.insert(key, ParamKind::Weight, t)?;
        Ok(())
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize) -> Result<()> {
        let t = init_linear(&[out, inp], self.rng);
        self.store.insert(format!("{prefix}.w"), ParamKind::Weight, t)?;
        self.store.insert(format!("{prefix}.b"), ParamKind::Bias, Tensor::zeros(&[out]))?;
        Ok(())
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        let s = &mut self.store;
        s.insert(format!("{prefix}.gamma"), ParamKind::BnScale, Tensor::full(&[c], 1.0))?;
        s.insert(format!("{prefix}.beta"), ParamKind::BnShift, Tensor::zeros(&[c]))?;
        s.insert(format!("{prefix}.mean"), ParamKind::Buffer, Tensor::zeros(&[c]))?;
        s.insert(format!("{prefix}.var"), ParamKind::Buffer, Tensor::full(&[c], 1.0))?;
        Ok(())
    }

    fn transforms(&mut self, k75: String, k53: String) -> Result<()> {
        self.store.insert(k75, ParamKind::Transform, Tensor::eye(25))?;
        self.store.insert(k53, ParamKind::Transform, Tensor::eye(9))?;
        Ok(())
    }

    /// Parameters of an MB block at its maximal width and kernel.
    fn mb(&mut self, m: &MbPlan) -> Result<()> {
        let p = &m.prefix;
        if m.expand {
            self.conv(format!("{p}.expand.w"), &[m.hidden, m.in_channels, 1, 1])?;
            self.bn(&format!("{p}.expand.bn"), m.hidden)?;
        }
        self.conv(format!("{p}.dw.w"), &[m.hidden, 1, m.kernel, m.kernel])?;
        self.bn(&format!("{p}.dw.bn"), m.hidden)?;
        if let Some(r) = m.se_reduce {
            self.pooled_conv(format!("{p}.se.reduce.w"), r, m.hidden)?;
            self.store.insert(format!("{p}.se.reduce.b"), ParamKind::Bias, Tensor::zeros(&[r]))?;
            self.pooled_conv(format!("{p}.se.expand.w"), m.hidden, r)?;
            self.store.insert(format!("{p}.se.expand.b"), ParamKind::Bias, Tensor::zeros(&[m.hidden]))?;
        }
        self.conv(format!("{p}.project.w"), &[m.out_channels, m.hidden, 1, 1])?;
        self.bn(&format!("{p}.project.bn"), m.out_channels)
    }

    fn block(&mut self, b: &BlockPlan) -> Result<()> {
        match b {
            BlockPlan::Mb(m) => self.mb(m),
            BlockPlan::Pointwise {
                prefix,
                in_channels,
                out_channels,
                ..
            } => {
                self.conv(format!("{prefix}.conv.w"), &[*out_channels, *in_channels, 1, 1])?;
                self.bn(&format!("{prefix}.bn"), *out_channels)
            }
            BlockPlan::Light {
                prefix,
                in_channels,
                out_channels,
                project,
                ..
            } => {
                if *project {
                    self.conv(format!("{prefix}.conv.w"), &[*out_channels, *in_channels, 1, 1])?;
                }
                self.bn(&format!("{prefix}.bn"), *out_channels)
            }
        }
    }

    /// Pointwise layers applied to pooled features are stored as 2-D
    /// matrices but initialized as 1x1 convolutions.
    fn pooled_conv(&mut self, key: String, out: usize, inp: usize) -> Result<()> {
        let t = init_conv(&[out, inp, 1, 1], self.rng).reshape(&[out, inp])?;
        self.store.insert(key, ParamKind::Weight, t)?;
        Ok(())
    }
}

impl Supernet {
    /// Builds a supernet with freshly initialized maximal parameters.
    pub fn new(arch: ArchSpec, options: SupernetOptions, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let hc = arch.channels(arch.head_channels);
        b.conv("head.conv.w".into(), &[hc, 3, 3, 3])?;
        b.bn("head.bn", hc)?;
        b.mb(&plan::head_block(&arch))?;
        if !options.per_block_transforms {
            let (k75, k53) = transform_keys(false, "");
            b.transforms(k75, k53)?;
        }
        for s in 0..arch.n_stages() {
            for level in 0..arch.stages[s].n_blocks {
                let m = plan::mb_plan(&arch, s, level, MAX_KERNEL, crate::arch::MAX_EXPANSION);
                if options.per_block_transforms {
                    let (k75, k53) = transform_keys(true, &m.prefix);
                    b.transforms(k75, k53)?;
                }
                b.mb(&m)?;
                if arch.parallel_blocks {
                    b.block(&plan::pointwise_block(&arch, s, level))?;
                    b.block(&plan::light_block(&arch, s, level))?;
                }
            }
        }
        let exit_stages: Vec<usize> = if arch.early_exits {
            (0..arch.n_stages()).collect()
        } else {
            vec![arch.n_stages() - 1]
        };
        for s in exit_stages {
            let e = plan::exit_plan(&arch, s);
            let p = &e.prefix;
            let (fc_in, final_width) = match e.kind {
                ExitKind::Early { final_width } => (e.in_channels, final_width),
                ExitKind::Tail { tail_width, final_width } => {
                    b.conv(format!("{p}.conv.w"), &[tail_width, e.in_channels, 1, 1])?;
                    b.bn(&format!("{p}.bn"), tail_width)?;
                    (tail_width, final_width)
                }
            };
            b.pooled_conv(format!("{p}.fc1.w"), final_width, fc_in)?;
            b.linear(&format!("{p}.classifier"), arch.n_classes, final_width)?;
        }
        Ok(Self {
            arch,
            options,
            store: b.store,
        })
    }

    /// Trainable parameter count of the whole supernet.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Records the forward pass of subnet `cfg` on `x` (`[batch, 3, r, r]`
    /// with `r == cfg.resolution`). Returns logits for every active exit.
    pub fn forward(&self, tape: &mut Tape, x: Var, cfg: &SubnetConfig) -> Result<ForwardOutput> {
        let plan = NetPlan::new(&self.arch, cfg)?;
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.resolution || s[3] != cfg.resolution {
            return Err(Error::Shape(format!(
                "input {s:?} does not match [batch, 3, {r}, {r}]",
                r = cfg.resolution
            )));
        }
        let src = SupernetSource::new(self, tape.is_train());
        exec::run(&plan, &src, tape, x)
    }

    /// Inference-mode logits of every active exit.
    pub fn infer(&self, batch: &Tensor, cfg: &SubnetConfig) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new(false);
        let x = tape.constant(batch.clone_value());
        let out = self.forward(&mut tape, x, cfg)?;
        Ok(out.logits.iter().map(|&v| tape.value(v).clone_value()).collect())
    }
}
