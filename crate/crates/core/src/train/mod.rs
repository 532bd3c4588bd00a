//! The alternating training schedule: at outer iteration `it` the E-step
//! runs `min(it, inner_cap)` rounds of `d_steps` critic updates plus one
//! generator/text-encoder update, then the M-step runs as many CSEM updates.

mod checkpoint;
mod config;
mod optim;
mod sampler;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngPosition};
pub use config::{Ablation, TrainConfig, WrongClassMode, CONFIG_KEYS};
pub use optim::RmsPropState;
pub use sampler::{kmeans, BatchSampler, LabeledBatch, WrongClassSelector, KMEANS_ITERS};

use crate::data::{validate_split, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::losses::{
    clip_weights, csem_step_loss, discriminator_loss, generator_loss, joint_loss, LossBreakdown,
    LossConfig, Representative,
};
use crate::model::{bind, init_params, Block, BoundModel, ModelParams};
use crate::tensor::{Gradients, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::Write;

// keeps the k-means initialization independent of the training stream
const KMEANS_SEED_SALT: u64 = 0x6b6d_6561_6e73;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    E,
    M,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::E => "E",
            Phase::M => "M",
            Phase::Joint => "J",
        })
    }
}

/// One row of the training log. Terms a phase does not compute are 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub outer_it: usize,
    pub phase: Phase,
    /// 1-based inner step within the outer iteration.
    pub step: usize,
    /// Mean critic loss over the step's `d_steps` updates.
    pub l_d: f64,
    pub l_g_adv: f64,
    pub div_r: f64,
    pub div_w: f64,
    pub reg: f64,
    pub l_t: f64,
}

pub const LOG_HEADER: &str = "outer_it,phase,step,l_d,l_g_adv,div_r,div_w,reg,l_t";

pub fn write_log<W: Write>(records: &[LogRecord], mut w: W) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.outer_it, r.phase, r.step, r.l_d, r.l_g_adv, r.div_r, r.div_w, r.reg, r.l_t
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub outer_done: usize,
    pub d_updates: usize,
    pub g_updates: usize,
    pub csem_updates: usize,
}

/// One RMSProp state per block.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub text_encoder: RmsPropState,
    pub generator: RmsPropState,
    pub discriminator: RmsPropState,
    pub csem: RmsPropState,
}

impl Optimizers {
    pub fn new(params: &ModelParams, rho: f64, eps: f64) -> Self {
        let st = |b| RmsPropState::new(params.block_tensors(b), rho, eps);
        Optimizers {
            text_encoder: st(Block::TextEncoder),
            generator: st(Block::Generator),
            discriminator: st(Block::Discriminator),
            csem: st(Block::Csem),
        }
    }

    pub fn get(&self, b: Block) -> &RmsPropState {
        match b {
            Block::TextEncoder => &self.text_encoder,
            Block::Generator => &self.generator,
            Block::Discriminator => &self.discriminator,
            Block::Csem => &self.csem,
        }
    }

    pub fn get_mut(&mut self, b: Block) -> &mut RmsPropState {
        match b {
            Block::TextEncoder => &mut self.text_encoder,
            Block::Generator => &mut self.generator,
            Block::Discriminator => &mut self.discriminator,
            Block::Csem => &mut self.csem,
        }
    }
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub optim: Optimizers,
    pub rng: ChaCha8Rng,
    pub counters: Counters,
    pub log: Vec<LogRecord>,
    sampler: BatchSampler<'a>,
    losses: LossConfig,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters drawn from the config seed.
    pub fn new(ds: &'a EmbeddingDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        validate_split(ds)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = init_params(cfg.dims(ds.d_t, ds.d_i), cfg.leaky_slope, &mut rng)?;
        let optim = Optimizers::new(&params, cfg.rho, cfg.eps);
        Trainer::assemble(ds, cfg, params, optim, rng, Counters::default())
    }

    /// Continues from a checkpoint; the result matches an uninterrupted run.
    pub fn resume(ds: &'a EmbeddingDataset, ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        validate_split(ds)?;
        let dims = ckpt.params.dims;
        if (dims.d_t, dims.d_i) != (ds.d_t, ds.d_i) {
            return Err(Error::DimsMismatch(format!(
                "checkpoint expects d_t={}, d_i={}; dataset has d_t={}, d_i={}",
                dims.d_t, dims.d_i, ds.d_t, ds.d_i
            )));
        }
        let rng = ckpt.rng.restore();
        Trainer::assemble(ds, ckpt.config, ckpt.params, ckpt.optim, rng, ckpt.counters)
    }

    fn assemble(
        ds: &'a EmbeddingDataset,
        cfg: TrainConfig,
        params: ModelParams,
        optim: Optimizers,
        rng: ChaCha8Rng,
        counters: Counters,
    ) -> Result<Self> {
        let selector = WrongClassSelector::new(ds, cfg.wrong_class_mode, cfg.seed ^ KMEANS_SEED_SALT)?;
        let sampler = BatchSampler::new(ds, selector)?;
        let losses = cfg.loss_config();
        Ok(Trainer {
            cfg,
            params,
            optim,
            rng,
            counters,
            log: Vec::new(),
            sampler,
            losses,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            config: self.cfg.clone(),
            counters: self.counters,
            optim: self.optim.clone(),
            rng: RngPosition::of(&self.rng),
        }
    }

    fn apply(&mut self, grads: &Gradients<f32>, m: &BoundModel, blocks: &[Block]) -> Result<()> {
        for &b in blocks {
            let vars = m.block_vars(b);
            let g: Vec<&Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
            let params = self.params.block_tensors_mut(b);
            self.optim.get_mut(b).update(params, &g, self.cfg.lr)?;
        }
        Ok(())
    }

    /// One critic update followed by the clip. Returns `L_D`.
    pub fn critic_update(&mut self) -> Result<f64> {
        let batch = self.sampler.sample(self.cfg.batch_size, &mut self.rng)?.batch;
        let blocks = [Block::Discriminator];
        let mut tape = Tape::new();
        let m = bind(&mut tape, &self.params, &blocks);
        let (loss, b) = discriminator_loss(&mut tape, &m, &batch, &self.losses, &mut self.rng)?;
        let grads = tape.backward(loss)?;
        self.apply(&grads, &m, &blocks)?;
        clip_weights(&mut self.params, self.cfg.clip_k as f32)?;
        self.counters.d_updates += 1;
        Ok(b.l_d)
    }

    /// One generator and text-encoder update; in joint mode the CSEM is
    /// trained by the same step.
    pub fn generator_update(&mut self) -> Result<LossBreakdown> {
        let batch = self.sampler.sample(self.cfg.batch_size, &mut self.rng)?.batch;
        let triplet = self.cfg.joint && !self.cfg.ablation.no_triplet;
        let blocks: &[Block] = if triplet {
            &[Block::Generator, Block::TextEncoder, Block::Csem]
        } else {
            &[Block::Generator, Block::TextEncoder]
        };
        let mut tape = Tape::new();
        let m = bind(&mut tape, &self.params, blocks);
        let (loss, b) = if self.cfg.joint {
            joint_loss(&mut tape, &m, &batch, &self.losses, triplet, &mut self.rng)?
        } else {
            generator_loss(&mut tape, &m, &batch, &self.losses, &mut self.rng)?
        };
        let grads = tape.backward(loss)?;
        self.apply(&grads, &m, blocks)?;
        self.counters.g_updates += 1;
        if triplet {
            self.counters.csem_updates += 1;
        }
        Ok(b)
    }

    /// One CSEM update against frozen generator outputs (or raw image
    /// embeddings when the GAN is ablated).
    pub fn csem_update(&mut self) -> Result<LossBreakdown> {
        let batch = self.sampler.sample(self.cfg.batch_size, &mut self.rng)?.batch;
        let source = if self.cfg.ablation.no_gan {
            Representative::Raw
        } else {
            Representative::Generated
        };
        let blocks = [Block::Csem];
        let mut tape = Tape::new();
        let m = bind(&mut tape, &self.params, &blocks);
        let (loss, b) = csem_step_loss(
            &mut tape,
            &m,
            &batch,
            self.losses.wrong_class,
            source,
            &mut self.rng,
        )?;
        let grads = tape.backward(loss)?;
        self.apply(&grads, &m, &blocks)?;
        self.counters.csem_updates += 1;
        Ok(b)
    }

    pub fn e_step(&mut self, it: usize) -> Result<()> {
        if it == 0 {
            return Err(Error::config("outer_it", "iterations are 1-based"));
        }
        if self.cfg.ablation.no_gan {
            return Ok(());
        }
        let phase = if self.cfg.joint { Phase::Joint } else { Phase::E };
        for step in 1..=self.cfg.inner_steps(it) {
            let mut l_d = 0.0;
            for _ in 0..self.cfg.d_steps {
                l_d += self.critic_update()?;
            }
            let b = self.generator_update()?;
            self.log.push(LogRecord {
                outer_it: it,
                phase,
                step,
                l_d: l_d / self.cfg.d_steps as f64,
                l_g_adv: b.l_g_adv,
                div_r: b.div_r,
                div_w: b.div_w,
                reg: b.reg,
                l_t: b.l_t,
            });
        }
        Ok(())
    }

    pub fn m_step(&mut self, it: usize) -> Result<()> {
        if it == 0 {
            return Err(Error::config("outer_it", "iterations are 1-based"));
        }
        let joint_handles_csem = self.cfg.joint && !self.cfg.ablation.no_gan;
        if self.cfg.ablation.no_triplet || joint_handles_csem {
            return Ok(());
        }
        for step in 1..=self.cfg.inner_steps(it) {
            let b = self.csem_update()?;
            self.log.push(LogRecord {
                outer_it: it,
                phase: Phase::M,
                step,
                l_d: 0.0,
                l_g_adv: 0.0,
                div_r: 0.0,
                div_w: 0.0,
                reg: 0.0,
                l_t: b.l_t,
            });
        }
        Ok(())
    }

    /// Runs the remaining outer iterations up to `n_outer`, calling `after`
    /// once each has finished.
    pub fn run_with<F>(&mut self, mut after: F) -> Result<()>
    where
        F: FnMut(usize, &Trainer<'a>) -> Result<()>,
    {
        for it in self.counters.outer_done + 1..=self.cfg.n_outer {
            self.e_step(it)?;
            self.m_step(it)?;
            self.counters.outer_done = it;
            after(it, self)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_, _| Ok(()))
    }
}

/// Trains from scratch and returns the parameters with the step log.
pub fn train(ds: &EmbeddingDataset, cfg: TrainConfig) -> Result<(ModelParams, Vec<LogRecord>)> {
    let mut t = Trainer::new(ds, cfg)?;
    t.run()?;
    Ok((t.params, t.log))
}
