use crate::error::{Error, Result};
use crate::losses::{
    csem_step_loss, discriminator_loss, generator_loss, margin_regularizer, Batch, LossConfig, Representative,
};
use crate::model::{
    bind, generate, init_params, latent_divergence, sample_latent, text_encode, Block, Dims,
    DivergenceMode, LinearVars, ModelParams,
};
use crate::tensor::{grad_check, grad_check_mixed, GradCheckReport, Objective, Real, TapeOf, Tensor, TensorOf, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckSettings {
    pub dims: Dims,
    pub batch: usize,
    pub seed: u64,
    /// Central-difference step.
    pub eps: f64,
    pub divergence: DivergenceMode,
    pub wide: bool,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            dims: Dims {
                d_t: 3,
                d_i: 4,
                d_c: 3,
                d_z: 2,
                gen_hidden: [5, 4],
                disc_hidden: 4,
            },
            batch: 3,
            seed: 0,
            eps: 1e-5,
            divergence: DivergenceMode::Kl,
            wide: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// A small network with weights large enough to avoid dead units. CSEM
/// weights and the generator's last bias are non-negative so no common-space
/// row collapses to zero.
pub fn toy_problem(s: &GradCheckSettings) -> Result<(ModelParams, Batch)> {
    s.dims.validate()?;
    if s.batch == 0 {
        return Err(Error::config("batch", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut p = init_params(s.dims, 0.2, &mut rng)?;
    for (_, t) in p.named_tensors_mut() {
        for v in t.data_mut() {
            *v *= 25.0;
        }
    }
    for w in p.csem.weight.data_mut() {
        *w = w.abs();
    }
    for b in p.csem.bias.data_mut().iter_mut().chain(p.generator[2].bias.data_mut()) {
        *b = b.abs() + 0.3;
    }
    let (b, d) = (s.batch, s.dims);
    let batch = Batch {
        phi_r: Tensor::randn(&[b, d.d_t], 1.0, &mut rng),
        img_r: Tensor::randn(&[b, d.d_i], 1.0, &mut rng).map(f32::abs),
        phi_w: Tensor::randn(&[b, d.d_t], 1.0, &mut rng),
        img_w: Tensor::randn(&[b, d.d_i], 1.0, &mut rng).map(f32::abs),
    };
    Ok((p, batch))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Critic,
    Generator,
    Triplet,
    Divergence,
    Margin,
}

impl Kind {
    const ALL: [Kind; 5] = [Kind::Critic, Kind::Generator, Kind::Triplet, Kind::Divergence, Kind::Margin];

    fn name(self) -> &'static str {
        match self {
            Kind::Critic => "L_D",
            Kind::Generator => "L_G",
            Kind::Triplet => "L_T",
            Kind::Divergence => "divergence",
            Kind::Margin => "margin",
        }
    }

    /// The blocks each loss trains.
    fn blocks(self) -> &'static [Block] {
        match self {
            Kind::Critic => &[Block::Discriminator],
            Kind::Generator | Kind::Margin => &[Block::Generator, Block::TextEncoder],
            Kind::Triplet => &[Block::Csem],
            Kind::Divergence => &[Block::TextEncoder],
        }
    }
}

struct Probe<'a> {
    kind: Kind,
    params: &'a ModelParams,
    batch: &'a Batch,
    cfg: LossConfig,
    seed: u64,
}

impl Objective for Probe<'_> {
    fn build<T: Real>(&self, t: &mut TapeOf<T>, vars: &[Var]) -> Result<Var> {
        // the rest of the model enters as constants; the probes replace the
        // checked blocks
        let mut m = bind(t, self.params, &[]);
        let mut it = vars.iter();
        for &b in self.kind.blocks() {
            let layers: Vec<&mut LinearVars> = match b {
                Block::TextEncoder => vec![&mut m.text_encoder],
                Block::Generator => m.generator.iter_mut().collect(),
                Block::Discriminator => m.discriminator.iter_mut().collect(),
                Block::Csem => vec![&mut m.csem],
            };
            for l in layers {
                l.weight = *it.next().expect("one handle per tensor");
                l.bias = *it.next().expect("one handle per tensor");
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let (batch, cfg) = (self.batch, &self.cfg);
        match self.kind {
            Kind::Critic => Ok(discriminator_loss(t, &m, batch, cfg, &mut rng)?.0),
            Kind::Generator => Ok(generator_loss(t, &m, batch, cfg, &mut rng)?.0),
            Kind::Triplet => Ok(csem_step_loss(t, &m, batch, true, Representative::Generated, &mut rng)?.0),
            Kind::Divergence => {
                let phi = t.constant(batch.phi_r.cast());
                let code = text_encode(t, &m, phi)?;
                latent_divergence(t, code, cfg.divergence, &mut rng)
            }
            Kind::Margin => {
                let phi = t.constant(batch.phi_r.cast());
                let code = text_encode(t, &m, phi)?;
                let c_hat = sample_latent(t, code, &mut rng)?;
                let z = t.constant(TensorOf::randn(&[batch.len(), m.dims.d_z], 1.0, &mut rng));
                let i = generate(t, &m, z, c_hat)?;
                let img_r = t.constant(batch.img_r.cast());
                let img_w = t.constant(batch.img_w.cast());
                Ok(margin_regularizer(t, i, img_r, Some(img_w), cfg.lambda)?.0)
            }
        }
    }
}

/// Checks every loss against central differences. The backward pass runs
/// in 32-bit with a 64-bit reference, or fully in 64-bit when `wide` is set.
pub fn run_grad_checks(s: &GradCheckSettings) -> Result<Vec<GradCheckRow>> {
    if !(s.eps > 0.0 && s.eps.is_finite()) {
        return Err(Error::config("eps", "must be positive"));
    }
    let (p, batch) = toy_problem(s)?;
    let cfg = LossConfig {
        lambda: 0.5,
        divergence: s.divergence,
        ..Default::default()
    };
    Kind::ALL
        .iter()
        .map(|&kind| {
            let probe = Probe {
                kind,
                params: &p,
                batch: &batch,
                cfg,
                seed: s.seed,
            };
            let start: Vec<Tensor> = kind
                .blocks()
                .iter()
                .flat_map(|&b| p.block_tensors(b).into_iter().cloned())
                .collect();
            let report = if s.wide {
                let wide: Vec<TensorOf<f64>> = start.iter().map(|t| t.cast()).collect();
                grad_check(&wide, s.eps, |t, v| probe.build(t, v))?
            } else {
                grad_check_mixed(&start, s.eps, &probe)?
            };
            Ok(GradCheckRow {
                name: kind.name(),
                report,
            })
        })
        .collect()
}
