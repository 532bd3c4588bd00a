//! Training objectives and the critic weight clip.
//!
//! Each loss is built on a tape from a [`BoundModel`]; which parameters
//! receive gradients is decided by the caller when binding. The `*_objective`
//! helpers combine already-computed scores and are what the losses reduce to.

use crate::error::{Error, Result};
use crate::model::{
    csem_map, discriminate, generate, latent_divergence, sample_latent, text_encode, Block,
    BoundModel, DivergenceMode, ModelParams,
};
use crate::tensor::{Real, TapeOf, Tensor, TensorOf, Var};
use rand::Rng;

/// One minibatch of real pairs and their wrong-class counterparts.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[b × d_t]` text embeddings of the true class.
    pub phi_r: Tensor,
    /// `[b × d_i]` image embeddings paired with `phi_r`.
    pub img_r: Tensor,
    /// `[b × d_t]` text embeddings of the wrong class.
    pub phi_w: Tensor,
    /// `[b × d_i]` image embeddings of the wrong class.
    pub img_w: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.phi_r.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, d_t: usize, d_i: usize) -> Result<()> {
        let b = self.phi_r.rows();
        for (name, t, cols) in [
            ("phi_r", &self.phi_r, d_t),
            ("img_r", &self.img_r, d_i),
            ("phi_w", &self.phi_w, d_t),
            ("img_w", &self.img_w, d_i),
        ] {
            if t.rank() != 2 || t.rows() != b || t.cols() != cols {
                return Err(Error::DimsMismatch(format!(
                    "batch field {name} has shape {:?}, expected [{b}, {cols}]",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Batch means of every term that enters the objectives. Fields that a
/// given step does not compute stay zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub v_p: f64,
    pub v_n: f64,
    pub d_p: f64,
    pub d_n: f64,
    pub l_t: f64,
    pub l_d: f64,
    pub l_g_adv: f64,
    pub div_r: f64,
    pub div_w: f64,
    pub reg: f64,
    pub l_g_total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub divergence: DivergenceMode,
    /// When false the wrong-class critic bracket, the `I_w` half of the
    /// margin term and the wrong-text divergence are all dropped.
    pub wrong_class: bool,
    /// When false the margin term is left out of the generator objective.
    pub margin: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
            divergence: DivergenceMode::Kl,
            wrong_class: true,
            margin: true,
        }
    }
}

fn scalar<T: Real>(tape: &TapeOf<T>, v: Var) -> f64 {
    tape.value(v).item().f64()
}

fn mean_of<T: Real>(tape: &TapeOf<T>, v: Var) -> f64 {
    let d = tape.value(v).data();
    d.iter().map(|x| x.f64()).sum::<f64>() / d.len() as f64
}

/// `mean(softplus(v_n − v_p))` over per-row scores.
pub fn triplet_objective<T: Real>(tape: &mut TapeOf<T>, v_p: Var, v_n: Var) -> Result<Var> {
    let gap = tape.sub(v_n, v_p)?;
    let sp = tape.softplus(gap)?;
    tape.mean(sp)
}

/// Triplet loss on the common space. `i` and `i_wrong` are `[b × d_i]`
/// generator outputs for the true and wrong codes, `c_tr` is `[b × d_c]`.
/// Returns the loss together with the per-row `v_p` and `v_n`.
pub fn triplet_loss<T: Real>(
    tape: &mut TapeOf<T>,
    m: &BoundModel,
    i: Var,
    i_wrong: Var,
    c_tr: Var,
) -> Result<(Var, Var, Var)> {
    let theta_p = csem_map(tape, m, i)?;
    let v_p = tape.row_cosine(theta_p, c_tr)?;
    let theta_n = csem_map(tape, m, i_wrong)?;
    let v_n = tape.row_cosine(theta_n, c_tr)?;
    let loss = triplet_objective(tape, v_p, v_n)?;
    Ok((loss, v_p, v_n))
}

/// Per-row `d_p = |I_r − i|₁` and `d_n = |I_w − i|₁ − λ`, plus the batch
/// mean of `d_p − d_n`. Without `img_w` the term is `d_p` alone and `d_n`
/// is `None`.
pub fn margin_regularizer<T: Real>(
    tape: &mut TapeOf<T>,
    i: Var,
    img_r: Var,
    img_w: Option<Var>,
    lambda: f64,
) -> Result<(Var, Var, Option<Var>)> {
    if lambda < 0.0 {
        return Err(Error::config("lambda", "margin must be non-negative"));
    }
    let d_p = tape.row_l1(img_r, i)?;
    match img_w {
        Some(img_w) => {
            let dist_w = tape.row_l1(img_w, i)?;
            let d_n = tape.add_scalar(dist_w, -lambda)?;
            let diff = tape.sub(d_p, d_n)?;
            Ok((tape.mean(diff)?, d_p, Some(d_n)))
        }
        None => Ok((tape.mean(d_p)?, d_p, None)),
    }
}

/// `0.5·(E[s_fake] − E[s_real]) + 0.5·(E[s_wrong] − E[s_real])`, or the plain
/// `E[s_fake] − E[s_real]` when no wrong-class scores are given.
pub fn critic_objective<T: Real>(
    tape: &mut TapeOf<T>,
    s_fake: Var,
    s_real: Var,
    s_wrong: Option<Var>,
) -> Result<Var> {
    let fake = tape.mean(s_fake)?;
    let real = tape.mean(s_real)?;
    let gan = tape.sub(fake, real)?;
    match s_wrong {
        Some(s_wrong) => {
            let wrong = tape.mean(s_wrong)?;
            let cls = tape.sub(wrong, real)?;
            let both = tape.add(gan, cls)?;
            tape.scale(both, 0.5)
        }
        None => Ok(gan),
    }
}

/// `−E[s_fake] + α·(div_r + div_w) + β·reg`, skipping absent terms.
pub fn generator_objective<T: Real>(
    tape: &mut TapeOf<T>,
    s_fake: Var,
    divs: &[Var],
    reg: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let fake = tape.mean(s_fake)?;
    let mut total = tape.neg(fake)?;
    for &d in divs {
        let t = tape.scale(d, alpha)?;
        total = tape.add(total, t)?;
    }
    if let Some(r) = reg {
        let t = tape.scale(r, beta)?;
        total = tape.add(total, t)?;
    }
    Ok(total)
}

fn batch_vars<T: Real>(tape: &mut TapeOf<T>, batch: &Batch) -> [Var; 4] {
    [
        tape.constant(batch.phi_r.cast()),
        tape.constant(batch.img_r.cast()),
        tape.constant(batch.phi_w.cast()),
        tape.constant(batch.img_w.cast()),
    ]
}

/// Critic loss for one batch. Noise and codes are drawn from `rng`; the
/// generated embeddings enter as constants.
pub fn discriminator_loss<T: Real, R: Rng + ?Sized>(
    tape: &mut TapeOf<T>,
    m: &BoundModel,
    batch: &Batch,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    batch.validate(m.dims.d_t, m.dims.d_i)?;
    let [phi_r, img_r, _, img_w] = batch_vars(tape, batch);
    let fake = {
        let code = text_encode(tape, m, phi_r)?;
        let c = sample_latent(tape, code, rng)?;
        let z = tape.constant(TensorOf::randn(&[batch.len(), m.dims.d_z], 1.0, rng));
        let g = generate(tape, m, z, c)?;
        // cut the graph so the critic step never reaches G or the encoder
        let v = tape.value(g).clone();
        tape.constant(v)
    };
    let s_fake = discriminate(tape, m, fake, phi_r)?;
    let s_real = discriminate(tape, m, img_r, phi_r)?;
    let s_wrong = if cfg.wrong_class {
        Some(discriminate(tape, m, img_w, phi_r)?)
    } else {
        None
    };
    let loss = critic_objective(tape, s_fake, s_real, s_wrong)?;
    let breakdown = LossBreakdown {
        l_d: scalar(tape, loss),
        ..Default::default()
    };
    Ok((loss, breakdown))
}

/// Generator and text-encoder loss for one batch.
pub fn generator_loss<T: Real, R: Rng + ?Sized>(
    tape: &mut TapeOf<T>,
    m: &BoundModel,
    batch: &Batch,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    let p = generator_parts(tape, m, batch, cfg, rng)?;
    Ok((p.total, p.out))
}

struct GeneratorParts {
    total: Var,
    out: LossBreakdown,
    z: Var,
    c_r: Var,
    fake: Var,
    phi_w: Var,
}

fn generator_parts<T: Real, R: Rng + ?Sized>(
    tape: &mut TapeOf<T>,
    m: &BoundModel,
    batch: &Batch,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<GeneratorParts> {
    batch.validate(m.dims.d_t, m.dims.d_i)?;
    let [phi_r, img_r, phi_w, img_w] = batch_vars(tape, batch);
    let code_r = text_encode(tape, m, phi_r)?;
    let c_r = sample_latent(tape, code_r, rng)?;
    let z = tape.constant(TensorOf::randn(&[batch.len(), m.dims.d_z], 1.0, rng));
    let fake = generate(tape, m, z, c_r)?;
    let s_fake = discriminate(tape, m, fake, phi_r)?;

    let div_r = latent_divergence(tape, code_r, cfg.divergence, rng)?;
    let mut divs = vec![div_r];
    let mut out = LossBreakdown {
        div_r: scalar(tape, div_r),
        ..Default::default()
    };
    if cfg.wrong_class {
        let code_w = text_encode(tape, m, phi_w)?;
        let div_w = latent_divergence(tape, code_w, cfg.divergence, rng)?;
        out.div_w = scalar(tape, div_w);
        divs.push(div_w);
    }

    let reg = if cfg.margin {
        let wrong = cfg.wrong_class.then_some(img_w);
        let (reg, d_p, d_n) = margin_regularizer(tape, fake, img_r, wrong, cfg.lambda)?;
        out.reg = scalar(tape, reg);
        out.d_p = mean_of(tape, d_p);
        out.d_n = d_n.map_or(0.0, |d| mean_of(tape, d));
        Some(reg)
    } else {
        None
    };

    let total = generator_objective(tape, s_fake, &divs, reg, cfg.alpha, cfg.beta)?;
    out.l_g_adv = -mean_of(tape, s_fake);
    out.l_g_total = scalar(tape, total);
    Ok(GeneratorParts {
        total,
        out,
        z,
        c_r,
        fake,
        phi_w,
    })
}

// Triplet term against the pivot `c_r`; without a wrong-class embedding
// only the positive score remains, softplus(−v_p).
fn triplet_terms<T: Real>(
    tape: &mut TapeOf<T>,
    m: &BoundModel,
    i: Var,
    i_wrong: Option<Var>,
    c_r: Var,
    out: &mut LossBreakdown,
) -> Result<Var> {
    let loss = match i_wrong {
        Some(i_wrong) => {
            let (loss, v_p, v_n) = triplet_loss(tape, m, i, i_wrong, c_r)?;
            out.v_p = mean_of(tape, v_p);
            out.v_n = mean_of(tape, v_n);
            loss
        }
        None => {
            let theta = csem_map(tape, m, i)?;
            let v_p = tape.row_cosine(theta, c_r)?;
            let neg = tape.neg(v_p)?;
            let sp = tape.softplus(neg)?;
            out.v_p = mean_of(tape, v_p);
            tape.mean(sp)?
        }
    };
    out.l_t = scalar(tape, loss);
    Ok(loss)
}

/// `L_G + L_T` for training the CSEM together with the generator. The
/// triplet term shares `z` and `ĉ_tr` with the generator term and nothing
/// is frozen, so G and the text encoder also receive its gradients.
pub fn joint_loss<T: Real, R: Rng + ?Sized>(
    tape: &mut TapeOf<T>,
    m: &BoundModel,
    batch: &Batch,
    cfg: &LossConfig,
    triplet: bool,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    let mut p = generator_parts(tape, m, batch, cfg, rng)?;
    if !triplet {
        return Ok((p.total, p.out));
    }
    let i_wrong = if cfg.wrong_class {
        let code_w = text_encode(tape, m, p.phi_w)?;
        let c_w = sample_latent(tape, code_w, rng)?;
        Some(generate(tape, m, p.z, c_w)?)
    } else {
        None
    };
    let l_t = triplet_terms(tape, m, p.fake, i_wrong, p.c_r, &mut p.out)?;
    let total = tape.add(p.total, l_t)?;
    Ok((total, p.out))
}

/// Where the M-step takes its image-side embeddings from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representative {
    /// `G(z, ĉ_tr)` and `G(z, ĉ_tw)` with a shared `z`.
    Generated,
    /// The batch's real `I_r` and `I_w`, bypassing the generator.
    Raw,
}

/// Triplet loss for the M-step. Fresh `ĉ_tr`, `z` and `ĉ_tw` are drawn;
/// everything upstream of the CSEM is frozen, so only the CSEM can receive
/// gradients.
pub fn csem_step_loss<T: Real, R: Rng + ?Sized>(
    tape: &mut TapeOf<T>,
    m: &BoundModel,
    batch: &Batch,
    wrong_class: bool,
    source: Representative,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    batch.validate(m.dims.d_t, m.dims.d_i)?;
    let [phi_r, img_r, phi_w, img_w] = batch_vars(tape, batch);
    let code_r = text_encode(tape, m, phi_r)?;
    let c_r = sample_latent(tape, code_r, rng)?;
    let (i, i_wrong) = match source {
        Representative::Generated => {
            let z = tape.constant(TensorOf::randn(&[batch.len(), m.dims.d_z], 1.0, rng));
            let i = generate(tape, m, z, c_r)?;
            let i_wrong = if wrong_class {
                let code_w = text_encode(tape, m, phi_w)?;
                let c_w = sample_latent(tape, code_w, rng)?;
                let g = generate(tape, m, z, c_w)?;
                Some(freeze(tape, g))
            } else {
                None
            };
            (freeze(tape, i), i_wrong)
        }
        Representative::Raw => (img_r, wrong_class.then_some(img_w)),
    };
    let c_r = freeze(tape, c_r);
    let mut out = LossBreakdown::default();
    let loss = triplet_terms(tape, m, i, i_wrong, c_r, &mut out)?;
    Ok((loss, out))
}

fn freeze<T: Real>(tape: &mut TapeOf<T>, v: Var) -> Var {
    if tape.requires_grad(v) {
        let t = tape.value(v).clone();
        tape.constant(t)
    } else {
        v
    }
}

/// Clamps every critic parameter into `[−k, k]`.
pub fn clip_weights(params: &mut ModelParams, k: f32) -> Result<()> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::config("clip", "bound must be positive"));
    }
    for t in params.block_tensors_mut(Block::Discriminator) {
        for w in t.data_mut() {
            *w = w.clamp(-k, k);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bind, init_params, Dims};
    use crate::tensor::{grad_check, softplus, Tape, Tape64, Tensor64};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(tape: &mut Tape, v: &[f32]) -> Var {
        tape.constant(Tensor::from_vec(v.to_vec()).unwrap())
    }

    fn triplet_value(v_p: f32, v_n: f32) -> f32 {
        let mut tape = Tape::new();
        let (p, n) = (col(&mut tape, &[v_p]), col(&mut tape, &[v_n]));
        let l = triplet_objective(&mut tape, p, n).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn triplet_examples() {
        assert!((triplet_value(0.3, 0.3) - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((triplet_value(0.9, 0.1) - 0.371_101_4).abs() < 1e-5);
        let mut last = f32::INFINITY;
        for gap in [0.0f32, 1.0, 5.0, 20.0, 80.0] {
            let v = triplet_value(gap, 0.0);
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-30);
    }

    proptest! {
        #[test]
        fn triplet_monotone(v_p in -1.0f32..1.0, v_n in -1.0f32..1.0) {
            let h = 1e-2;
            prop_assert!(triplet_value(v_p + h, v_n) < triplet_value(v_p, v_n));
            prop_assert!(triplet_value(v_p, v_n + h) > triplet_value(v_p, v_n));
            prop_assert!(triplet_value(v_p, v_n) >= 0.0);
        }

        #[test]
        fn margin_identity(
            i in proptest::collection::vec(0.0f64..3.0, 4),
            r in proptest::collection::vec(-3.0f64..3.0, 4),
            w in proptest::collection::vec(-3.0f64..3.0, 4),
            lambda in 0.0f64..4.0,
        ) {
            let mut tape = Tape64::new();
            let iv = tape.constant(Tensor64::matrix(1, 4, i.clone()).unwrap());
            let rv = tape.constant(Tensor64::matrix(1, 4, r.clone()).unwrap());
            let wv = tape.constant(Tensor64::matrix(1, 4, w.clone()).unwrap());
            let (reg, d_p, d_n) = margin_regularizer(&mut tape, iv, rv, Some(wv), lambda).unwrap();
            let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
            let expect = l1(&r, &i) - l1(&w, &i) + lambda;
            prop_assert!((tape.value(reg).item() - expect).abs() < 1e-12);
            prop_assert!(tape.value(d_p).item() >= 0.0);
            prop_assert!(tape.value(d_n.unwrap()).item() >= -lambda);
        }

        #[test]
        fn clip_idempotent_and_bounded(vals in proptest::collection::vec(-1.0f32..1.0, 1..40), k in 0.001f32..0.5) {
            let dims = Dims { d_t: 2, d_i: 2, d_c: 2, d_z: 2, gen_hidden: [2, 2], disc_hidden: vals.len() };
            let mut p = ModelParams::zeros(dims, 0.2);
            p.discriminator[1].weight.data_mut().copy_from_slice(&vals);
            clip_weights(&mut p, k).unwrap();
            let once = p.clone();
            clip_weights(&mut p, k).unwrap();
            prop_assert_eq!(&once, &p);
            for (t, v) in once.discriminator[1].weight.data().iter().zip(&vals) {
                prop_assert!(t.abs() <= k);
                prop_assert_eq!(*t, v.clamp(-k, k));
            }
        }
    }

    #[test]
    fn margin_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let r = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap());
        let (reg, d_p, d_n) = margin_regularizer(&mut tape, i, r, Some(w), 2.0).unwrap();
        assert_eq!(tape.value(d_p).item(), 1.0);
        assert_eq!(tape.value(d_n.unwrap()).item(), 1.0);
        assert_eq!(tape.value(reg).item(), 0.0);

        // exactly at the margin
        let (reg, _, _) = margin_regularizer(&mut tape, r, r, Some(w), 2.0).unwrap();
        assert_eq!(tape.value(reg).item(), 0.0);

        // collapse onto the wrong class is penalized
        let (reg, _, _) = margin_regularizer(&mut tape, w, r, Some(w), 2.0).unwrap();
        assert_eq!(tape.value(reg).item(), 2.0 + 2.0);

        let (reg, _, d_n) = margin_regularizer(&mut tape, i, r, None, 2.0).unwrap();
        assert_eq!(tape.value(reg).item(), 1.0);
        assert!(d_n.is_none());
        assert!(margin_regularizer(&mut tape, i, r, Some(w), -1.0).is_err());
    }

    #[test]
    fn critic_examples() {
        let mut tape = Tape::new();
        let fake = col(&mut tape, &[0.2]);
        let wrong = col(&mut tape, &[0.4]);
        let real = col(&mut tape, &[1.0]);
        let l = critic_objective(&mut tape, fake, real, Some(wrong)).unwrap();
        assert!((tape.value(l).item() + 0.7).abs() < 1e-6);

        let c = col(&mut tape, &[0.3, 0.3]);
        let l = critic_objective(&mut tape, c, c, Some(c)).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let mut last = f32::INFINITY;
        for s in [1.0f32, 10.0, 100.0, 1e4] {
            let real = col(&mut tape, &[s]);
            let l = critic_objective(&mut tape, fake, real, Some(wrong)).unwrap();
            let v = tape.value(l).item();
            assert!(v < last);
            last = v;
        }

        let l = critic_objective(&mut tape, fake, real, None).unwrap();
        assert!((tape.value(l).item() + 0.8).abs() < 1e-6);
    }

    #[test]
    fn generator_objective_examples() {
        let mut tape = Tape::new();
        let fake = col(&mut tape, &[0.2]);
        let zero = tape.constant(Tensor::scalar(0.0));
        let l = generator_objective(&mut tape, fake, &[zero, zero], Some(zero), 1.0, 1.0).unwrap();
        assert!((tape.value(l).item() + 0.2).abs() < 1e-7);

        let one = tape.constant(Tensor::scalar(1.0));
        let l = generator_objective(&mut tape, fake, &[one, one], Some(one), 0.0, 0.0).unwrap();
        assert!((tape.value(l).item() + 0.2).abs() < 1e-7);
    }

    fn toy() -> (ModelParams, Batch) {
        let dims = Dims {
            d_t: 3,
            d_i: 4,
            d_c: 3,
            d_z: 2,
            gen_hidden: [5, 4],
            disc_hidden: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = init_params(dims, 0.2, &mut rng).unwrap();
        // larger weights keep the toy network away from dead ReLUs
        for (_, t) in p.named_tensors_mut() {
            for v in t.data_mut() {
                *v *= 25.0;
            }
        }
        // non-negative CSEM weights on non-negative inputs never give an all-zero row
        for w in p.csem.weight.data_mut() {
            *w = w.abs();
        }
        for b in p.csem.bias.data_mut() {
            *b = b.abs() + 0.3;
        }
        for b in p.generator[2].bias.data_mut() {
            *b = b.abs() + 0.3;
        }
        let b = 3;
        let batch = Batch {
            phi_r: Tensor::randn(&[b, 3], 1.0, &mut rng),
            img_r: Tensor::randn(&[b, 4], 1.0, &mut rng).map(|v| v.abs()),
            phi_w: Tensor::randn(&[b, 3], 1.0, &mut rng),
            img_w: Tensor::randn(&[b, 4], 1.0, &mut rng).map(|v| v.abs()),
        };
        (p, batch)
    }

    #[test]
    fn composition_identity() {
        let (p, batch) = toy();
        for seed in 0..20 {
            let cfg = LossConfig {
                alpha: 0.3 + seed as f64 * 0.1,
                beta: 2.0 - seed as f64 * 0.05,
                lambda: 0.5,
                ..Default::default()
            };
            let mut tape = Tape64::new();
            let m = bind(&mut tape, &p, &[Block::Generator, Block::TextEncoder]);
            let (_, b) = generator_loss(&mut tape, &m, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let composed = b.l_g_adv + cfg.alpha * (b.div_r + b.div_w) + cfg.beta * b.reg;
            assert!((b.l_g_total - composed).abs() < 1e-6, "{b:?}");
            assert!(b.d_p >= 0.0 && b.d_n >= -cfg.lambda);
            assert!((b.reg - (b.d_p - b.d_n)).abs() < 1e-9);
        }
    }

    #[test]
    fn regularizers_off_is_plain_wgan() {
        let (p, batch) = toy();
        let cfg = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        let mut tape = Tape64::new();
        let m = bind(&mut tape, &p, &[Block::Generator]);
        let (_, b) = generator_loss(&mut tape, &m, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.l_g_total, b.l_g_adv);
    }

    #[test]
    fn ablated_wrong_class_terms() {
        let (p, batch) = toy();
        let cfg = LossConfig {
            wrong_class: false,
            ..Default::default()
        };
        let mut tape = Tape64::new();
        let m = bind(&mut tape, &p, &[Block::Generator]);
        let (_, b) = generator_loss(&mut tape, &m, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.div_w, 0.0);
        assert_eq!(b.reg, b.d_p);

        // critic: plain bracket equals the full loss when img_w mirrors img_r's scores
        let mirrored = Batch {
            img_w: batch.img_r.clone(),
            ..batch.clone()
        };
        let run = |batch: &Batch, wrong_class: bool| {
            let mut tape = Tape64::new();
            let m = bind(&mut tape, &p, &[Block::Discriminator]);
            let cfg = LossConfig { wrong_class, ..Default::default() };
            discriminator_loss(&mut tape, &m, batch, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap().1.l_d
        };
        let full = run(&mirrored, true);
        let plain = run(&mirrored, false);
        assert!((full - 0.5 * plain).abs() < 1e-9);
    }

    #[test]
    fn stop_gradient_boundaries() {
        let (p, batch) = toy();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let mut tape = Tape::new();
        let m = bind(&mut tape, &p, &Block::ALL);
        let (l, _) = discriminator_loss(&mut tape, &m, &batch, &cfg, &mut rng).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(m.generator[0].weight).max_abs() == 0.0);
        assert!(g.wrt(m.text_encoder.weight).max_abs() == 0.0);
        assert!(g.wrt(m.discriminator[0].weight).max_abs() > 0.0);

        let mut tape = Tape::new();
        let m = bind(&mut tape, &p, &Block::ALL);
        let (l, _) = csem_step_loss(&mut tape, &m, &batch, true, Representative::Generated, &mut rng).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(m.generator[2].weight).max_abs() == 0.0);
        assert!(g.wrt(m.text_encoder.weight).max_abs() == 0.0);
        assert!(g.wrt(m.csem.weight).max_abs() > 0.0);
    }

    #[test]
    fn joint_and_raw_gradient_paths() {
        let (p, batch) = toy();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);

        let mut tape = Tape::new();
        let m = bind(&mut tape, &p, &[Block::Generator, Block::TextEncoder, Block::Csem]);
        let (l, b) = joint_loss(&mut tape, &m, &batch, &cfg, true, &mut rng).unwrap();
        assert!((scalar(&tape, l) - (b.l_g_total + b.l_t)).abs() < 1e-5);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(m.csem.weight).max_abs() > 0.0);
        assert!(g.wrt(m.generator[2].weight).max_abs() > 0.0);

        // the triplet part alone must reach the generator in joint mode
        let mut tape = Tape64::new();
        let m = bind(&mut tape, &p, &[Block::Generator]);
        let (l, b) = joint_loss(&mut tape, &m, &batch, &cfg, true, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut tape2 = Tape64::new();
        let m2 = bind(&mut tape2, &p, &[Block::Generator]);
        let (l2, _) = generator_loss(&mut tape2, &m2, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let ga = tape.backward(l).unwrap();
        let gb = tape2.backward(l2).unwrap();
        assert!(b.l_t > 0.0);
        assert_ne!(ga.wrt(m.generator[0].weight), gb.wrt(m2.generator[0].weight));

        let mut tape = Tape::new();
        let m = bind(&mut tape, &p, &Block::ALL);
        let (l, b) = csem_step_loss(&mut tape, &m, &batch, true, Representative::Raw, &mut rng).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(m.generator[0].weight).max_abs() == 0.0);
        assert!(g.wrt(m.text_encoder.weight).max_abs() == 0.0);
        assert!(g.wrt(m.csem.weight).max_abs() > 0.0);
        assert!(b.v_n != 0.0);

        let mut tape = Tape::new();
        let m = bind(&mut tape, &p, &[Block::Csem]);
        let (_, b) = csem_step_loss(&mut tape, &m, &batch, false, Representative::Raw, &mut rng).unwrap();
        assert_eq!(b.v_n, 0.0);
        assert!((b.l_t - softplus(-b.v_p)).abs() < 0.1);
    }

    #[test]
    fn csem_step_matches_direct_triplet() {
        let (p, batch) = toy();
        let mut tape = Tape64::new();
        let m = bind(&mut tape, &p, &[Block::Csem]);
        let (_, b) = csem_step_loss(&mut tape, &m, &batch, true, Representative::Generated, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(b.l_t >= 0.0);
        assert!(b.v_p.abs() <= 1.0 && b.v_n.abs() <= 1.0);

        // per-row softplus of the gap has mean ≥ softplus of the mean gap
        assert!(b.l_t + 1e-12 >= softplus(b.v_n - b.v_p));
    }

    fn perturb(p: &ModelParams, blocks: &[Block], vals: &[Tensor64]) -> ModelParams {
        let mut q = p.clone();
        let mut it = vals.iter();
        for &b in blocks {
            for t in q.block_tensors_mut(b) {
                *t = it.next().unwrap().cast();
            }
        }
        q
    }

    // Gradients of each loss with respect to the block it trains, in 64-bit.
    fn check_block<F>(blocks: &[Block], f: F)
    where
        F: Fn(&mut Tape64, &BoundModel) -> Result<Var>,
    {
        let (p, _) = toy();
        let start: Vec<Tensor64> = blocks
            .iter()
            .flat_map(|&b| p.block_tensors(b).into_iter().map(|t| t.cast::<f64>()))
            .collect();
        let r = grad_check(&start, 1e-4, |tape: &mut Tape64, vars: &[Var]| {
            // bind the rest of the model as constants and splice in the probes
            let mut m = bind(tape, &perturb(&p, blocks, &start), &[]);
            let mut it = vars.iter();
            for &b in blocks {
                let layers: Vec<&mut crate::model::LinearVars> = match b {
                    Block::TextEncoder => vec![&mut m.text_encoder],
                    Block::Generator => m.generator.iter_mut().collect(),
                    Block::Discriminator => m.discriminator.iter_mut().collect(),
                    Block::Csem => vec![&mut m.csem],
                };
                for l in layers {
                    l.weight = *it.next().unwrap();
                    l.bias = *it.next().unwrap();
                }
            }
            f(tape, &m)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-2, "{blocks:?}: {r:?}");
    }

    #[test]
    fn loss_gradients_pass_grad_check() {
        let (_, batch) = toy();
        let cfg = LossConfig {
            lambda: 0.5,
            ..Default::default()
        };
        let b2 = batch.clone();
        check_block(&[Block::Discriminator], move |t, m| {
            Ok(discriminator_loss(t, m, &b2, &cfg, &mut ChaCha8Rng::seed_from_u64(2))?.0)
        });
        let b2 = batch.clone();
        check_block(&[Block::Generator, Block::TextEncoder], move |t, m| {
            Ok(generator_loss(t, m, &b2, &cfg, &mut ChaCha8Rng::seed_from_u64(2))?.0)
        });
        let b2 = batch.clone();
        check_block(&[Block::Generator, Block::TextEncoder, Block::Csem], move |t, m| {
            Ok(joint_loss(t, m, &b2, &cfg, true, &mut ChaCha8Rng::seed_from_u64(2))?.0)
        });
        let b2 = batch.clone();
        check_block(&[Block::Csem], move |t, m| {
            Ok(csem_step_loss(t, m, &b2, true, Representative::Generated, &mut ChaCha8Rng::seed_from_u64(2))?.0)
        });
    }

    #[test]
    fn clip_examples() {
        let dims = Dims {
            d_t: 1,
            d_i: 1,
            d_c: 1,
            d_z: 1,
            gen_hidden: [1, 1],
            disc_hidden: 1,
        };
        let mut p = ModelParams::zeros(dims, 0.2);
        p.discriminator[0].weight.data_mut()[0] = 0.5;
        p.discriminator[0].weight.data_mut()[1] = -0.004;
        p.generator[0].weight.data_mut()[0] = 0.5;
        clip_weights(&mut p, 0.01).unwrap();
        assert_eq!(p.discriminator[0].weight.data(), &[0.01, -0.004]);
        assert_eq!(p.generator[0].weight.data()[0], 0.5);
        assert!(clip_weights(&mut p, 0.0).is_err());
    }
}
