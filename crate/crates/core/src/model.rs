//! The four networks: text encoder, generator, discriminator (critic) and
//! the common-space embedding mapper (CSEM).
//!
//! Parameters are stored as `f32` in [`ModelParams`]. Training and the
//! gradient checks place them on a tape through [`bind`], which may cast
//! them to `f64`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, TapeOf, Tensor, TensorOf, Var};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

pub const INIT_STD: f64 = 0.02;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// Text embedding width.
    pub d_t: usize,
    /// Image embedding width.
    pub d_i: usize,
    /// Latent code and common-space width.
    pub d_c: usize,
    /// Noise width.
    pub d_z: usize,
    pub gen_hidden: [usize; 2],
    pub disc_hidden: usize,
}

impl Dims {
    /// Production widths for the given embedding sizes.
    pub fn new(d_t: usize, d_i: usize) -> Self {
        Dims {
            d_t,
            d_i,
            d_c: 1024,
            d_z: 100,
            gen_hidden: [2048, 4096],
            disc_hidden: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_t", self.d_t),
            ("d_i", self.d_i),
            ("d_c", self.d_c),
            ("d_z", self.d_z),
            ("gen_hidden1", self.gen_hidden[0]),
            ("gen_hidden2", self.gen_hidden[1]),
            ("disc_hidden", self.disc_hidden),
        ];
        for (k, v) in fields {
            if v == 0 {
                return Err(Error::config(k, "dimension must be positive"));
            }
        }
        Ok(())
    }
}

/// Affine map `x·W + b` with `W` stored `[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn randn<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let weight = Tensor::randn(&[input, output], std, rng);
        let bias = Tensor::randn(&[output], std, rng);
        Linear { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    TextEncoder,
    Generator,
    Discriminator,
    Csem,
}

impl Block {
    pub const ALL: [Block; 4] = [
        Block::TextEncoder,
        Block::Generator,
        Block::Discriminator,
        Block::Csem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::TextEncoder => "text_encoder",
            Block::Generator => "generator",
            Block::Discriminator => "discriminator",
            Block::Csem => "csem",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub leaky_slope: f64,
    /// `d_t → 2·d_c`: first half is the mean, second half `log σ`.
    pub text_encoder: Linear,
    /// `(d_z + d_c) → h1 → h2 → d_i`.
    pub generator: [Linear; 3],
    /// `(d_i + d_t) → h → 1`.
    pub discriminator: [Linear; 2],
    /// `d_i → d_c`.
    pub csem: Linear,
}

/// Every weight and bias drawn i.i.d. from `Normal(0, 0.02)`.
pub fn init_params<R: Rng + ?Sized>(dims: Dims, leaky_slope: f64, rng: &mut R) -> Result<ModelParams> {
    dims.validate()?;
    let d = dims;
    let text_encoder = Linear::randn(d.d_t, 2 * d.d_c, INIT_STD, rng);
    let generator = [
        Linear::randn(d.d_z + d.d_c, d.gen_hidden[0], INIT_STD, rng),
        Linear::randn(d.gen_hidden[0], d.gen_hidden[1], INIT_STD, rng),
        Linear::randn(d.gen_hidden[1], d.d_i, INIT_STD, rng),
    ];
    let discriminator = [
        Linear::randn(d.d_i + d.d_t, d.disc_hidden, INIT_STD, rng),
        Linear::randn(d.disc_hidden, 1, INIT_STD, rng),
    ];
    let csem = Linear::randn(d.d_i, d.d_c, INIT_STD, rng);
    Ok(ModelParams {
        dims,
        leaky_slope,
        text_encoder,
        generator,
        discriminator,
        csem,
    })
}

impl ModelParams {
    /// All-zero parameters with the layer shapes implied by `dims`.
    pub fn zeros(dims: Dims, leaky_slope: f64) -> Self {
        let d = dims;
        ModelParams {
            dims,
            leaky_slope,
            text_encoder: Linear::zeros(d.d_t, 2 * d.d_c),
            generator: [
                Linear::zeros(d.d_z + d.d_c, d.gen_hidden[0]),
                Linear::zeros(d.gen_hidden[0], d.gen_hidden[1]),
                Linear::zeros(d.gen_hidden[1], d.d_i),
            ],
            discriminator: [
                Linear::zeros(d.d_i + d.d_t, d.disc_hidden),
                Linear::zeros(d.disc_hidden, 1),
            ],
            csem: Linear::zeros(d.d_i, d.d_c),
        }
    }

    pub fn block(&self, b: Block) -> Vec<&Linear> {
        match b {
            Block::TextEncoder => vec![&self.text_encoder],
            Block::Generator => self.generator.iter().collect(),
            Block::Discriminator => self.discriminator.iter().collect(),
            Block::Csem => vec![&self.csem],
        }
    }

    pub fn block_mut(&mut self, b: Block) -> Vec<&mut Linear> {
        match b {
            Block::TextEncoder => vec![&mut self.text_encoder],
            Block::Generator => self.generator.iter_mut().collect(),
            Block::Discriminator => self.discriminator.iter_mut().collect(),
            Block::Csem => vec![&mut self.csem],
        }
    }

    /// Tensors of one block in a fixed order: weight, bias per layer.
    pub fn block_tensors(&self, b: Block) -> Vec<&Tensor> {
        self.block(b)
            .into_iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn block_tensors_mut(&mut self, b: Block) -> Vec<&mut Tensor> {
        self.block_mut(b)
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Stable names such as `generator.1.weight`.
    pub fn tensor_names(b: Block, layers: usize) -> Vec<String> {
        let single = matches!(b, Block::TextEncoder | Block::Csem);
        (0..layers)
            .flat_map(|i| {
                ["weight", "bias"].map(|kind| {
                    if single {
                        format!("{}.{kind}", b.name())
                    } else {
                        format!("{}.{i}.{kind}", b.name())
                    }
                })
            })
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        Block::ALL
            .iter()
            .flat_map(|&b| {
                let ts = self.block_tensors(b);
                let names = ModelParams::tensor_names(b, ts.len() / 2);
                names.into_iter().zip(ts)
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = Block::ALL
            .iter()
            .flat_map(|&b| ModelParams::tensor_names(b, self.block(b).len()))
            .collect();
        let tensors = std::iter::once(&mut self.text_encoder)
            .chain(self.generator.iter_mut())
            .chain(self.discriminator.iter_mut())
            .chain(std::iter::once(&mut self.csem))
            .flat_map(|l| [&mut l.weight, &mut l.bias]);
        names.into_iter().zip(tensors).collect()
    }

    /// Checks every layer against the shapes implied by `dims`.
    pub fn validate(&self) -> Result<()> {
        let reference = ModelParams::zeros(self.dims, self.leaky_slope);
        for ((name, t), (_, r)) in self.named_tensors().into_iter().zip(reference.named_tensors()) {
            if t.shape() != r.shape() {
                return Err(Error::DimsMismatch(format!(
                    "{name}: expected {:?}, found {:?}",
                    r.shape(),
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "parameters" });
            }
        }
        Ok(())
    }

    pub fn text_encode(&self, phi: &[f32]) -> Result<GaussianCode> {
        let mut tape = Tape::new();
        let m = bind(&mut tape, self, &[]);
        let x = row_const(&mut tape, phi, self.dims.d_t, "text_encode")?;
        let code = text_encode(&mut tape, &m, x)?;
        Ok(GaussianCode {
            mu: tape.value(code.mu).data().to_vec(),
            log_sigma: tape.value(code.log_sigma).data().to_vec(),
        })
    }

    pub fn generate(&self, z: &[f32], c_hat: &[f32]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let m = bind(&mut tape, self, &[]);
        let z = row_const(&mut tape, z, self.dims.d_z, "generate")?;
        let c = row_const(&mut tape, c_hat, self.dims.d_c, "generate")?;
        let out = generate(&mut tape, &m, z, c)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn discriminate(&self, img: &[f32], phi: &[f32]) -> Result<f32> {
        let mut tape = Tape::new();
        let m = bind(&mut tape, self, &[]);
        let x = row_const(&mut tape, img, self.dims.d_i, "discriminate")?;
        let p = row_const(&mut tape, phi, self.dims.d_t, "discriminate")?;
        let out = discriminate(&mut tape, &m, x, p)?;
        Ok(tape.value(out).item())
    }

    pub fn csem_map(&self, e: &[f32]) -> Result<Vec<f32>> {
        Ok(self.csem_map_batch(&Tensor::matrix(1, e.len(), e.to_vec())?)?.into_data())
    }

    /// CSEM applied to every row of `[n × d_i]`.
    pub fn csem_map_batch(&self, e: &Tensor) -> Result<Tensor> {
        if e.rank() != 2 || e.cols() != self.dims.d_i {
            return Err(Error::shape("csem_map", e.shape(), &[self.dims.d_i]));
        }
        let mut tape = Tape::new();
        let w = tape.constant(self.csem.weight.clone());
        let b = tape.constant(self.csem.bias.clone());
        let x = tape.constant(e.clone());
        let out = LinearVars { weight: w, bias: b }.forward(&mut tape, x)?;
        let out = tape.relu(out)?;
        Ok(tape.value(out).clone())
    }
}

fn row_const(tape: &mut Tape, v: &[f32], expect: usize, op: &'static str) -> Result<Var> {
    if v.len() != expect {
        return Err(Error::shape(op, &[v.len()], &[expect]));
    }
    Ok(tape.constant(Tensor::matrix(1, v.len(), v.to_vec())?))
}

/// Gaussian latent code `N(mu, diag(exp(log_sigma))²)` for one text.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCode {
    pub mu: Vec<f32>,
    pub log_sigma: Vec<f32>,
}

impl GaussianCode {
    pub fn sigma(&self) -> Vec<f32> {
        self.log_sigma.iter().map(|v| v.exp()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceMode {
    /// Closed-form `KL(N(mu, σ²) ‖ N(0, I))`.
    Kl,
    /// Monte-Carlo Jensen-Shannon estimate with `samples` draws from each side.
    JsMonteCarlo { samples: usize },
}

impl fmt::Display for DivergenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DivergenceMode::Kl => write!(f, "kl"),
            DivergenceMode::JsMonteCarlo { samples } => write!(f, "js:{samples}"),
        }
    }
}

impl FromStr for DivergenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("divergence", format!("expected `kl` or `js:<samples>`, got `{s}`"));
        match s {
            "kl" => Ok(DivergenceMode::Kl),
            _ => {
                let n = s.strip_prefix("js:").ok_or_else(bad)?;
                let samples: usize = n.parse().map_err(|_| bad())?;
                if samples == 0 {
                    return Err(bad());
                }
                Ok(DivergenceMode::JsMonteCarlo { samples })
            }
        }
    }
}

/// A linear layer's parameters placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward<T: Real>(&self, tape: &mut TapeOf<T>, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_bias(h, self.bias)
    }
}

/// Model parameters placed on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub text_encoder: LinearVars,
    pub generator: [LinearVars; 3],
    pub discriminator: [LinearVars; 2],
    pub csem: LinearVars,
    pub dims: Dims,
    pub leaky_slope: f64,
}

impl BoundModel {
    pub fn block(&self, b: Block) -> Vec<LinearVars> {
        match b {
            Block::TextEncoder => vec![self.text_encoder],
            Block::Generator => self.generator.to_vec(),
            Block::Discriminator => self.discriminator.to_vec(),
            Block::Csem => vec![self.csem],
        }
    }

    /// Handles in the same order as [`ModelParams::block_tensors`].
    pub fn block_vars(&self, b: Block) -> Vec<Var> {
        self.block(b)
            .into_iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

/// Places every block on `tape`; blocks listed in `trainable` become
/// differentiable leaves, the rest constants.
pub fn bind<T: Real>(tape: &mut TapeOf<T>, params: &ModelParams, trainable: &[Block]) -> BoundModel {
    let mut place = |l: &Linear, b: Block| {
        let (w, bias) = (l.weight.cast::<T>(), l.bias.cast::<T>());
        if trainable.contains(&b) {
            LinearVars {
                weight: tape.param(w),
                bias: tape.param(bias),
            }
        } else {
            LinearVars {
                weight: tape.constant(w),
                bias: tape.constant(bias),
            }
        }
    };
    let text_encoder = place(&params.text_encoder, Block::TextEncoder);
    let generator = [
        place(&params.generator[0], Block::Generator),
        place(&params.generator[1], Block::Generator),
        place(&params.generator[2], Block::Generator),
    ];
    let discriminator = [
        place(&params.discriminator[0], Block::Discriminator),
        place(&params.discriminator[1], Block::Discriminator),
    ];
    let csem = place(&params.csem, Block::Csem);
    BoundModel {
        text_encoder,
        generator,
        discriminator,
        csem,
        dims: params.dims,
        leaky_slope: params.leaky_slope,
    }
}

/// Tape handles for a batch of Gaussian codes, each `[b × d_c]`.
#[derive(Clone, Copy, Debug)]
pub struct CodeVars {
    pub mu: Var,
    pub log_sigma: Var,
}

pub fn text_encode<T: Real>(tape: &mut TapeOf<T>, m: &BoundModel, phi: Var) -> Result<CodeVars> {
    let h = m.text_encoder.forward(tape, phi)?;
    let d_c = m.dims.d_c;
    Ok(CodeVars {
        mu: tape.slice_cols(h, 0, d_c)?,
        log_sigma: tape.slice_cols(h, d_c, d_c)?,
    })
}

/// Reparameterized draw `mu + exp(log_sigma) ⊙ ε`, `ε ~ N(0, I)`.
pub fn sample_latent<T: Real, R: Rng + ?Sized>(
    tape: &mut TapeOf<T>,
    code: CodeVars,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.value(code.mu).shape().to_vec();
    let eps = tape.constant(TensorOf::randn(&shape, 1.0, rng));
    let sigma = tape.exp(code.log_sigma)?;
    let noise = tape.mul(sigma, eps)?;
    tape.add(code.mu, noise)
}

/// Batch mean of the per-row divergence between each code and `N(0, I)`.
pub fn latent_divergence<T: Real, R: Rng + ?Sized>(
    tape: &mut TapeOf<T>,
    code: CodeVars,
    mode: DivergenceMode,
    rng: &mut R,
) -> Result<Var> {
    match mode {
        DivergenceMode::Kl => {
            // ½ Σ (σ² + μ² − 1 − log σ²)
            let log_var = tape.scale(code.log_sigma, 2.0)?;
            let var = tape.exp(log_var)?;
            let mu2 = tape.mul(code.mu, code.mu)?;
            let t = tape.add(var, mu2)?;
            let t = tape.sub(t, log_var)?;
            let t = tape.add_scalar(t, -1.0)?;
            let per_row = tape.sum_rows(t)?;
            let per_row = tape.scale(per_row, 0.5)?;
            tape.mean(per_row)
        }
        DivergenceMode::JsMonteCarlo { samples } => js_monte_carlo(tape, code, samples, rng),
    }
}

// JS(P‖Q) = ½ E_P[log 2 − softplus(log q − log p)] + ½ E_Q[log 2 − softplus(log p − log q)]
// with P = N(mu, σ²), Q = N(0, I); Gaussian normalizers cancel in the log ratios.
fn js_monte_carlo<T: Real, R: Rng + ?Sized>(
    tape: &mut TapeOf<T>,
    code: CodeVars,
    samples: usize,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.value(code.mu).shape().to_vec();
    let sigma = tape.exp(code.log_sigma)?;
    let neg_ls = tape.neg(code.log_sigma)?;
    let inv_sigma = tape.exp(neg_ls)?;
    let mut total: Option<Var> = None;
    for _ in 0..samples {
        // sample from P: x = mu + σ ε, (x − mu)/σ = ε
        let eps: TensorOf<T> = TensorOf::randn(&shape, 1.0, rng);
        let half_eps2 = eps.map(|e| T::of(0.5) * e * e);
        let eps = tape.constant(eps);
        let half_eps2 = tape.constant(half_eps2);
        let noise = tape.mul(sigma, eps)?;
        let x = tape.add(code.mu, noise)?;
        let x2 = tape.mul(x, x)?;
        let t = tape.scale(x2, -0.5)?;
        let t = tape.add(t, half_eps2)?;
        let t = tape.add(t, code.log_sigma)?;
        let log_q_minus_p = tape.sum_rows(t)?;
        let sp = tape.softplus(log_q_minus_p)?;
        let term_p = tape.neg(sp)?;

        // sample from Q: y = ε'
        let y: TensorOf<T> = TensorOf::randn(&shape, 1.0, rng);
        let half_y2 = y.map(|e| T::of(0.5) * e * e);
        let y = tape.constant(y);
        let half_y2 = tape.constant(half_y2);
        let diff = tape.sub(y, code.mu)?;
        let u = tape.mul(diff, inv_sigma)?;
        let u2 = tape.mul(u, u)?;
        let t = tape.scale(u2, -0.5)?;
        let t = tape.sub(t, code.log_sigma)?;
        let t = tape.add(t, half_y2)?;
        let log_p_minus_q = tape.sum_rows(t)?;
        let sp = tape.softplus(log_p_minus_q)?;
        let term_q = tape.neg(sp)?;

        let both = tape.add(term_p, term_q)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, both)?,
            None => both,
        });
    }
    let total = total.expect("samples >= 1");
    let per_row = tape.scale(total, 0.5 / samples as f64)?;
    let per_row = tape.add_scalar(per_row, std::f64::consts::LN_2)?;
    tape.mean(per_row)
}

/// `concat(z, c_hat) → h1 → leaky → h2 → leaky → d_i → relu`.
pub fn generate<T: Real>(tape: &mut TapeOf<T>, m: &BoundModel, z: Var, c_hat: Var) -> Result<Var> {
    let x = tape.concat_cols(z, c_hat)?;
    let h = m.generator[0].forward(tape, x)?;
    let h = tape.leaky_relu(h, m.leaky_slope)?;
    let h = m.generator[1].forward(tape, h)?;
    let h = tape.leaky_relu(h, m.leaky_slope)?;
    let h = m.generator[2].forward(tape, h)?;
    tape.relu(h)
}

/// Critic score `[b × 1]` for image embeddings conditioned on text
/// embeddings; no output activation.
pub fn discriminate<T: Real>(tape: &mut TapeOf<T>, m: &BoundModel, img: Var, phi: Var) -> Result<Var> {
    let x = tape.concat_cols(img, phi)?;
    let h = m.discriminator[0].forward(tape, x)?;
    let h = tape.leaky_relu(h, m.leaky_slope)?;
    m.discriminator[1].forward(tape, h)
}

pub fn csem_map<T: Real>(tape: &mut TapeOf<T>, m: &BoundModel, e: Var) -> Result<Var> {
    let h = m.csem.forward(tape, e)?;
    tape.relu(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape64, Tensor64};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dims() -> Dims {
        Dims {
            d_t: 3,
            d_i: 2,
            d_c: 2,
            d_z: 2,
            gen_hidden: [3, 3],
            disc_hidden: 3,
        }
    }

    fn leaky(x: f64) -> f64 {
        if x >= 0.0 {
            x
        } else {
            0.2 * x
        }
    }

    // Independent forward pass over plain nested loops.
    fn hand_affine(x: &[f64], l: &Linear) -> Vec<f64> {
        let (i, o) = (l.input(), l.output());
        (0..o)
            .map(|j| {
                let mut acc = l.bias.data()[j] as f64;
                for k in 0..i {
                    acc += x[k] * l.weight.data()[k * o + j] as f64;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic() {
        let d = toy_dims();
        let a = init_params(d, 0.2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = init_params(d, 0.2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let c = init_params(d, 0.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn init_moments() {
        let dims = Dims::new(16, 32);
        let p = init_params(dims, 0.2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = &p.generator[1].weight.data()[..100_000];
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        // 3σ/√n with σ = 0.02, n = 1e5 is 1.9e-4; the bound 3e-3 is loose
        assert!(mean.abs() < 3e-3, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 1e-3, "std {}", var.sqrt());
    }

    #[test]
    fn layer_shapes_follow_dims() {
        let dims = Dims::new(16, 32);
        let p = ModelParams::zeros(dims, 0.2);
        assert_eq!(p.text_encoder.weight.shape(), &[16, 2048]);
        assert_eq!(p.generator[0].weight.shape(), &[1124, 2048]);
        assert_eq!(p.generator[1].weight.shape(), &[2048, 4096]);
        assert_eq!(p.generator[2].weight.shape(), &[4096, 32]);
        assert_eq!(p.discriminator[0].weight.shape(), &[48, 1024]);
        assert_eq!(p.discriminator[1].weight.shape(), &[1024, 1]);
        assert_eq!(p.csem.weight.shape(), &[32, 1024]);
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "text_encoder.weight");
        assert_eq!(names[3], "generator.0.bias");
        assert_eq!(names.last().unwrap(), "csem.bias");
        assert_eq!(names.len(), 14);
    }

    #[test]
    fn zero_text_encoder_gives_standard_code() {
        let p = ModelParams::zeros(toy_dims(), 0.2);
        let code = p.text_encode(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(code.mu, vec![0.0, 0.0]);
        assert_eq!(code.sigma(), vec![1.0, 1.0]);
        assert_eq!(code.mu.len() + code.log_sigma.len(), 2 * toy_dims().d_c);
        assert!(p.text_encode(&[1.0]).is_err());
    }

    #[test]
    fn text_encode_toy_by_hand() {
        let dims = Dims {
            d_t: 2,
            d_c: 1,
            ..toy_dims()
        };
        let mut p = ModelParams::zeros(dims, 0.2);
        // columns: [mu, log_sigma]
        p.text_encoder.weight = Tensor::matrix(2, 2, vec![1.0, 0.5, -2.0, 0.25]).unwrap();
        p.text_encoder.bias = Tensor::from_vec(vec![0.1, -0.3]).unwrap();
        let code = p.text_encode(&[3.0, 1.0]).unwrap();
        // mu = 3·1 + 1·(−2) + 0.1; log σ = 3·0.5 + 1·0.25 − 0.3
        assert!((code.mu[0] - 1.1).abs() < 1e-6);
        assert!((code.log_sigma[0] - 1.45).abs() < 1e-6);
    }

    #[test]
    fn generator_and_critic_by_hand() {
        let dims = toy_dims();
        let p = init_params(dims, 0.2, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        // rescale so activations are far from zero-ish
        let mut p = p;
        for (name, t) in p.named_tensors_mut() {
            if name.starts_with("generator") || name.starts_with("discriminator") {
                for v in t.data_mut() {
                    *v *= 40.0;
                }
            }
        }
        let z = [0.3f32, -1.2];
        let c = [0.8f32, 0.1];
        let out = p.generate(&z, &c).unwrap();

        let x: Vec<f64> = z.iter().chain(&c).map(|&v| v as f64).collect();
        let h: Vec<f64> = hand_affine(&x, &p.generator[0]).into_iter().map(leaky).collect();
        let h: Vec<f64> = hand_affine(&h, &p.generator[1]).into_iter().map(leaky).collect();
        let o: Vec<f64> = hand_affine(&h, &p.generator[2]).into_iter().map(|v| v.max(0.0)).collect();
        for (a, e) in out.iter().zip(&o) {
            assert!((*a as f64 - e).abs() < 1e-5 * e.abs().max(1.0), "{out:?} vs {o:?}");
        }

        let img = [0.5f32, 1.5];
        let phi = [1.0f32, -1.0, 0.25];
        let score = p.discriminate(&img, &phi).unwrap();
        let x: Vec<f64> = img.iter().chain(&phi).map(|&v| v as f64).collect();
        let h: Vec<f64> = hand_affine(&x, &p.discriminator[0]).into_iter().map(leaky).collect();
        let s = hand_affine(&h, &p.discriminator[1])[0];
        assert!((score as f64 - s).abs() < 1e-5 * s.abs().max(1.0));
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let p = ModelParams::zeros(toy_dims(), 0.2);
        assert_eq!(p.generate(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(p.discriminate(&[1.0, 2.0], &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(p.csem_map(&[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn csem_identity_weights_is_relu() {
        let mut p = ModelParams::zeros(toy_dims(), 0.2);
        p.csem.weight = Tensor::identity(2);
        assert_eq!(p.csem_map(&[1.5, -2.0]).unwrap(), vec![1.5, 0.0]);
        assert!(p.csem_map(&[0.5, 0.0, 1.0]).is_err());
    }

    #[test]
    fn outputs_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..20 {
            let p = init_params(toy_dims(), 0.2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let z = Tensor::randn(&[2], 3.0, &mut rng);
            let c = Tensor::randn(&[2], 3.0, &mut rng);
            assert!(p.generate(z.data(), c.data()).unwrap().iter().all(|&v| v >= 0.0));
            assert!(p.csem_map(z.data()).unwrap().iter().all(|&v| v >= 0.0));
        }
    }

    fn code_on_tape(tape: &mut Tape, mu: &[f32], ls: &[f32]) -> CodeVars {
        let n = mu.len();
        CodeVars {
            mu: tape.param(Tensor::matrix(1, n, mu.to_vec()).unwrap()),
            log_sigma: tape.param(Tensor::matrix(1, n, ls.to_vec()).unwrap()),
        }
    }

    #[test]
    fn sample_latent_degenerate_variance() {
        let mut tape = Tape::new();
        let code = code_on_tape(&mut tape, &[0.5, -1.5], &[-1e30, -1e30]);
        let c = sample_latent(&mut tape, code, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tape.value(c).data(), &[0.5, -1.5]);
    }

    #[test]
    fn sample_latent_monte_carlo_mean_and_determinism() {
        let mu = [1.0f32, -2.0, 0.5];
        let ls = [0.0f32, (0.5f32).ln(), (2.0f32).ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut sums = [0.0f64; 3];
        for _ in 0..n {
            let mut tape = Tape::new();
            let code = code_on_tape(&mut tape, &mu, &ls);
            let c = sample_latent(&mut tape, code, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(tape.value(c).data()) {
                *s += *v as f64;
            }
        }
        for j in 0..3 {
            let sigma = (ls[j] as f64).exp();
            let mean = sums[j] / n as f64;
            assert!((mean - mu[j] as f64).abs() < 3.0 * sigma / 100.0, "coord {j}: {mean}");
        }

        let draw = |seed| {
            let mut tape = Tape::new();
            let code = code_on_tape(&mut tape, &mu, &ls);
            let c = sample_latent(&mut tape, code, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            tape.value(c).clone()
        };
        assert_eq!(draw(9), draw(9));
    }

    fn divergence(mu: &[f32], ls: &[f32], mode: DivergenceMode, seed: u64) -> f32 {
        let mut tape = Tape::new();
        let code = code_on_tape(&mut tape, mu, ls);
        let d = latent_divergence(&mut tape, code, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        tape.value(d).item()
    }

    #[test]
    fn divergence_examples() {
        assert_eq!(divergence(&[0.0, 0.0], &[0.0, 0.0], DivergenceMode::Kl, 0), 0.0);
        let js = DivergenceMode::JsMonteCarlo { samples: 64 };
        assert!(divergence(&[0.0, 0.0], &[0.0, 0.0], js, 0).abs() < 5e-2);
        assert!((divergence(&[1.0, 0.0], &[0.0, 0.0], DivergenceMode::Kl, 0) - 0.5).abs() < 1e-6);
        for (mu, ls) in [([2.0, -1.0], [0.5, -0.7]), ([0.1, 0.0], [0.0, 0.2]), ([9.0, 9.0], [-3.0, 3.0])] {
            let v = divergence(&mu, &ls, js, 1);
            assert!((-0.05..=std::f32::consts::LN_2 + 0.05).contains(&v), "{v}");
        }
        // far-apart distributions saturate at log 2
        let v = divergence(&[30.0, 30.0], &[-4.0, -4.0], js, 2);
        assert!((v - std::f32::consts::LN_2).abs() < 1e-3);
    }

    #[test]
    fn js_estimate_tracks_numeric_integration_in_one_dimension() {
        // 1-D JS(N(1, 0.5²) ‖ N(0, 1)) by trapezoidal quadrature
        let (m, s) = (1.0f64, 0.5f64);
        let p = |x: f64| (-0.5 * ((x - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let q = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let (lo, hi, n) = (-12.0, 12.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mut js = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let (px, qx) = (p(x), q(x));
            let mx = 0.5 * (px + qx);
            let mut f = 0.0;
            if px > 0.0 {
                f += 0.5 * px * (px / mx).ln();
            }
            if qx > 0.0 {
                f += 0.5 * qx * (qx / mx).ln();
            }
            js += if i == 0 || i == n { 0.5 * f } else { f } * h;
        }
        let est = divergence(&[1.0], &[(0.5f32).ln()], DivergenceMode::JsMonteCarlo { samples: 20_000 }, 5);
        assert!((est as f64 - js).abs() < 1e-2, "mc {est} vs quadrature {js}");
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let mu = Tensor::randn(&[4], 1.0, &mut rng);
            let ls = Tensor::randn(&[4], 0.5, &mut rng);
            let v = divergence(mu.data(), ls.data(), DivergenceMode::Kl, 0);
            assert!(v >= 0.0);
        }
        assert!(divergence(&[0.0; 4], &[0.0; 4], DivergenceMode::Kl, 0).abs() < 1e-6);
        assert!(divergence(&[1e-2, 0.0, 0.0, 0.0], &[0.0; 4], DivergenceMode::Kl, 0) > 0.0);
    }

    #[test]
    fn divergence_mode_parses() {
        assert_eq!("kl".parse::<DivergenceMode>().unwrap(), DivergenceMode::Kl);
        assert_eq!(
            "js:16".parse::<DivergenceMode>().unwrap(),
            DivergenceMode::JsMonteCarlo { samples: 16 }
        );
        assert!("js:0".parse::<DivergenceMode>().is_err());
        assert!("mmd".parse::<DivergenceMode>().is_err());
        let m = DivergenceMode::JsMonteCarlo { samples: 3 };
        assert_eq!(m.to_string().parse::<DivergenceMode>().unwrap(), m);
    }

    #[test]
    fn sample_latent_gradients_check() {
        let mu = Tensor64::matrix(2, 3, vec![0.4, -1.0, 0.7, 1.2, 0.3, -0.6]).unwrap();
        let ls = Tensor64::matrix(2, 3, vec![-0.2, 0.1, 0.3, -0.5, 0.0, 0.4]).unwrap();
        let f = |t: &mut Tape64, p: &[Var]| {
            let code = CodeVars { mu: p[0], log_sigma: p[1] };
            let c = sample_latent(t, code, &mut ChaCha8Rng::seed_from_u64(21))?;
            let sq = t.mul(c, c)?;
            t.mean(sq)
        };
        let r = grad_check(&[mu.clone(), ls.clone()], 1e-3, f).unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
        let r32 = grad_check(&[mu.cast::<f32>(), ls.cast::<f32>()], 1e-3, |t: &mut Tape, p: &[Var]| {
            let code = CodeVars { mu: p[0], log_sigma: p[1] };
            let c = sample_latent(t, code, &mut ChaCha8Rng::seed_from_u64(21))?;
            let sq = t.mul(c, c)?;
            t.mean(sq)
        })
        .unwrap();
        assert!(r32.max_rel_err < 1e-2, "{r32:?}");
    }

    #[test]
    fn divergence_gradients_check() {
        let mu = Tensor64::matrix(2, 3, vec![0.4, -1.0, 0.7, 1.2, 0.3, -0.6]).unwrap();
        let ls = Tensor64::matrix(2, 3, vec![-0.2, 0.1, 0.3, -0.5, 0.05, 0.4]).unwrap();
        for mode in [DivergenceMode::Kl, DivergenceMode::JsMonteCarlo { samples: 4 }] {
            let r = grad_check(&[mu.clone(), ls.clone()], 1e-3, |t: &mut Tape64, p: &[Var]| {
                let code = CodeVars { mu: p[0], log_sigma: p[1] };
                latent_divergence(t, code, mode, &mut ChaCha8Rng::seed_from_u64(4))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-3, "{mode}: {r:?}");
        }
    }
}
